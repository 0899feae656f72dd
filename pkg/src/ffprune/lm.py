"""Small byte-level decoder-only transformer: training, perplexity and activation capture.

The same :class:`TinyLM` class represents both the dense model and its
structurally pruned variants; pruning only changes the per-layer head count
and FFN width it is built with.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .serialization import decode_tensors, encode_tensors, atomic_write_bytes

log = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 256
    max_seq_len: int = 128

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class Site(NamedTuple):
    """A capture point: ``kind`` is one of :data:`SITE_KINDS`."""

    layer: int
    kind: str

    def __str__(self) -> str:
        return f"layer{self.layer}.{self.kind}"


# attn_in / ffn_in: normalized residual stream entering Q,K,V / the up projection.
# attn_heads: concatenated per-head outputs entering O.  ffn_hidden: GELU output entering down.
SITE_KINDS = ("attn_in", "attn_heads", "ffn_in", "ffn_hidden")


def all_sites(n_layers: int) -> list[Site]:
    return [Site(layer, kind) for layer in range(n_layers) for kind in SITE_KINDS]


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, head_dim: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = head_dim
        inner = n_heads * head_dim
        self.q = nn.Linear(d_model, inner, bias=False)
        self.k = nn.Linear(d_model, inner, bias=False)
        self.v = nn.Linear(d_model, inner, bias=False)
        self.o = nn.Linear(inner, d_model, bias=False)

    def heads(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        q, k, v = (
            proj(x).view(B, T, self.n_heads, self.head_dim).transpose(1, 2) for proj in (self.q, self.k, self.v)
        )
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return y.transpose(1, 2).reshape(B, T, self.n_heads * self.head_dim)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.up = nn.Linear(d_model, d_ff, bias=False)
        self.down = nn.Linear(d_ff, d_model, bias=False)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, head_dim: int, d_ff: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads, head_dim)
        self.ln2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff)

    def forward(self, x, layer: int, record: dict | None = None):
        h = self.ln1(x)
        heads = self.attn.heads(h)
        x = x + self.attn.o(heads)
        g = self.ln2(x)
        hidden = F.gelu(self.ffn.up(g))
        x = x + self.ffn.down(hidden)
        if record is not None:
            for kind, value in (("attn_in", h), ("attn_heads", heads), ("ffn_in", g), ("ffn_hidden", hidden)):
                site = Site(layer, kind)
                if site in record:
                    record[site].append(value.detach().reshape(-1, value.shape[-1]))
        return x


class TinyLM(nn.Module):
    """Pre-norm decoder-only transformer with learned positions and an untied head.

    ``n_heads_per_layer`` / ``d_ff_per_layer`` default to the config values; a
    pruned model passes the kept counts instead.
    """

    def __init__(
        self,
        config: ModelConfig,
        n_heads_per_layer: Sequence[int] | None = None,
        d_ff_per_layer: Sequence[int] | None = None,
    ):
        super().__init__()
        self.config = config
        self.n_heads_per_layer = list(n_heads_per_layer or [config.n_heads] * config.n_layers)
        self.d_ff_per_layer = list(d_ff_per_layer or [config.d_ff] * config.n_layers)
        if len(self.n_heads_per_layer) != config.n_layers or len(self.d_ff_per_layer) != config.n_layers:
            raise ValueError("per-layer widths must have one entry per layer")
        if min(self.n_heads_per_layer) < 1 or min(self.d_ff_per_layer) < 1:
            raise ValueError("every layer must keep at least one head and one FFN channel")
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_seq_len, config.d_model)
        self.blocks = nn.ModuleList(
            Block(config.d_model, h, config.head_dim, f) for h, f in zip(self.n_heads_per_layer, self.d_ff_per_layer)
        )
        self.ln_f = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=INIT_STD)

    def forward(self, idx: torch.Tensor, record: dict | None = None) -> torch.Tensor:
        T = idx.shape[1]
        if T > self.config.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len {self.config.max_seq_len}")
        pos = torch.arange(T, device=idx.device)
        x = self.tok_emb(idx) + self.pos_emb(pos)
        for layer, block in enumerate(self.blocks):
            x = block(x, layer, record)
        return self.head(self.ln_f(x))

    def layout(self) -> dict:
        return {"n_heads": list(self.n_heads_per_layer), "d_ff": list(self.d_ff_per_layer)}

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


# -- data -------------------------------------------------------------------------------


def load_corpus(path: str | Path) -> np.ndarray:
    """Byte-level tokenization of a UTF-8 text file (token id = byte value)."""
    data = Path(path).read_bytes()
    data.decode("utf-8")  # reject files that are not UTF-8
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def split_corpus(tokens: np.ndarray, holdout_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    cut = int(round(len(tokens) * (1.0 - holdout_fraction)))
    return tokens[:cut], tokens[cut:]


@dataclass
class EvalSet:
    """Fixed-length evaluation windows.

    ``tokens`` has shape ``(n, seq_len + 1)``: the model reads the first
    ``seq_len`` tokens of each row and is scored on the last ``seq_len``.
    """

    tokens: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2 or self.tokens.shape[1] < 2:
            raise ValueError("EvalSet tokens must be a 2-D array with rows of length >= 2")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1] - 1

    def slice(self, start: int, stop: int | None = None) -> "EvalSet":
        return EvalSet(self.tokens[start:stop], f"{self.source}[{start}:{'' if stop is None else stop}]")

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, seq_len: int, n: int | None = None, source: str = "") -> "EvalSet":
        """Cut consecutive non-overlapping windows of ``seq_len + 1`` tokens."""
        width = seq_len + 1
        available = len(tokens) // width
        n = available if n is None else n
        if n > available:
            raise ValueError(f"corpus of {len(tokens)} tokens holds only {available} windows of {width}")
        return cls(np.asarray(tokens[: n * width]).reshape(n, width), source)


# -- evaluation -------------------------------------------------------------------------


def _module(model) -> nn.Module:
    return getattr(model, "model", model)


@torch.no_grad()
def sequence_nll(model, eval_set: EvalSet, start: int = 0, stop: int | None = None, batch_size: int = 32) -> np.ndarray:
    """Summed next-token NLL (float64) of each window in ``eval_set[start:stop]``."""
    net = _module(model)
    net.eval()
    data = torch.from_numpy(eval_set.tokens[start:stop])
    out = []
    for lo in range(0, data.shape[0], batch_size):
        chunk = data[lo : lo + batch_size]
        logits = net(chunk[:, :-1]).to(torch.float64)
        nll = F.cross_entropy(logits.transpose(1, 2), chunk[:, 1:], reduction="none")
        out.append(nll.sum(dim=1).numpy())
    return np.concatenate(out) if out else np.zeros(0)


def ppl_from_nll(nll_sums: np.ndarray, seq_len: int) -> float:
    """exp of the token-mean NLL; ``math.inf`` for a non-finite mean or an overflowing exp."""
    mean = float(np.sum(nll_sums)) / (len(nll_sums) * seq_len)
    if not math.isfinite(mean):
        return math.inf
    try:
        return math.exp(mean)
    except OverflowError:
        return math.inf


def perplexity(model, eval_set: EvalSet, n_samples: int, batch_size: int = 32) -> float:
    """exp(mean token NLL) over the first ``n_samples`` windows.

    Returns ``math.inf`` when the mean NLL is not finite or overflows ``exp``;
    a collapsed model is a valid measurement, not an error.
    """
    if len(eval_set) == 0:
        raise ValueError("eval_set is empty")
    if not 1 <= n_samples <= len(eval_set):
        raise ValueError(f"n_samples must be in [1, {len(eval_set)}], got {n_samples}")
    return ppl_from_nll(sequence_nll(model, eval_set, 0, n_samples, batch_size), eval_set.seq_len)


@dataclass
class ActivationCapture:
    site: Site
    values: np.ndarray  # (rows, channels), float64

    @property
    def column_norms(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=0)


def validate_sites(model, sites: Iterable[Site]) -> list[Site]:
    net = _module(model)
    out = []
    for site in sites:
        site = Site(*site)
        if site.kind not in SITE_KINDS or not 0 <= site.layer < net.config.n_layers:
            raise ValueError(f"invalid capture site {site}")
        out.append(site)
    return out


@torch.no_grad()
def collect_activations(model, eval_set: EvalSet, sites: Iterable[Site], batch_size: int = 32) -> dict[Site, ActivationCapture]:
    """Run ``eval_set`` through the model and return one capture per site.

    Rows are (sample, position) pairs in row-major order.
    """
    net = _module(model)
    sites = validate_sites(net, sites)
    if len(eval_set) == 0:
        raise ValueError("eval_set is empty")
    net.eval()
    record: dict[Site, list] = {s: [] for s in sites}
    data = torch.from_numpy(eval_set.tokens[:, :-1])
    for start in range(0, len(eval_set), batch_size):
        net(data[start : start + batch_size], record=record)
    return {s: ActivationCapture(s, torch.cat(record[s]).to(torch.float64).numpy()) for s in sites}


# -- training ---------------------------------------------------------------------------


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 3e-4
    min_lr_ratio: float = 0.1
    warmup_steps: int = 100
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seq_len: int | None = None  # defaults to max_seq_len
    fixed_batch: bool = False  # reuse a single batch every step (memorization check)

    def lr_at(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        span = max(1, self.steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        floor = self.lr * self.min_lr_ratio
        return floor + 0.5 * (self.lr - floor) * (1.0 + math.cos(math.pi * progress))


def lm_loss(model: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    logits = model(batch[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1))


def train_dense(
    corpus: np.ndarray,
    config: ModelConfig,
    hyper: TrainConfig | None = None,
    seed: int = 0,
    history: list | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TinyLM:
    """Train a dense model from scratch on random windows of ``corpus``.

    Deterministic given ``seed``. Appends ``(step, loss, lr)`` tuples to
    ``history`` when supplied.
    """
    hyper = hyper or TrainConfig()
    corpus = np.asarray(corpus, dtype=np.int64)
    if len(corpus) < 10 * config.max_seq_len:
        raise ValueError(f"corpus has {len(corpus)} tokens; need at least {10 * config.max_seq_len}")
    if corpus.size and (corpus.min() < 0 or corpus.max() >= config.vocab_size):
        raise ValueError(f"corpus token ids fall outside the vocabulary of size {config.vocab_size}")
    seq_len = hyper.seq_len or config.max_seq_len
    if seq_len > config.max_seq_len:
        raise ValueError(f"training seq_len {seq_len} exceeds max_seq_len {config.max_seq_len}")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TinyLM(config)
    gen = torch.Generator().manual_seed(seed + 1)
    data = torch.from_numpy(corpus)
    opt = torch.optim.AdamW(model.parameters(), lr=hyper.lr, betas=(0.9, 0.95), weight_decay=hyper.weight_decay)

    def draw():
        starts = torch.randint(0, len(data) - seq_len - 1, (hyper.batch_size,), generator=gen)
        return torch.stack([data[s : s + seq_len + 1] for s in starts.tolist()])

    fixed = draw() if hyper.fixed_batch else None
    model.train()
    for step in range(hyper.steps):
        lr = hyper.lr_at(step)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = fixed if fixed is not None else draw()
        loss = lm_loss(model, batch)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite training loss {value} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if hyper.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), hyper.grad_clip)
        opt.step()
        if history is not None:
            history.append((step, value, lr))
        if on_step is not None:
            on_step(step, value)
        if step % 500 == 0:
            log.debug("step %d loss %.4f lr %.2e", step, value, lr)
    model.eval()
    return model


# -- checkpoints ------------------------------------------------------------------------

LM_KIND = "tiny_lm"


def model_to_bytes(model: TinyLM, extra: dict | None = None) -> bytes:
    meta = {"config": model.config.to_dict(), "layout": model.layout(), "extra": extra or {}}
    return encode_tensors(LM_KIND, meta, model.state_dict())


def model_from_bytes(data: bytes) -> tuple[TinyLM, dict]:
    meta, tensors = decode_tensors(data, LM_KIND)
    config = ModelConfig(**meta["config"])
    layout = meta["layout"]
    dtype = next(iter(tensors.values())).dtype
    model = TinyLM(config, layout["n_heads"], layout["d_ff"]).to(dtype)
    model.load_state_dict(tensors)
    model.eval()
    return model, meta.get("extra", {})


def save_model(model: TinyLM, path, extra: dict | None = None) -> None:
    atomic_write_bytes(path, model_to_bytes(model, extra))


def load_model(path) -> tuple[TinyLM, dict]:
    return model_from_bytes(Path(path).read_bytes())
