"""Single-step PPO over raw retention scores, conditioned on the target sparsity."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .serialization import atomic_write_bytes, decode_tensors, encode_tensors

log = logging.getLogger(__name__)

AGENT_KIND = "ppo_agent"
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PPOConfig:
    lr: float = 1e-4
    clip: float = 0.2
    batch_size: int = 16
    epochs: int = 4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    hidden: tuple[int, ...] = (256, 128)
    log_std_init: float = -0.5
    log_std_min: float = -5.0
    log_std_max: float = 1.0
    normalize_advantages: bool = True

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if not 0.0 < self.clip < 1.0:
            raise ValueError(f"clip ratio must be in (0, 1), got {self.clip}")
        for name in ("lr", "entropy_coef", "value_coef", "max_grad_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def mlp(sizes: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class PolicyNet(nn.Module):
    """Gaussian policy (state-independent log-std) plus a value head of the same shape."""

    def __init__(self, n_units: int, hidden: Sequence[int] = (256, 128), log_std_init: float = -0.5):
        super().__init__()
        self.n_units = n_units
        self.mean = mlp([1, *hidden, n_units])
        self.value = mlp([1, *hidden, 1])
        self.log_std = nn.Parameter(torch.full((n_units,), float(log_std_init)))
        with torch.no_grad():
            self.mean[-1].weight.mul_(0.01)
            self.mean[-1].bias.zero_()

    def forward(self, sigma: torch.Tensor):
        x = sigma.reshape(-1, 1)
        return self.mean(x), self.value(x).squeeze(-1)


def gaussian_logp(action: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    z = (action - mean) * torch.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * _LOG_2PI).sum(-1)


class Agent:
    """Policy/value networks plus their optimizer state."""

    def __init__(self, n_units: int, cfg: PPOConfig | None = None, seed: int = 0):
        self.cfg = cfg or PPOConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = PolicyNet(n_units, self.cfg.hidden, self.cfg.log_std_init).double()
        self.reset_optimizer()
        self.updates = 0

    @property
    def n_units(self) -> int:
        return self.net.n_units

    def reset_optimizer(self) -> None:
        self.opt = torch.optim.Adam(self.net.parameters(), lr=self.cfg.lr)

    def log_std(self) -> torch.Tensor:
        return self.net.log_std.clamp(self.cfg.log_std_min, self.cfg.log_std_max)

    @torch.no_grad()
    def mean_action(self, sigma: float) -> np.ndarray:
        mean, _ = self.net(torch.tensor([sigma], dtype=torch.float64))
        return mean[0].numpy().copy()

    def state_bytes(self) -> bytes:
        meta = {"n_units": self.n_units, "ppo": self.cfg.to_dict(), "updates": self.updates}
        return encode_tensors(AGENT_KIND, meta, self.net.state_dict())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Agent":
        meta, tensors = decode_tensors(data, AGENT_KIND)
        agent = cls(meta["n_units"], PPOConfig(**meta["ppo"]))
        agent.net.load_state_dict(tensors)
        agent.updates = meta.get("updates", 0)
        return agent

    def save(self, path) -> None:
        atomic_write_bytes(path, self.state_bytes())

    @classmethod
    def load(cls, path) -> "Agent":
        return cls.from_bytes(Path(path).read_bytes())


@torch.no_grad()
def sample_action(agent: Agent, sigma: float, rng: torch.Generator) -> tuple[np.ndarray, float, float]:
    """Draw A ~ N(mean(sigma), exp(log_std)); returns (action, joint log-prob, value estimate)."""
    if not 0.0 <= sigma < 1.0:
        raise ValueError(f"state sigma must be in [0, 1), got {sigma}")
    mean, value = agent.net(torch.tensor([sigma], dtype=torch.float64))
    log_std = agent.log_std()
    if not (torch.isfinite(mean).all() and torch.isfinite(log_std).all()):
        raise FloatingPointError(f"non-finite policy output at sigma={sigma}: mean={mean.tolist()}")
    noise = torch.randn(agent.n_units, generator=rng, dtype=torch.float64)
    action = mean[0] + torch.exp(log_std) * noise
    logp = gaussian_logp(action, mean[0], log_std)
    return action.numpy().copy(), float(logp), float(value[0])


def compute_reward(ppl_dense: float, ppl_pruned: float) -> float:
    """PPL_dense / PPL_pruned; a non-finite pruned perplexity earns 0."""
    if not math.isfinite(ppl_dense) or ppl_dense < 1.0:
        raise ValueError(f"dense perplexity must be finite and >= 1, got {ppl_dense}")
    if not math.isfinite(ppl_pruned) or ppl_pruned <= 0:
        return 0.0
    return ppl_dense / ppl_pruned


def advantages(rewards: Sequence[float], values: Sequence[float], normalize: bool = True) -> np.ndarray:
    """R - V per record (episodes have length one); standardized when the batch has >= 4 records."""
    adv = np.asarray(rewards, dtype=np.float64) - np.asarray(values, dtype=np.float64)
    if normalize and adv.size >= 4:
        centred = adv - adv.mean()
        adv = centred / max(float(centred.std()), 1e-8)
    return adv


def clipped_surrogate(ratio, adv, clip: float):
    return torch.minimum(ratio * adv, torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * adv)


@dataclass
class Batch:
    sigma: torch.Tensor
    action: torch.Tensor
    logp_old: torch.Tensor
    reward: torch.Tensor
    adv: torch.Tensor

    @classmethod
    def from_records(cls, records, normalize: bool = True) -> "Batch":
        if not records:
            raise ValueError("PPO batch is empty")
        adv = advantages([r.reward for r in records], [r.value for r in records], normalize)
        t = lambda x: torch.tensor(np.asarray(x, dtype=np.float64))  # noqa: E731
        return cls(
            sigma=t([r.sigma for r in records]),
            action=t(np.stack([np.asarray(r.action, dtype=np.float64) for r in records])),
            logp_old=t([r.logp for r in records]),
            reward=t([r.reward for r in records]),
            adv=t(adv),
        )


def ppo_loss(net: PolicyNet, batch: Batch, cfg: PPOConfig) -> tuple[torch.Tensor, dict]:
    mean, value = net(batch.sigma)
    log_std = net.log_std.clamp(cfg.log_std_min, cfg.log_std_max)
    logp = gaussian_logp(batch.action, mean, log_std)
    ratio = torch.exp(logp - batch.logp_old)
    policy_obj = clipped_surrogate(ratio, batch.adv, cfg.clip).mean()
    value_loss = ((value - batch.reward) ** 2).mean()
    entropy = (log_std + 0.5 * (_LOG_2PI + 1.0)).sum()
    loss = -policy_obj + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    stats = {
        "policy_objective": policy_obj.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "mean_ratio": ratio.mean().item(),
    }
    return loss, stats


def ppo_update(agent: Agent, records, cfg: PPOConfig | None = None) -> dict:
    """Run ``cfg.epochs`` full-batch clipped-surrogate steps on ``records``."""
    cfg = cfg or agent.cfg
    batch = Batch.from_records(records, cfg.normalize_advantages)
    stats: dict = {}
    for epoch in range(cfg.epochs):
        loss, stats = ppo_loss(agent.net, batch, cfg)
        agent.opt.zero_grad(set_to_none=True)
        loss.backward()
        grads = [p.grad for p in agent.net.parameters() if p.grad is not None]
        if not all(torch.isfinite(g).all() for g in grads):
            log.warning("non-finite PPO gradient at update %d epoch %d; step skipped", agent.updates, epoch)
            agent.opt.zero_grad(set_to_none=True)
            continue
        if cfg.max_grad_norm:
            nn.utils.clip_grad_norm_(agent.net.parameters(), cfg.max_grad_norm)
        agent.opt.step()
        with torch.no_grad():
            agent.net.log_std.clamp_(cfg.log_std_min, cfg.log_std_max)
    agent.updates += 1
    return stats


@dataclass
class BanditRecord:
    sigma: float
    action: np.ndarray
    logp: float
    value: float
    reward: float


def run_bandit(agent: Agent, reward_fn, episodes: int, sigma: float = 0.0, seed: int = 0) -> list[float]:
    """Train ``agent`` on a stationary reward of the raw action; returns the per-episode rewards.

    Same sampling and batching as the pruning search, with ``reward_fn`` in
    place of the prune-and-evaluate step. A trailing partial batch is dropped.
    """
    rng = torch.Generator().manual_seed(seed)
    rewards: list[float] = []
    buffer: list[BanditRecord] = []
    for _ in range(episodes):
        action, logp, value = sample_action(agent, sigma, rng)
        reward = float(reward_fn(action))
        rewards.append(reward)
        buffer.append(BanditRecord(sigma, action, logp, value, reward))
        if len(buffer) == agent.cfg.batch_size:
            ppo_update(agent, buffer)
            buffer = []
    return rewards
