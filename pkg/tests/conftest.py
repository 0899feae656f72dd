from pathlib import Path

import numpy as np
import pytest
import torch

from ffprune.lm import EvalSet, ModelConfig, TinyLM

DATA = Path(__file__).parent / "data"
CORPUS = DATA / "stdlib_docs.txt"

TINY = ModelConfig(n_layers=2, d_model=16, n_heads=4, d_ff=32, vocab_size=32, max_seq_len=16)


def random_model(config: ModelConfig = TINY, seed: int = 0, dtype=torch.float64) -> TinyLM:
    torch.manual_seed(seed)
    model = TinyLM(config).to(dtype)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn_like(p))
    return model.eval()


def random_evalset(config: ModelConfig = TINY, n: int = 6, seq_len: int = 8, seed: int = 0) -> EvalSet:
    rng = np.random.default_rng(seed)
    return EvalSet(rng.integers(0, config.vocab_size, size=(n, seq_len + 1)), "random")


@pytest.fixture
def tiny_model():
    return random_model()


@pytest.fixture
def tiny_evalset():
    return random_evalset()


def redundant_model(config: ModelConfig = TINY, seed: int = 3) -> tuple[TinyLM, "PruneMask"]:
    """Dense model whose second half of heads and FFN channels copy the first half, plus the mask dropping the copies."""
    from ffprune.prune import PruneMask

    model = random_model(config, seed=seed)
    hd, half_heads, half_ff = config.head_dim, config.n_heads // 2, config.d_ff // 2
    with torch.no_grad():
        for block in model.blocks:
            for proj in (block.attn.q, block.attn.k, block.attn.v):
                proj.weight[half_heads * hd :] = proj.weight[: half_heads * hd]
            block.ffn.up.weight[half_ff:] = block.ffn.up.weight[:half_ff]
    mask = PruneMask([list(range(half_heads)), list(range(half_ff))] * config.n_layers)
    return model, mask


# -- acceptance summary --------------------------------------------------------------------

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_criterion(key: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[key] = (bool(passed), detail)
    print(f"criterion {key}: {'PASS' if passed else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")

    def order(key):
        num = "".join(c for c in key if c.isdigit())
        return (int(num), key)

    for key in sorted(ACCEPTANCE, key=order):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>3}: {'PASS' if passed else 'FAIL'} | {detail}")
