"""Progressive scheduling: one sigmoid progression drives both task difficulty and evaluation fidelity."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

from .agent import Agent, PPOConfig

log = logging.getLogger(__name__)


@dataclass
class ScheduleConfig:
    s_final: float = 0.2
    alpha_start: float = 0.3
    k: float = 0.01
    t0: float = 500.0
    n_max: int = 32
    total_steps: int = 1500
    # True flips the exponent to -k(t0 - t): alpha then decays from ~1 towards
    # alpha_start instead of rising. Kept only for comparison runs.
    decreasing: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha_start < 1.0:
            raise ValueError(f"alpha_start must be in (0, 1), got {self.alpha_start}")
        if self.k <= 0:
            raise ValueError(f"k must be > 0, got {self.k}")
        if self.t0 < 0:
            raise ValueError(f"t0 must be >= 0, got {self.t0}")
        if not 0.0 <= self.s_final < 1.0:
            raise ValueError(f"s_final must be in [0, 1), got {self.s_final}")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if self.total_steps <= self.t0:
            log.warning("total_steps=%d does not pass the schedule midpoint t0=%g", self.total_steps, self.t0)

    def to_dict(self) -> dict:
        return asdict(self)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def alpha(t: float, cfg: ScheduleConfig) -> float:
    """alpha_start + (1 - alpha_start) * sigmoid(k (t - t0)); rises from ~alpha_start to 1."""
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    x = cfg.k * (cfg.t0 - t) if cfg.decreasing else cfg.k * (t - cfg.t0)
    return cfg.alpha_start + (1.0 - cfg.alpha_start) * _sigmoid(x)


def target_sparsity(t: float, cfg: ScheduleConfig) -> float:
    return cfg.s_final * alpha(t, cfg)


def eval_samples(t: float, cfg: ScheduleConfig) -> int:
    return max(1, math.floor(cfg.n_max * alpha(t, cfg) + 0.5))


def warm_start(source, expected_units: int, ppo: PPOConfig | None = None) -> Agent:
    """Initialize a new search from a trained agent (path, bytes or :class:`Agent`).

    Policy and value weights are copied unchanged; the optimizer starts fresh.
    The caller restarts its schedule at t = 0 with the new final sparsity.
    """
    if isinstance(source, Agent):
        data = source.state_bytes()
    elif isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        data = Path(source).read_bytes()
    agent = Agent.from_bytes(data)
    if agent.n_units != expected_units:
        raise ValueError(f"warm-start agent has {agent.n_units} units but the target model has {expected_units}")
    if ppo is not None:
        agent.cfg = ppo
    agent.reset_optimizer()
    agent.updates = 0
    return agent
