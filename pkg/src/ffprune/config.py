"""Run configuration: one JSON file holding every sub-config, plus the data splits it implies."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import PPOConfig
from .budget import BudgetSpec
from .calibrate import DEFAULT_LAMBDA, MAX_ROWS
from .curriculum import ScheduleConfig
from .lm import EvalSet, ModelConfig, TrainConfig, load_corpus, split_corpus
from .search import BudgetBounds


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class DataConfig:
    corpus: str = ""
    holdout_fraction: float = 0.1
    eval_seq_len: int = 128
    calib_samples: int = 32

    def __post_init__(self):
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction must be in (0, 1), got {self.holdout_fraction}")
        if self.eval_seq_len < 1 or self.calib_samples < 1:
            raise ConfigError("eval_seq_len and calib_samples must be >= 1")


@dataclass
class CalibConfig:
    lam: float = DEFAULT_LAMBDA
    max_rows: int = MAX_ROWS

    def __post_init__(self):
        if self.lam < 0 or self.max_rows < 1:
            raise ConfigError(f"calibration needs lam >= 0 and max_rows >= 1, got {self.lam}, {self.max_rows}")


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    budget: BudgetBounds = field(default_factory=BudgetBounds)
    data: DataConfig = field(default_factory=DataConfig)
    calibration: CalibConfig = field(default_factory=CalibConfig)

    _SECTIONS = {
        "model": ModelConfig,
        "train": TrainConfig,
        "schedule": ScheduleConfig,
        "ppo": PPOConfig,
        "budget": BudgetBounds,
        "data": DataConfig,
        "calibration": CalibConfig,
    }

    @classmethod
    def from_dict(cls, obj: dict, base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(obj) - {"name", "seed", *cls._SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {"name": str(obj.get("name", "run")), "seed": obj.get("seed", 0)}
        if not isinstance(kwargs["seed"], int) or kwargs["seed"] < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {kwargs['seed']!r}")
        for key, typ in cls._SECTIONS.items():
            section = obj.get(key, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section '{key}' must be an object")
            names = {f.name for f in dataclasses.fields(typ)}
            bad = set(section) - names
            if bad:
                raise ConfigError(f"unknown keys in '{key}': {sorted(bad)}")
            try:
                kwargs[key] = typ(**section)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid '{key}' section: {exc}") from exc
        cfg = cls(**kwargs)
        if cfg.data.corpus and base_dir is not None and not Path(cfg.data.corpus).is_absolute():
            cfg.data.corpus = str((base_dir / cfg.data.corpus).resolve())
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(obj, path.parent)

    def check(self) -> None:
        """Cross-section consistency; raises :class:`ConfigError`."""
        if self.data.eval_seq_len > self.model.max_seq_len:
            raise ConfigError(f"eval_seq_len {self.data.eval_seq_len} exceeds max_seq_len {self.model.max_seq_len}")
        b = self.budget
        try:  # bounds and grid, checked at the widest feasible preservation
            BudgetSpec(b.a_max, (1.0,), b.a_min, b.a_max, b.grid)
        except ValueError as exc:
            raise ConfigError(f"invalid 'budget' section: {exc}") from exc
        self.check_sparsity(self.schedule.s_final)

    def check_sparsity(self, sparsity: float) -> None:
        b = self.budget
        if not 1.0 - b.a_max - 1e-9 <= sparsity <= 1.0 - b.a_min + 1e-9:
            raise ConfigError(
                f"sparsity {sparsity} is infeasible for bounds [{b.a_min}, {b.a_max}]; "
                f"feasible sparsity interval is [{1 - b.a_max:.6g}, {1 - b.a_min:.6g}]"
            )

    def to_dict(self) -> dict:
        out = {"name": self.name, "seed": self.seed}
        for key in self._SECTIONS:
            section = getattr(self, key)
            out[key] = section.to_dict() if hasattr(section, "to_dict") else dataclasses.asdict(section)
        return out


@dataclass
class DataSplits:
    train: np.ndarray
    eval_set: EvalSet  # reward / report evaluation windows
    calib_set: EvalSet  # calibration and scoring windows, disjoint from eval_set


def data_splits(cfg: RunConfig, tokens: np.ndarray | None = None) -> DataSplits:
    """Training tokens plus disjoint evaluation and calibration windows cut from the held-out tail."""
    if tokens is None:
        if not cfg.data.corpus:
            raise ConfigError("data.corpus is not set")
        path = Path(cfg.data.corpus)
        if not path.is_file():
            raise ConfigError(f"corpus file not found: {path}")
        try:
            tokens = load_corpus(path)
        except UnicodeDecodeError as exc:
            raise ConfigError(f"corpus {path} is not UTF-8 text: {exc}") from exc
    train, holdout = split_corpus(tokens, cfg.data.holdout_fraction)
    n_eval, n_calib = cfg.schedule.n_max, cfg.data.calib_samples
    try:
        windows = EvalSet.from_tokens(holdout, cfg.data.eval_seq_len, n_eval + n_calib, "holdout")
    except ValueError as exc:
        raise ConfigError(f"held-out split too small for {n_eval} eval + {n_calib} calibration windows: {exc}") from exc
    return DataSplits(train, windows.slice(0, n_eval), windows.slice(n_eval, n_eval + n_calib))
