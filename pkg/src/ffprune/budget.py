"""Deterministic mapping from raw agent scores to a budget-exact retention policy.

Pipeline: :func:`squash` -> :func:`allocate` (greedy water-filling in preference
order) -> :func:`discretize_and_correct` (snap to the precision grid, then
restore the global budget). :func:`map_action` composes the three.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_EPS = 1e-9


@dataclass(frozen=True)
class BudgetSpec:
    preservation: float
    weights: tuple[float, ...]
    a_min: float = 0.1
    a_max: float = 1.0
    grid: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not self.weights or min(self.weights) <= 0:
            raise ValueError("unit weights must be non-empty and positive")
        if not 0.0 < self.a_min < self.a_max <= 1.0:
            raise ValueError(f"bounds must satisfy 0 < a_min < a_max <= 1, got [{self.a_min}, {self.a_max}]")
        if not 0.0 < self.grid <= self.a_max - self.a_min + _EPS:
            raise ValueError(f"grid step {self.grid} must lie in (0, a_max - a_min]")
        for name in ("a_min", "a_max"):
            cells = getattr(self, name) / self.grid
            if abs(cells - round(cells)) > 1e-6:
                raise ValueError(f"{name}={getattr(self, name)} is not a multiple of the grid step {self.grid}")
        if not self.a_min - _EPS <= self.preservation <= self.a_max + _EPS:
            raise ValueError(
                f"preservation ratio {self.preservation} is infeasible; feasible interval is "
                f"[{self.a_min}, {self.a_max}] (sparsity [{1 - self.a_max:.6g}, {1 - self.a_min:.6g}])"
            )

    @classmethod
    def for_sparsity(cls, sparsity: float, weights, **kw) -> "BudgetSpec":
        return cls(1.0 - sparsity, tuple(weights), **kw)

    @property
    def w(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)

    @property
    def target(self) -> float:
        return self.preservation * float(self.w.sum())

    def grid_range(self) -> tuple[int, int]:
        """Integer grid indices [lo, hi] whose rates lie inside the bounds."""
        lo = math.ceil(self.a_min / self.grid - _EPS)
        hi = math.floor(self.a_max / self.grid + _EPS)
        return lo, hi


@dataclass(frozen=True)
class RetentionPolicy:
    rates: tuple[float, ...]
    preservation: float
    a_min: float
    a_max: float
    grid: float
    achieved: float
    action_hash: str = ""
    sigma: float | None = None

    @property
    def sparsity(self) -> float:
        return 1.0 - self.preservation

    def to_json(self) -> dict:
        return {
            "rates": list(self.rates),
            "preservation": self.preservation,
            "sparsity": round(self.sparsity, 12),
            "bounds": [self.a_min, self.a_max],
            "grid": self.grid,
            "achieved_preservation": self.achieved,
            "provenance": {"action_hash": self.action_hash, "sigma": self.sigma},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RetentionPolicy":
        prov = obj.get("provenance", {})
        return cls(
            rates=tuple(float(r) for r in obj["rates"]),
            preservation=float(obj["preservation"]),
            a_min=float(obj["bounds"][0]),
            a_max=float(obj["bounds"][1]),
            grid=float(obj["grid"]),
            achieved=float(obj.get("achieved_preservation", obj["preservation"])),
            action_hash=prov.get("action_hash", ""),
            sigma=prov.get("sigma"),
        )


def preference_order(prefs: np.ndarray) -> np.ndarray:
    """Descending preference; exact ties resolved by ascending unit index."""
    return np.argsort(-np.asarray(prefs, dtype=np.float64), kind="stable")


def squash(action, a_min: float, a_max: float) -> np.ndarray:
    """a_min + (a_max - a_min) * clip(tanh(a + 1) / 2, 0, 1), applied element-wise."""
    a = np.asarray(action, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("raw action contains non-finite entries")
    unit = np.clip(np.tanh(a + 1.0) / 2.0, 0.0, 1.0)
    return unit * (a_max - a_min) + a_min


def allocate(prefs, budget: BudgetSpec) -> np.ndarray:
    """Start every unit at a_min and raise units to a_max in preference order until the budget is spent."""
    prefs = np.asarray(prefs, dtype=np.float64)
    w = budget.w
    if prefs.shape != w.shape:
        raise ValueError(f"preference vector has length {prefs.size}, budget has {w.size} units")
    rates = np.full_like(w, budget.a_min)
    remaining = budget.target - float(rates @ w)
    for i in preference_order(prefs):
        if remaining <= 0:
            break
        delta = min(remaining, (budget.a_max - rates[i]) * w[i])
        rates[i] += delta / w[i]
        remaining -= delta
    return rates


def _round_half_up(x: np.ndarray, grid: float) -> np.ndarray:
    return np.floor(x / grid + 0.5 + _EPS).astype(np.int64)


def _greedy_correct(n: np.ndarray, order, w, target_units, lo, hi) -> None:
    """Step units in preference order by one grid cell while that shrinks the budget error.

    Moves on to the next unit only when the current one is pinned at a bound.
    """
    for i in order:
        while True:
            err = float(n @ w) - target_units
            step = -1 if err > 0 else 1
            if abs(err) <= _EPS * target_units or not lo <= n[i] + step <= hi:
                break
            if abs(err + step * w[i]) >= abs(err):
                return
            n[i] += step
        if not (n[i] == lo or n[i] == hi):
            return


def _integral_weights(w: np.ndarray) -> np.ndarray | None:
    """Weights divided by their gcd when all are integers, else None."""
    if not np.all(np.abs(w - np.round(w)) < 1e-9):
        return None
    ints = [int(round(x)) for x in w]
    return np.array(ints, dtype=np.int64) // math.gcd(*ints)


def _exact_refine(n: np.ndarray, w: np.ndarray, target_units: float, lo: int, hi: int, max_states: int) -> np.ndarray:
    """Grid policy with the smallest budget error, by dynamic programming over reachable sums.

    Only integral weights are handled (parameter counts always are); the
    incumbent ``n`` is returned unchanged otherwise, or when no reachable sum
    beats it. Cells are reconstructed unit by unit, preferring the value
    closest to the incumbent.
    """
    red = _integral_weights(w)
    if red is None:
        return n
    scale = float(w[0]) / float(red[0])
    size = int(hi * red.sum()) + 1
    if size > max_states:
        return n
    cells = np.arange(lo, hi + 1)
    reach = [np.zeros(size, dtype=bool)]
    reach[0][0] = True
    for wi in red:
        prev = reach[-1]
        cur = np.zeros(size, dtype=bool)
        for c in cells:
            shift = int(c * wi)
            cur[shift:] |= prev[: size - shift]
        reach.append(cur)
    sums = np.flatnonzero(reach[-1])
    goal = target_units / scale
    errs = np.abs(sums - goal)
    current = abs(float(n @ red) - goal)
    k = int(np.argmin(errs))  # first minimum: the smaller sum on exact ties
    if errs[k] >= current - _EPS * max(goal, 1.0):
        return n
    out = n.copy()
    s = int(sums[k])
    for i in range(len(red) - 1, -1, -1):
        options = [int(c) for c in cells if 0 <= s - int(c) * red[i] and reach[i][s - int(c) * red[i]]]
        pick = min(options, key=lambda c: (abs(c - int(n[i])), c))
        out[i] = pick
        s -= pick * int(red[i])
    return out


def discretize_and_correct(
    rates_cont, budget: BudgetSpec, prefs, max_refine_states: int = 1_000_000
) -> RetentionPolicy:
    """Snap rates to the grid (half-up) and restore the global budget.

    First the highest-preference unit is stepped toward balance, cascading to
    the next unit when it hits a bound. Any residual that a different
    combination of grid steps can remove is then eliminated by an exact
    search over reachable budget sums.
    """
    rates_cont = np.asarray(rates_cont, dtype=np.float64)
    w = budget.w
    g = budget.grid
    lo, hi = budget.grid_range()
    target_units = budget.target / g
    n = np.clip(_round_half_up(rates_cont, g), lo, hi)
    _greedy_correct(n, preference_order(prefs), w, target_units, lo, hi)
    if abs(float(n @ w) - target_units) > _EPS * target_units:
        n = _exact_refine(n, w, target_units, lo, hi, max_refine_states)
    rates = np.round(n * g, 12)
    err = abs(float(rates @ w) - budget.target)
    if err > g * float(w.max()) + _EPS * budget.target:
        raise AssertionError(f"budget correction failed: error {err} exceeds {g * w.max()}")
    return RetentionPolicy(
        rates=tuple(float(r) for r in rates),
        preservation=budget.preservation,
        a_min=budget.a_min,
        a_max=budget.a_max,
        grid=g,
        achieved=float(rates @ w) / float(w.sum()),
    )


def action_hash(action) -> str:
    return hashlib.sha256(np.asarray(action, dtype="<f8").tobytes()).hexdigest()[:16]


def map_action(action, budget: BudgetSpec, sigma: float | None = None) -> RetentionPolicy:
    """Raw unconstrained scores -> budget-compliant grid policy."""
    prefs = squash(action, budget.a_min, budget.a_max)
    policy = discretize_and_correct(allocate(prefs, budget), budget, prefs)
    return RetentionPolicy(**{**policy.__dict__, "action_hash": action_hash(action), "sigma": sigma})


def policy_violations(rates: Sequence[float], budget: BudgetSpec) -> list[str]:
    """Independent re-check of the policy invariants; empty list means valid."""
    r = np.asarray(rates, dtype=np.float64)
    w = budget.w
    problems = []
    if r.shape != w.shape:
        return [f"policy has {r.size} rates for {w.size} units"]
    if np.any(r < budget.a_min - _EPS) or np.any(r > budget.a_max + _EPS):
        problems.append("rate outside bounds")
    cells = r / budget.grid
    if np.any(np.abs(cells - np.round(cells)) * budget.grid > _EPS):
        problems.append("rate off the precision grid")
    if abs(float(r @ w) - budget.target) > budget.grid * float(w.max()) + _EPS * budget.target:
        problems.append("global budget violated")
    return problems
