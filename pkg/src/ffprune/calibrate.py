"""Retraining-free recovery: reconstruct pruned channels from retained ones by ridge regression.

For a consumer layer ``y = x @ W`` (channels as rows of ``W``), pruning the
channels ``P`` drops ``x_P @ W_P``. With ``x_P ~= x_R @ S`` the loss is folded
back by ``W_R <- W_R + S @ W_P``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import torch

from .lm import EvalSet, Site, TinyLM, collect_activations
from .prune import ATTENTION, PrunedModel, unit_inventory

DEFAULT_LAMBDA = 0.01
MAX_ROWS = 8192


class CalibrationError(ValueError):
    pass


@dataclass
class CalibrationProblem:
    x_retained: np.ndarray  # (rows, |R|)
    x_pruned: np.ndarray  # (rows, |P|)
    lam: float = DEFAULT_LAMBDA
    site: str = ""

    def __post_init__(self):
        self.x_retained = np.asarray(self.x_retained, dtype=np.float64)
        self.x_pruned = np.asarray(self.x_pruned, dtype=np.float64)
        if self.x_retained.ndim != 2 or self.x_pruned.ndim != 2:
            raise CalibrationError("activation matrices must be 2-D")
        if self.x_retained.shape[0] != self.x_pruned.shape[0]:
            raise CalibrationError(
                f"row counts differ: retained {self.x_retained.shape[0]} vs pruned {self.x_pruned.shape[0]}"
            )
        if self.x_retained.shape[0] < 1 or self.x_retained.shape[1] < 1:
            raise CalibrationError("need at least one row and one retained channel")
        if self.lam < 0:
            raise CalibrationError(f"ridge coefficient must be >= 0, got {self.lam}")


def objective(problem: CalibrationProblem, coef: np.ndarray) -> float:
    resid = problem.x_pruned - problem.x_retained @ coef
    return float(np.sum(resid * resid) + problem.lam * np.sum(coef * coef))


def solve_ridge(problem: CalibrationProblem) -> np.ndarray:
    """S* = (X_R^T X_R + lam I)^-1 X_R^T X_P via a Cholesky solve; returns shape (|R|, |P|)."""
    xr, xp = problem.x_retained, problem.x_pruned
    gram = xr.T @ xr
    gram[np.diag_indices_from(gram)] += problem.lam
    rhs = xr.T @ xp
    if problem.lam == 0:
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > 1e12:
            raise CalibrationError(
                f"site {problem.site or '?'}: X_R^T X_R is singular or ill-conditioned "
                f"(condition number {cond:.3e}); use lam > 0"
            )
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise CalibrationError(f"site {problem.site or '?'}: Cholesky factorization failed ({exc})") from exc
    return scipy.linalg.cho_solve(factor, rhs, check_finite=False)


def update_weights(w_retained: np.ndarray, w_pruned: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """W_R + S @ W_P, with consumer weights stored channels-as-rows."""
    w_retained = np.asarray(w_retained, dtype=np.float64)
    w_pruned = np.asarray(w_pruned, dtype=np.float64)
    coef = np.asarray(coef, dtype=np.float64)
    if coef.shape != (w_retained.shape[0], w_pruned.shape[0]) or w_retained.shape[1:] != w_pruned.shape[1:]:
        raise CalibrationError(
            f"shape mismatch: W_R {w_retained.shape}, W_P {w_pruned.shape}, S {coef.shape}"
        )
    return w_retained + coef @ w_pruned


def _channels(unit, kept: list[int], head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Retained / pruned input-channel indices of the unit's consumer projection."""
    if unit.kind == ATTENTION:
        kept_ch = [h * head_dim + j for h in kept for j in range(head_dim)]
        total = unit.element_count * head_dim
    else:
        kept_ch = list(kept)
        total = unit.element_count
    retained = np.array(kept_ch, dtype=np.int64)
    pruned = np.setdiff1d(np.arange(total), retained)
    return retained, pruned


def calibrate_model(
    pruned: PrunedModel,
    dense: TinyLM,
    calib_set: EvalSet,
    lam: float = DEFAULT_LAMBDA,
    max_rows: int = MAX_ROWS,
    seed: int = 0,
) -> tuple[PrunedModel, list[dict]]:
    """Fold ridge reconstructions of every pruned head/channel into its consumer projection.

    Activations come from the dense model. Returns the calibrated copy and a
    per-site report.
    """
    config = dense.config
    units = unit_inventory(config)
    affected = [u for u, kept in zip(units, pruned.mask.kept) if len(kept) < u.element_count]
    out = PrunedModel(copy.deepcopy(pruned.model), pruned.mask, list(pruned.rates))
    if not affected:
        return out, []
    sites = [Site(u.layer, "attn_heads" if u.kind == ATTENTION else "ffn_hidden") for u in affected]
    captures = collect_activations(dense, calib_set, sites)
    rng = np.random.default_rng(seed)
    report = []
    for unit, site in zip(affected, sites):
        acts = captures[site].values
        if acts.shape[0] > max_rows:
            acts = acts[np.sort(rng.choice(acts.shape[0], max_rows, replace=False))]
        retained, removed = _channels(unit, pruned.mask.kept[unit.unit_index], config.head_dim)
        problem = CalibrationProblem(acts[:, retained], acts[:, removed], lam, str(site))
        coef = solve_ridge(problem)
        src = dense.blocks[unit.layer]
        dst = out.model.blocks[unit.layer]
        dense_w = (src.attn.o if unit.kind == ATTENTION else src.ffn.down).weight.detach().to(torch.float64)
        target = dst.attn.o if unit.kind == ATTENTION else dst.ffn.down
        w_rows = dense_w.T.numpy()  # (channels, d_model)
        new_rows = update_weights(w_rows[retained], w_rows[removed], coef)
        with torch.no_grad():
            target.weight.copy_(torch.from_numpy(new_rows.T.copy()).to(target.weight.dtype))
        resid_after = problem.x_pruned - problem.x_retained @ coef
        report.append(
            {
                "site": str(site),
                "unit_index": unit.unit_index,
                "retained": int(retained.size),
                "pruned": int(removed.size),
                "rows": int(acts.shape[0]),
                "residual_before": float(np.linalg.norm(problem.x_pruned)),
                "residual_after": float(np.linalg.norm(resid_after)),
                "lambda": lam,
            }
        )
    return out, report
