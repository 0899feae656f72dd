"""Independent reference computations used as test oracles."""

import itertools
import math

import numpy as np


def brute_force_min_budget_error(weights, preservation, a_min, a_max, grid):
    """Smallest |sum(r_i w_i) - P sum(w)| over every grid policy inside the bounds."""
    lo = math.ceil(a_min / grid - 1e-9)
    hi = math.floor(a_max / grid + 1e-9)
    target = preservation * sum(weights)
    best = math.inf
    for cells in itertools.product(range(lo, hi + 1), repeat=len(weights)):
        err = abs(sum(c * grid * w for c, w in zip(cells, weights)) - target)
        best = min(best, err)
    return best


def normal_equation_ridge(x_r, x_p, lam):
    """Explicit Gram matrix plus a general dense solve."""
    gram = x_r.T @ x_r + lam * np.eye(x_r.shape[1])
    return np.linalg.solve(gram, x_r.T @ x_p)


def greedy_shape_ok(prefs, rates, a_min, a_max, tol=1e-9):
    """Rates sorted by descending preference form (a_max)^j (partial)^{0|1} (a_min)^k."""
    order = np.argsort(-np.asarray(prefs), kind="stable")
    seq = np.asarray(rates)[order]
    state = 0  # 0: in a_max run, 1: seen partial, 2: in a_min run
    for r in seq:
        at_max = abs(r - a_max) <= tol
        at_min = abs(r - a_min) <= tol
        if state == 0 and at_max:
            continue
        if at_min:
            state = 2
            continue
        if state == 0:  # first partial
            state = 1
            continue
        return False
    return True
