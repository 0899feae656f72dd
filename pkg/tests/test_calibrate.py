import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ffprune.calibrate import CalibrationError, CalibrationProblem, calibrate_model, objective, solve_ridge, update_weights
from ffprune.lm import ModelConfig, all_sites, collect_activations
from ffprune.prune import PruneMask, PrunedModel, apply_policy, materialize, unit_inventory, wanda_scores

from conftest import TINY, random_evalset, random_model, redundant_model
from oracles import normal_equation_ridge


def _problem(seed, rows=16, r=8, p=4, lam=0.01):
    rng = np.random.default_rng(seed)
    return CalibrationProblem(rng.normal(size=(rows, r)), rng.normal(size=(rows, p)), lam)


def test_scalar_example():
    coef = solve_ridge(CalibrationProblem([[2.0], [0.0]], [[4.0], [0.0]], 0.01))
    assert coef.shape == (1, 1)
    assert coef[0, 0] == pytest.approx(8 / 4.01, rel=1e-12)
    assert coef[0, 0] == pytest.approx(1.99501, abs=1e-5)


def test_identical_column_gives_indicator():
    rng = np.random.default_rng(0)
    xr = rng.normal(size=(20, 5))
    coef = solve_ridge(CalibrationProblem(xr, xr[:, [3]], 0.0))
    np.testing.assert_allclose(coef[:, 0], np.eye(5)[3], atol=1e-10)


def test_zero_targets_give_zero_solution():
    rng = np.random.default_rng(1)
    for lam in (1e-4, 1.0):
        coef = solve_ridge(CalibrationProblem(rng.normal(size=(10, 4)), np.zeros((10, 3)), lam))
        assert np.all(coef == 0)


def test_rank_deficient_without_ridge_is_rejected():
    xr = np.ones((6, 3))
    with pytest.raises(CalibrationError, match="condition"):
        solve_ridge(CalibrationProblem(xr, np.ones((6, 1)), 0.0))
    assert np.all(np.isfinite(solve_ridge(CalibrationProblem(xr, np.ones((6, 1)), 0.01))))


def test_problem_validation():
    with pytest.raises(CalibrationError, match="row counts"):
        CalibrationProblem(np.ones((4, 2)), np.ones((5, 1)))
    with pytest.raises(CalibrationError):
        CalibrationProblem(np.ones((4, 2)), np.ones((4, 1)), lam=-1.0)
    with pytest.raises(CalibrationError):
        CalibrationProblem(np.ones((4, 0)), np.ones((4, 1)))


def test_matches_normal_equation_oracle():
    for i in range(100):
        lam = (1e-4, 0.01, 1.0)[i % 3]
        prob = _problem(i, lam=lam)
        ref = normal_equation_ridge(prob.x_retained, prob.x_pruned, lam)
        got = solve_ridge(prob)
        assert np.linalg.norm(got - ref) <= 1e-8 * np.linalg.norm(ref)


def test_residual_optimality_probe():
    for seed in range(10):
        prob = _problem(seed, lam=0.01)
        coef = solve_ridge(prob)
        base = objective(prob, coef)
        for idx in np.ndindex(coef.shape):
            for delta in (1e-3, -1e-3):
                moved = coef.copy()
                moved[idx] += delta
                assert objective(prob, moved) >= base


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), lams=st.lists(st.floats(1e-6, 1e3), min_size=2, max_size=2, unique=True))
def test_shrinkage_is_monotone(seed, lams):
    lo, hi = sorted(lams)
    prob = _problem(seed)
    norm = lambda lam: np.linalg.norm(solve_ridge(CalibrationProblem(prob.x_retained, prob.x_pruned, lam)))  # noqa: E731
    assert norm(lo) >= norm(hi) - 1e-12


def test_update_weights_examples():
    assert update_weights([[1.0]], [[3.0]], [[2.0]])[0, 0] == 7.0
    w_r = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(update_weights(w_r, np.ones((1, 3)), np.zeros((2, 1))), w_r)
    with pytest.raises(CalibrationError, match="shape"):
        update_weights(np.ones((2, 3)), np.ones((1, 3)), np.zeros((1, 1)))


def test_update_exactness_on_representable_activations():
    rng = np.random.default_rng(5)
    xr = rng.normal(size=(30, 6))
    coef_true = rng.normal(size=(6, 2))
    xp = xr @ coef_true
    w_r, w_p = rng.normal(size=(6, 4)), rng.normal(size=(2, 4))
    coef = solve_ridge(CalibrationProblem(xr, xp, 0.0))
    np.testing.assert_allclose(xr @ update_weights(w_r, w_p, coef), xr @ w_r + xp @ w_p, atol=1e-6)


def test_exact_redundancy_is_recovered():
    dense, mask = redundant_model()
    pruned = PrunedModel(materialize(dense, mask), mask, [0.5] * 4)
    calib = random_evalset(TINY, n=6, seq_len=8, seed=9)
    tokens = torch.from_numpy(calib.tokens[:, :-1])
    with torch.no_grad():
        ref = dense(tokens)
        before = pruned.model(tokens)
        calibrated, report = calibrate_model(pruned, dense, calib, lam=1e-8)
        after = calibrated.model(tokens)
    assert (before - ref).abs().max() > 1e-2
    assert (after - ref).abs().max() <= 1e-5
    assert len(report) == 4
    assert all(r["residual_after"] <= 1e-3 * r["residual_before"] for r in report)


def test_nothing_pruned_is_bit_identical():
    dense = random_model()
    units = unit_inventory(TINY)
    mask = PruneMask([list(range(u.element_count)) for u in units])
    pruned = PrunedModel(materialize(dense, mask), mask, [1.0] * len(units))
    out, report = calibrate_model(pruned, dense, random_evalset())
    assert report == []
    for a, b in zip(out.model.state_dict().values(), pruned.model.state_dict().values()):
        assert torch.equal(a, b)


def test_huge_ridge_leaves_weights_unchanged_and_shapes_fixed():
    dense = random_model()
    calib = random_evalset(seed=2)
    scores = wanda_scores(dense, collect_activations(dense, calib, all_sites(TINY.n_layers)))
    pruned = apply_policy(dense, [0.5, 0.75, 0.25, 0.5], scores)
    out, report = calibrate_model(pruned, dense, calib, lam=1e14)
    assert out.mask == pruned.mask
    assert out.prunable_param_count() == pruned.prunable_param_count()
    for (name, a), b in zip(out.model.state_dict().items(), pruned.model.state_dict().values()):
        assert a.shape == b.shape
        torch.testing.assert_close(a, b, rtol=0, atol=1e-10, msg=name)
    assert {r["unit_index"] for r in report} == {0, 1, 2, 3}
    moderate, _ = calibrate_model(pruned, dense, calib, lam=0.01)
    assert any(not torch.equal(a, b) for a, b in zip(moderate.model.parameters(), pruned.model.parameters()))


def test_row_cap_subsamples():
    config = ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32, vocab_size=32, max_seq_len=16)
    dense = random_model(config)
    calib = random_evalset(config, n=6, seq_len=8)
    mask = PruneMask([[0], list(range(20))])
    pruned = PrunedModel(materialize(dense, mask), mask, [0.5, 0.625])
    _, report = calibrate_model(pruned, dense, calib, max_rows=10, seed=1)
    assert [r["rows"] for r in report] == [10, 10]
    assert [(r["retained"], r["pruned"]) for r in report] == [(8, 8), (20, 12)]
