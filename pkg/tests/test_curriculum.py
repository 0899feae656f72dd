import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffprune.agent import Agent
from ffprune.curriculum import ScheduleConfig, alpha, eval_samples, target_sparsity, warm_start

REFERENCE = ScheduleConfig(s_final=0.3, alpha_start=0.3, k=0.01, t0=500, n_max=32, total_steps=1500)


def test_worked_alpha_values():
    assert alpha(500, REFERENCE) == pytest.approx(0.65, abs=1e-12)
    assert alpha(0, REFERENCE) == pytest.approx(0.3 + 0.7 / (1 + math.exp(5)), abs=1e-12)
    assert alpha(0, REFERENCE) == pytest.approx(0.30468, abs=1e-5)
    assert alpha(1500, REFERENCE) == pytest.approx(0.99997, abs=1e-5)


def test_sparsity_and_sample_examples():
    assert target_sparsity(500, REFERENCE) == pytest.approx(0.195)
    assert abs(target_sparsity(500 + 10 / 0.01, REFERENCE) - 0.3) <= 1e-4
    assert eval_samples(500, REFERENCE) == 21
    assert eval_samples(10**6, REFERENCE) == 32
    one = ScheduleConfig(n_max=1)
    assert all(eval_samples(t, one) == 1 for t in (0, 500, 5000))
    zero = ScheduleConfig(s_final=0.0)
    assert all(target_sparsity(t, zero) == 0.0 for t in (0, 100, 2000))


def test_flipped_exponent_decreases():
    flipped = ScheduleConfig(decreasing=True)
    assert alpha(0, flipped) > 0.99
    assert alpha(2000, flipped) < alpha(0, flipped)


def test_step_must_be_non_negative():
    with pytest.raises(ValueError):
        alpha(-1, REFERENCE)


def test_config_validation_and_warning(caplog):
    for bad in (dict(alpha_start=0.0), dict(k=0.0), dict(t0=-1), dict(s_final=1.0), dict(n_max=0)):
        with pytest.raises(ValueError):
            ScheduleConfig(**bad)
    with caplog.at_level("WARNING"):
        ScheduleConfig(t0=500, total_steps=400)
    assert "midpoint" in caplog.text


configs = st.builds(
    ScheduleConfig,
    s_final=st.floats(0.0, 0.9),
    alpha_start=st.floats(0.01, 0.99),
    k=st.floats(1e-3, 0.1),
    t0=st.floats(0.0, 2000.0),
    n_max=st.integers(1, 64),
    total_steps=st.just(10**4),
)


@settings(max_examples=30, deadline=None)
@given(cfg=configs)
def test_schedule_monotone_and_coupled(cfg):
    prev_a, prev_s, prev_n = -1.0, -1.0, 0
    for t in range(0, 10**4, 7):
        a = alpha(t, cfg)
        s = target_sparsity(t, cfg)
        n = eval_samples(t, cfg)
        assert a >= prev_a
        assert s >= prev_s and n >= prev_n and n >= 1
        if cfg.s_final > 0:
            assert s / cfg.s_final == pytest.approx(a, rel=1e-12)
        assert abs(n - cfg.n_max * a) <= 0.5 + 1e-9 or n == 1
        prev_a, prev_s, prev_n = a, s, n
    a0 = alpha(0, cfg)
    assert a0 > cfg.alpha_start or a0 - cfg.alpha_start < 1e-15
    assert a0 - cfg.alpha_start <= (1 - cfg.alpha_start) / (1 + math.exp(cfg.k * cfg.t0)) + 1e-15


def test_alpha_strictly_increasing_in_representable_range():
    ts = range(0, 1600)
    values = [alpha(t, REFERENCE) for t in ts]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_warm_start_copies_weights_and_resets_optimizer(tmp_path):
    source = Agent(8, seed=0)
    source.updates = 7
    source.save(tmp_path / "src.ckpt")
    agent = warm_start(tmp_path / "src.ckpt", expected_units=8)
    assert agent.updates == 0
    assert len(agent.opt.state) == 0
    agent.updates = 7
    assert agent.state_bytes() == source.state_bytes()
    # immediate save, from bytes and from an in-memory agent
    assert warm_start(source.state_bytes(), 8).net.state_dict().keys() == source.net.state_dict().keys()
    again = warm_start(source, 8)
    for a, b in zip(again.net.parameters(), source.net.parameters()):
        assert a.dtype == b.dtype and bool((a == b).all())


def test_warm_start_rejects_mismatched_units():
    with pytest.raises(ValueError, match="6 units.*8"):
        warm_start(Agent(6, seed=0), expected_units=8)
