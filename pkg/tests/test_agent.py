import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ffprune.agent import (
    Agent,
    Batch,
    PPOConfig,
    advantages,
    clipped_surrogate,
    compute_reward,
    gaussian_logp,
    ppo_loss,
    ppo_update,
    sample_action,
)


def _records(agent, n=8, seed=0, rewards=None):
    rng = torch.Generator().manual_seed(seed)
    gen = np.random.default_rng(seed)
    out = []
    for i in range(n):
        sigma = float(gen.uniform(0.0, 0.5))
        action, logp, value = sample_action(agent, sigma, rng)
        reward = float(gen.uniform(0.2, 1.2)) if rewards is None else rewards[i]
        out.append(SimpleNamespace(sigma=sigma, action=action, logp=logp, value=value, reward=reward))
    return out


def test_surrogate_examples():
    cases = [(1.5, 1.0, 1.2), (0.5, -1.0, -0.8)]
    for ratio, adv, expected in cases:
        got = clipped_surrogate(torch.tensor(ratio), torch.tensor(adv), 0.2)
        assert float(got) == pytest.approx(expected)


def test_reward_examples():
    assert compute_reward(12.5, 12.5) == 1.0
    assert compute_reward(12.5, 25.0) == 0.5
    assert compute_reward(12.5, math.inf) == 0.0
    assert compute_reward(12.5, math.nan) == 0.0
    with pytest.raises(ValueError):
        compute_reward(math.inf, 10.0)
    with pytest.raises(ValueError):
        compute_reward(0.5, 10.0)


def test_advantage_examples():
    assert advantages([1.0], [1.0])[0] == 0.0
    assert np.all(advantages([0.7] * 6, [0.2] * 6) == 0.0)
    rng = np.random.default_rng(3)
    adv = advantages(rng.normal(size=16), rng.normal(size=16))
    assert abs(adv.mean()) <= 1e-9
    assert abs(adv.std() - 1.0) <= 1e-6
    # below four records no normalization
    np.testing.assert_array_equal(advantages([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]), [1.0, 2.0, 3.0])


def test_sampling_shape_determinism_and_concentration():
    agent = Agent(5, seed=1)
    for sigma in (0.0, 0.3, 0.99):
        a1, lp1, _ = sample_action(agent, sigma, torch.Generator().manual_seed(7))
        a2, lp2, _ = sample_action(agent, sigma, torch.Generator().manual_seed(7))
        assert a1.shape == (5,)
        np.testing.assert_array_equal(a1, a2)
        assert lp1 == lp2 and math.isfinite(lp1)
    with torch.no_grad():
        agent.net.log_std.fill_(-50.0)
    std = math.exp(-5.0)
    action, _, _ = sample_action(agent, 0.2, torch.Generator().manual_seed(0))
    assert np.all(np.abs(action - agent.mean_action(0.2)) <= 5 * std)
    with pytest.raises(ValueError):
        sample_action(agent, 1.0, torch.Generator())


def test_non_finite_policy_output_is_reported():
    agent = Agent(3, seed=0)
    with torch.no_grad():
        agent.net.mean[-1].bias.fill_(math.nan)
    with pytest.raises(FloatingPointError, match="non-finite"):
        sample_action(agent, 0.1, torch.Generator())


def test_ratio_is_one_at_sampling_time():
    agent = Agent(4, seed=2)
    batch = Batch.from_records(_records(agent))
    _, stats = ppo_loss(agent.net, batch, agent.cfg)
    mean, _ = agent.net(batch.sigma)
    logp = gaussian_logp(batch.action, mean, agent.log_std())
    np.testing.assert_allclose(torch.exp(logp - batch.logp_old).detach().numpy(), 1.0, rtol=0, atol=1e-12)
    assert stats["mean_ratio"] == pytest.approx(1.0, abs=1e-12)


def test_zero_advantage_fixed_point():
    cfg = PPOConfig(entropy_coef=0.0, normalize_advantages=False)
    agent = Agent(3, cfg, seed=4)
    records = _records(agent, n=6)
    for r in records:
        r.reward = r.value  # A = R - V = 0
    before = [p.detach().clone() for p in agent.net.mean.parameters()]
    log_std_before = agent.net.log_std.detach().clone()
    ppo_update(agent, records)
    for b, p in zip(before, agent.net.mean.parameters()):
        assert torch.equal(b, p.detach())
    assert torch.equal(log_std_before, agent.net.log_std.detach())


def test_update_changes_parameters_and_counts():
    agent = Agent(3, seed=5)
    before = agent.state_bytes()
    ppo_update(agent, _records(agent))
    assert agent.updates == 1
    assert agent.state_bytes() != before


def test_ppo_gradient_matches_finite_differences():
    cfg = PPOConfig(hidden=(8, 8), max_grad_norm=0.0)
    agent = Agent(3, cfg, seed=11)
    records = _records(agent, n=8, seed=11)
    batch = Batch.from_records(records)
    with torch.no_grad():  # move away from r = 1 while staying inside the clip band
        for p in agent.net.parameters():
            p.add_(1e-3 * torch.randn_like(p, generator=torch.Generator().manual_seed(1)).to(p.dtype))
    params = list(agent.net.parameters())
    loss, _ = ppo_loss(agent.net, batch, cfg)
    grads = torch.autograd.grad(loss, params)
    flat = [(pi, idx) for pi, p in enumerate(params) for idx in range(p.numel())]
    rng = np.random.default_rng(0)
    chosen = [flat[i] for i in rng.choice(len(flat), 32, replace=False)]
    eps = 1e-6
    for pi, idx in chosen:
        p = params[pi].data.view(-1)
        orig = p[idx].item()
        p[idx] = orig + eps
        up = ppo_loss(agent.net, batch, cfg)[0].item()
        p[idx] = orig - eps
        down = ppo_loss(agent.net, batch, cfg)[0].item()
        p[idx] = orig
        fd = (up - down) / (2 * eps)
        an = grads[pi].view(-1)[idx].item()
        assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd)) + 1e-10, (pi, idx, an, fd)


@settings(max_examples=20, deadline=None)
@given(scale=st.floats(1.0, 1000.0), seed=st.integers(0, 1000))
def test_reward_scale_invariance(scale, seed):
    rng = np.random.default_rng(seed)
    dense = float(rng.uniform(5, 50))
    pruned = rng.uniform(dense, 4 * dense, size=8)
    r1 = [compute_reward(dense, p) for p in pruned]
    r2 = [compute_reward(dense * scale, p * scale) for p in pruned]
    np.testing.assert_allclose(r1, r2, rtol=1e-12)
    values = rng.normal(size=8)
    np.testing.assert_allclose(advantages(r1, values), advantages(r2, values), rtol=1e-9, atol=1e-12)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    agent = Agent(8, seed=3)
    ppo_update(agent, _records(agent))
    agent.save(tmp_path / "a.ckpt")
    back = Agent.load(tmp_path / "a.ckpt")
    assert back.state_bytes() == agent.state_bytes()
    for a, b in zip(agent.net.state_dict().values(), back.net.state_dict().values()):
        assert torch.equal(a, b)


def test_config_validation():
    with pytest.raises(ValueError):
        PPOConfig(clip=1.0)
    with pytest.raises(ValueError):
        PPOConfig(entropy_coef=-1.0)
