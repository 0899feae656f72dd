"""Stage-1 search: curriculum -> sample -> map -> prune -> evaluate -> reward -> PPO.

Also hosts the uniform baseline and the four-arm ablation.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import curriculum
from .agent import Agent, PPOConfig, compute_reward, ppo_update, sample_action
from .budget import BudgetSpec, RetentionPolicy, discretize_and_correct, map_action, policy_violations
from .calibrate import DEFAULT_LAMBDA, MAX_ROWS, calibrate_model
from .curriculum import ScheduleConfig
from .lm import EvalSet, TinyLM, all_sites, collect_activations, perplexity, ppl_from_nll, sequence_nll
from .prune import PrunableUnit, PruneMask, apply_policy, build_mask, unit_inventory, unit_weights, wanda_scores
from .serialization import atomic_write_text

log = logging.getLogger(__name__)


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-component sub-seed."""
    entropy = [seed] + [ord(c) for c in tag]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint32)[0])


@dataclass
class EpisodeRecord:
    step: int
    sigma: float
    alpha: float
    action: list[float]
    rates: list[float]
    n_eval: int
    ppl: float
    ppl_dense: float
    reward: float
    logp: float
    value: float
    candidate_ppl: float | None = None  # full-fidelity PPL of the action re-mapped at the final sparsity
    candidate_reward: float | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("ppl", "candidate_ppl"):
            if d[key] is not None and not math.isfinite(d[key]):
                d[key] = None  # collapsed model
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "EpisodeRecord":
        obj = dict(obj)
        if obj["ppl"] is None:
            obj["ppl"] = math.inf
        return cls(**obj)


@dataclass
class BudgetBounds:
    a_min: float = 0.1
    a_max: float = 1.0
    grid: float = 0.01


class SearchContext:
    """Everything a search run reads: the dense model, its units and scores, configs, data."""

    def __init__(
        self,
        dense: TinyLM,
        eval_set: EvalSet,
        schedule: ScheduleConfig,
        ppo: PPOConfig | None = None,
        bounds: BudgetBounds | None = None,
        calib_set: EvalSet | None = None,
        seed: int = 0,
        lam: float = DEFAULT_LAMBDA,
        score_set: EvalSet | None = None,
        max_rows: int = MAX_ROWS,
    ):
        if len(eval_set) < schedule.n_max:
            raise ValueError(f"eval set has {len(eval_set)} windows; schedule needs n_max={schedule.n_max}")
        self.dense = dense
        self.eval_set = eval_set
        self.calib_set = calib_set
        self.schedule = schedule
        self.ppo = ppo or PPOConfig()
        self.bounds = bounds or BudgetBounds()
        self.seed = seed
        self.lam = lam
        self.max_rows = max_rows
        self.units: list[PrunableUnit] = unit_inventory(dense.config)
        self.weights = unit_weights(self.units)
        # Scores are computed once, from dense activations.
        score_src = score_set or calib_set or eval_set.slice(0, schedule.n_max)
        self.scores = wanda_scores(dense, collect_activations(dense, score_src, all_sites(dense.config.n_layers)))
        self._dense_nll = sequence_nll(dense, eval_set, 0, schedule.n_max)
        self.ppl_dense = {n: ppl_from_nll(self._dense_nll[:n], eval_set.seq_len) for n in range(1, schedule.n_max + 1)}
        if not math.isfinite(self.ppl_dense[schedule.n_max]):
            raise ValueError("dense model perplexity is not finite; cannot start a search")
        self._nll_cache: dict[tuple, np.ndarray] = {}
        self.evaluations = 0
        self.samples_evaluated = 0

    def budget(self, sparsity: float) -> BudgetSpec:
        b = self.bounds
        return BudgetSpec(1.0 - sparsity, tuple(self.weights), b.a_min, b.a_max, b.grid)

    def evaluate(self, rates: Sequence[float], n: int) -> float:
        """Perplexity of the pruned model on the first ``n`` eval windows (memoized per policy)."""
        key = tuple(float(r) for r in rates)
        have = self._nll_cache.get(key, np.zeros(0))
        if len(have) < n:
            pruned = apply_policy(self.dense, key, self.scores)
            extra = sequence_nll(pruned, self.eval_set, len(have), n)
            have = np.concatenate([have, extra])
            self._nll_cache[key] = have
            self.evaluations += 1
            self.samples_evaluated += len(extra)
        return ppl_from_nll(have[:n], self.eval_set.seq_len)


@dataclass
class SearchResult:
    best_policy: RetentionPolicy
    best_ppl: float
    best_source: str  # "episode:<t>" or "greedy"
    episodes: list[EpisodeRecord]
    agent: Agent
    updates: int
    wall_seconds: float
    evaluations: int
    samples_evaluated: int
    episode_samples: int = field(default=0)

    def policy_json(self, mask: PruneMask | None = None) -> dict:
        ppl = self.best_ppl if math.isfinite(self.best_ppl) else None
        out = {"policy": self.best_policy.to_json(), "ppl": ppl, "source": self.best_source}
        if mask is not None:
            out["mask"] = mask.to_json()
        return out


def run_search(ctx: SearchContext, total_steps: int, agent: Agent | None = None) -> SearchResult:
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    started = time.perf_counter()
    sched = ctx.schedule
    n_max = sched.n_max
    agent = agent or Agent(len(ctx.units), ctx.ppo, seed=derive_seed(ctx.seed, "agent"))
    if agent.n_units != len(ctx.units):
        raise ValueError(f"agent has {agent.n_units} units, model has {len(ctx.units)}")
    rng = torch.Generator().manual_seed(derive_seed(ctx.seed, "sample"))
    final_budget = ctx.budget(sched.s_final)
    ppl_dense_full = ctx.ppl_dense[n_max]

    records: list[EpisodeRecord] = []
    buffer: list[EpisodeRecord] = []
    best: tuple[float, RetentionPolicy, float, str] | None = None  # (reward, policy, ppl, source)

    def consider(policy: RetentionPolicy, source: str) -> tuple[float, float]:
        nonlocal best
        ppl = ctx.evaluate(policy.rates, n_max)
        reward = compute_reward(ppl_dense_full, ppl)
        if best is None or reward > best[0]:
            best = (reward, policy, ppl, source)
        return ppl, reward

    for t in range(total_steps):
        a = curriculum.alpha(t, sched)
        sigma = sched.s_final * a
        n = curriculum.eval_samples(t, sched)
        action, logp, value = sample_action(agent, sigma, rng)
        budget = ctx.budget(sigma)
        policy = map_action(action, budget, sigma)
        problems = policy_violations(policy.rates, budget)
        if problems:
            raise AssertionError(f"episode {t}: mapped policy invalid ({'; '.join(problems)})")
        ppl = ctx.evaluate(policy.rates, n)
        reward = compute_reward(ctx.ppl_dense[n], ppl)
        rec = EpisodeRecord(
            step=t,
            sigma=sigma,
            alpha=a,
            action=[float(x) for x in action],
            rates=list(policy.rates),
            n_eval=n,
            ppl=ppl,
            ppl_dense=ctx.ppl_dense[n],
            reward=reward,
            logp=logp,
            value=value,
        )
        if abs(sigma - sched.s_final) <= ctx.bounds.grid + 1e-12:
            cand = map_action(action, final_budget, sched.s_final)
            rec.candidate_ppl, rec.candidate_reward = consider(cand, f"episode:{t}")
        records.append(rec)
        buffer.append(rec)
        if len(buffer) == agent.cfg.batch_size:
            ppo_update(agent, buffer)
            buffer = []

    greedy = map_action(agent.mean_action(sched.s_final), final_budget, sched.s_final)
    consider(greedy, "greedy")
    assert best is not None
    _, best_policy, best_ppl, source = best
    return SearchResult(
        best_policy=best_policy,
        best_ppl=best_ppl,
        best_source=source,
        episodes=records,
        agent=agent,
        updates=agent.updates,
        wall_seconds=time.perf_counter() - started,
        evaluations=ctx.evaluations,
        samples_evaluated=ctx.samples_evaluated,
        episode_samples=sum(r.n_eval for r in records),
    )


def uniform_policy(budget: BudgetSpec) -> RetentionPolicy:
    """Every unit at the preservation ratio, snapped to the grid with uniform preferences."""
    n = len(budget.weights)
    return discretize_and_correct(np.full(n, budget.preservation), budget, np.zeros(n))


def uniform_baseline(ctx: SearchContext, s_final: float) -> RetentionPolicy:
    return uniform_policy(ctx.budget(s_final))


@dataclass
class AblationRow:
    arm: str
    ppl: float
    params_kept: int
    seed: int


def run_ablation(
    ctx: SearchContext,
    result: SearchResult | None = None,
    total_steps: int | None = None,
    policy: RetentionPolicy | None = None,
) -> list[AblationRow]:
    """Dense / Uniform / Uniform+Calib / Search / Search+Calib at the final sparsity, full fidelity.

    The searched policy is ``policy`` if given, else the best policy of
    ``result``, else that of a fresh search of ``total_steps`` episodes.
    """
    if ctx.calib_set is None:
        raise ValueError("ablation needs a calibration set")
    if policy is None:
        if result is None:
            result = run_search(ctx, total_steps or ctx.schedule.total_steps)
        policy = result.best_policy
    n_max = ctx.schedule.n_max
    s_final = ctx.schedule.s_final
    total_params = int(ctx.weights.sum())
    rows = [AblationRow("dense", ctx.ppl_dense[n_max], total_params, ctx.seed)]

    def arm(name: str, policy, calibrate: bool):
        pruned = apply_policy(ctx.dense, policy, ctx.scores)
        if calibrate:
            pruned, _ = calibrate_model(
                pruned, ctx.dense, ctx.calib_set, ctx.lam, ctx.max_rows, seed=derive_seed(ctx.seed, "calib")
            )
        rows.append(AblationRow(name, perplexity(pruned, ctx.eval_set, n_max), pruned.mask.kept_params(ctx.units), ctx.seed))

    uniform = uniform_baseline(ctx, s_final)
    arm("uniform", uniform, calibrate=False)
    arm("uniform+calib", uniform, calibrate=True)
    arm("search", policy, calibrate=False)
    arm("search+calib", policy, calibrate=True)
    return rows


# -- persistence ---------------------------------------------------------------------------


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def write_episodes(path, records: Sequence[EpisodeRecord]) -> None:
    atomic_write_text(path, "".join(_json_line(r.to_json()) + "\n" for r in records))


def read_episodes(path) -> list[EpisodeRecord]:
    with open(path, encoding="utf-8") as fh:
        return [EpisodeRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def write_result(out_dir, result: SearchResult, ctx: SearchContext) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_episodes(out / "episodes.jsonl", result.episodes)
    mask = build_mask(result.best_policy.rates, ctx.scores, ctx.units)
    atomic_write_text(out / "policy.json", json.dumps(result.policy_json(mask), indent=2, sort_keys=True) + "\n")
    result.agent.save(out / "agent.ckpt")
    summary = {
        "schedule": ctx.schedule.to_dict(),
        "ppo": ctx.ppo.to_dict(),
        "bounds": asdict(ctx.bounds),
        "seed": ctx.seed,
        "episodes": len(result.episodes),
        "updates": result.updates,
        "episode_samples": result.episode_samples,
        "max_episode_samples": len(result.episodes) * ctx.schedule.n_max,
        "evaluations": result.evaluations,
        "samples_evaluated": result.samples_evaluated,
        "wall_seconds": result.wall_seconds,
        "ppl_dense": ctx.ppl_dense[ctx.schedule.n_max],
        "best_ppl": result.best_ppl if math.isfinite(result.best_ppl) else None,
        "best_source": result.best_source,
    }
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")


def write_ablation_csv(path, rows: Sequence[AblationRow]) -> None:
    lines = ["arm,ppl,params_kept,seed"]
    lines += [f"{r.arm},{r.ppl!r},{r.params_kept},{r.seed}" for r in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")

