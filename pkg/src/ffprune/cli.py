"""Command-line front end: train, search, calibrate, eval, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command validates its inputs before writing anything.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import torch

from .budget import RetentionPolicy
from .calibrate import calibrate_model
from .config import ConfigError, RunConfig, data_splits
from .curriculum import warm_start
from .lm import (
    EvalSet,
    TrainConfig,
    all_sites,
    collect_activations,
    load_corpus,
    load_model,
    perplexity,
    save_model,
    split_corpus,
    train_dense,
)
from .prune import ATTENTION, PruneMask, PrunedModel, apply_policy, materialize, unit_inventory, wanda_scores
from .search import (
    SearchContext,
    derive_seed,
    read_episodes,
    run_ablation,
    run_search,
    write_ablation_csv,
    write_result,
)
from .serialization import CheckpointError, atomic_write_text

log = logging.getLogger("ffprune")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
RUN_FILE = "run.json"


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _finite_or_none(x: float):
    return x if math.isfinite(x) else None


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_config(path) -> RunConfig:
    try:
        return RunConfig.load(path)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _load_dense(path):
    try:
        return load_model(_require_file(path, "checkpoint"))
    except CheckpointError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc


def _splits(cfg: RunConfig):
    try:
        return data_splits(cfg)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _context(cfg: RunConfig, dense, splits) -> SearchContext:
    if dense.config != cfg.model:
        log.info("model section of the config is ignored; using the checkpoint's architecture")
    if cfg.data.eval_seq_len > dense.config.max_seq_len:
        raise UsageError(f"eval_seq_len {cfg.data.eval_seq_len} exceeds the checkpoint's max_seq_len")
    return SearchContext(
        dense,
        splits.eval_set,
        cfg.schedule,
        cfg.ppo,
        cfg.budget,
        calib_set=splits.calib_set,
        seed=cfg.seed,
        lam=cfg.calibration.lam,
        max_rows=cfg.calibration.max_rows,
    )


# -- commands -------------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    hyper = cfg.train
    if args.steps is not None:
        if args.steps < 0:
            raise UsageError(f"--steps must be >= 0, got {args.steps}")
        hyper = TrainConfig(**{**hyper.__dict__, "steps": args.steps})
    splits = _splits(cfg)
    out = Path(args.out)
    history: list = []
    model = train_dense(splits.train, cfg.model, hyper, seed=cfg.seed, history=history)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "dense.ckpt", extra={"seed": cfg.seed, "steps": hyper.steps, "name": cfg.name})
    rows = ["step,loss,lr"] + [f"{s},{loss!r},{lr!r}" for s, loss, lr in history]
    atomic_write_text(out / "training_curve.csv", "\n".join(rows) + "\n")
    ppl = perplexity(model, splits.eval_set, len(splits.eval_set))
    atomic_write_text(out / "metrics.json", _dump({"ppl_holdout": _finite_or_none(ppl), "steps": hyper.steps}))
    print(f"trained {hyper.steps} steps; held-out PPL {ppl:.4f}; checkpoint {out / 'dense.ckpt'}")
    return EXIT_OK


def cmd_search(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.sparsity is not None:
        try:
            cfg.check_sparsity(args.sparsity)
            cfg.schedule = type(cfg.schedule)(**{**cfg.schedule.to_dict(), "s_final": args.sparsity})
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    steps = cfg.schedule.total_steps if args.steps is None else args.steps
    if steps < 1:
        raise UsageError(f"episode count must be >= 1, got {steps}")
    dense, _ = _load_dense(args.dense)
    n_units = len(unit_inventory(dense.config))
    agent = None
    if args.warm_start:
        try:
            agent = warm_start(_require_file(args.warm_start, "warm-start checkpoint"), n_units, cfg.ppo)
        except (ValueError, CheckpointError) as exc:
            raise UsageError(f"cannot warm-start: {exc}") from exc
    splits = _splits(cfg)
    ctx = _context(cfg, dense, splits)
    result = run_search(ctx, steps, agent)
    out = Path(args.out)
    write_result(out, result, ctx)
    run = {
        "config": cfg.to_dict(),
        "dense": str(Path(args.dense).resolve()),
        "steps": steps,
        "warm_start": str(Path(args.warm_start).resolve()) if args.warm_start else None,
    }
    atomic_write_text(out / RUN_FILE, _dump(run))
    print(f"search done: {steps} episodes, best PPL {result.best_ppl:.4f} ({result.best_source}); outputs in {out}")
    return EXIT_OK


def _read_policy(path) -> tuple[RetentionPolicy, PruneMask | None]:
    p = _require_file(path, "policy file")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
        policy = RetentionPolicy.from_json(obj["policy"] if "policy" in obj else obj)
        mask = PruneMask.from_json(obj["mask"]) if "mask" in obj else None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed policy file {p}: {exc}") from exc
    return policy, mask


def cmd_calibrate(args) -> int:
    cfg = _load_config(args.config)
    lam = cfg.calibration.lam if args.lam is None else args.lam
    if lam < 0:
        raise UsageError(f"--lambda must be >= 0, got {lam}")
    dense, _ = _load_dense(args.dense)
    policy, mask = _read_policy(args.policy)
    units = unit_inventory(dense.config)
    if len(policy.rates) != len(units):
        raise UsageError(f"policy has {len(policy.rates)} rates; the model has {len(units)} units")
    splits = _splits(cfg)
    if mask is None:
        scores = wanda_scores(dense, collect_activations(dense, splits.calib_set, all_sites(dense.config.n_layers)))
        pruned = apply_policy(dense, policy, scores)
    else:
        pruned = PrunedModel(materialize(dense, mask), mask, list(policy.rates))
    calibrated, report = calibrate_model(
        pruned, dense, splits.calib_set, lam, cfg.calibration.max_rows, seed=derive_seed(cfg.seed, "calib")
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"mask": pruned.mask.to_json(), "rates": list(policy.rates)}
    save_model(pruned.model, out / "pruned.ckpt", extra=extra)
    save_model(calibrated.model, out / "calibrated.ckpt", extra={**extra, "lambda": lam})
    atomic_write_text(out / "calibration_report.json", _dump({"lambda": lam, "sites": report}))
    print(f"calibrated {len(report)} sites (lambda={lam}); outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.n < 1:
        raise UsageError(f"-n must be >= 1, got {args.n}")
    if not 0.0 <= args.holdout_fraction < 1.0:
        raise UsageError("--holdout-fraction must be in [0, 1)")
    model, _ = _load_dense(args.ckpt)
    corpus = _require_file(args.corpus, "eval corpus")
    seq_len = args.seq_len or model.config.max_seq_len
    if not 1 <= seq_len <= model.config.max_seq_len:
        raise UsageError(f"--seq-len must be in [1, {model.config.max_seq_len}]")
    try:
        tokens = load_corpus(corpus)
    except UnicodeDecodeError as exc:
        raise UsageError(f"eval corpus is not UTF-8 text: {exc}") from exc
    if args.holdout_fraction > 0:
        tokens = split_corpus(tokens, args.holdout_fraction)[1]
    try:
        eval_set = EvalSet.from_tokens(tokens, seq_len, args.n, str(corpus))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ppl = perplexity(model, eval_set, args.n)
    metrics = {"ckpt": str(Path(args.ckpt).resolve()), "n": args.n, "seq_len": seq_len, "ppl": _finite_or_none(ppl)}
    if args.out:
        atomic_write_text(args.out, _dump(metrics))
    print(f"PPL {ppl:.6f}" if math.isfinite(ppl) else "PPL non-finite (collapsed model)")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    episodes_path = run_dir / "episodes.jsonl"
    if not episodes_path.is_file():
        raise UsageError(f"{run_dir} holds no episodes.jsonl; not a completed run")
    episodes = read_episodes(episodes_path)
    policy, _ = _read_policy(run_dir / "policy.json")
    ctx = None
    if not args.no_ablation:
        try:
            run = json.loads(_require_file(run_dir / RUN_FILE, "run record").read_text(encoding="utf-8"))
            cfg = RunConfig.from_dict(run["config"])
        except (json.JSONDecodeError, KeyError, ConfigError) as exc:
            raise UsageError(f"bad run record in {run_dir}: {exc}") from exc
        dense, _ = _load_dense(run["dense"])
        ctx = _context(cfg, dense, _splits(cfg))
    out = Path(args.out) if args.out else run_dir

    rows = ["step,sigma,alpha,n_eval,ppl,reward"]
    for r in episodes:
        rows.append(f"{r.step},{r.sigma!r},{r.alpha!r},{r.n_eval},{r.ppl!r},{r.reward!r}")
    curve = "\n".join(rows) + "\n"

    units = unit_inventory(ctx.dense.config) if ctx else None
    lines = ["unit_index,layer,kind,rate"]
    for i, rate in enumerate(policy.rates):
        if units:
            lines.append(f"{i},{units[i].layer},{'attn' if units[i].kind == ATTENTION else 'ffn'},{rate!r}")
        else:
            lines.append(f"{i},{i // 2},{'attn' if i % 2 == 0 else 'ffn'},{rate!r}")
    retention = "\n".join(lines) + "\n"

    ablation = run_ablation(ctx, policy=policy) if ctx else None
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "reward_curve.csv", curve)
    atomic_write_text(out / "retention_by_layer.csv", retention)
    if ablation is not None:
        write_ablation_csv(out / "ablation.csv", ablation)
        for row in ablation:
            print(f"{row.arm:>14}  PPL {row.ppl:10.4f}  params {row.params_kept}")
    print(f"report written to {out}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ffprune", description="Layer-wise structured pruning search for a small LM.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the dense model")
    t.add_argument("config", help="run config (JSON)")
    t.add_argument("--out", required=True, help="output directory for dense.ckpt and training_curve.csv")
    t.add_argument("--steps", type=int, default=None, help="override train.steps (0 saves the initialization)")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("search", help="search a retention policy")
    s.add_argument("config", help="run config (JSON)")
    s.add_argument("--dense", required=True, help="dense model checkpoint")
    s.add_argument("--out", required=True, help="output directory for episodes.jsonl, policy.json, agent.ckpt")
    s.add_argument("--sparsity", type=float, default=None, help="final sparsity (overrides schedule.s_final)")
    s.add_argument("--steps", type=int, default=None, help="episodes (overrides schedule.total_steps)")
    s.add_argument("--warm-start", default=None, help="agent checkpoint to initialize from")
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.set_defaults(func=cmd_search)

    c = sub.add_parser("calibrate", help="prune by a policy and calibrate the retained weights")
    c.add_argument("config", help="run config (JSON); supplies the calibration windows")
    c.add_argument("--dense", required=True, help="dense model checkpoint")
    c.add_argument("--policy", required=True, help="policy.json from a search")
    c.add_argument("--lambda", dest="lam", type=float, default=None, help="ridge coefficient (default 0.01)")
    c.add_argument("--out", required=True, help="output directory for the checkpoints and calibration_report.json")
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("eval", help="perplexity of a checkpoint")
    e.add_argument("--ckpt", required=True, help="model checkpoint (dense, pruned or calibrated)")
    e.add_argument("--corpus", required=True, help="UTF-8 text file")
    e.add_argument("-n", type=int, required=True, help="number of evaluation windows")
    e.add_argument("--seq-len", type=int, default=None, help="window length (default: model max_seq_len)")
    e.add_argument(
        "--holdout-fraction", type=float, default=0.1, help="evaluate on this trailing fraction of the corpus (0: all)"
    )
    e.add_argument("--out", default=None, help="write metrics.json here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="plot-ready CSVs and the ablation table for a search run")
    r.add_argument("run_dir", help="directory written by 'search'")
    r.add_argument("--out", default=None, help="output directory (default: the run directory)")
    r.add_argument("--no-ablation", action="store_true", help="skip the ablation evaluation")
    r.set_defaults(func=cmd_report)
    return p


def _set_threads() -> None:
    raw = os.environ.get("FFPRUNE_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"FFPRUNE_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads()
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
