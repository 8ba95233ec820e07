"""Command-line entry point: collect, train, eval, analyze, plot, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import fnmatch
import logging
import os
import shutil
import sys
import time
from pathlib import Path

from .analytics import (RouterTrace, TableError, TraceError, EvalRun, aggregate_eval, emit_curves,
                        episodes_from_csv, episodes_to_csv, percentile_load, write_table)
from .dataset import (DatasetError, DatasetFormatError, collect_demonstrations, dataset_hash,
                      load_dataset, write_dataset)
from .policy import (ConfigError, NumericalFailure, PolicyRunner, PolicyVariant, TrainingData,
                     checkpoint_bytes, init_model, load_policy, train)
from .policy.train import content_hash, read_run_manifest, write_run_manifest
from .runconfig import RunConfig, load_run_config, parse_mode, run_config_from_flat
from .sim import PerturbationMode, evaluate
from .tensor import CheckpointError, NonFiniteGradient

log = logging.getLogger("forcevla")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class RunExists(ConfigError):
    pass


# -- run directory helpers --------------------------------------------------------
def runs_dir(args) -> Path:
    if getattr(args, "runs_dir", None):
        return Path(args.runs_dir)
    return Path(os.environ.get("FORCEVLA_RUNS_DIR", "runs"))


def new_run_id(prefix: str, cfg: RunConfig) -> str:
    return f"{prefix}-{time.strftime('%Y%m%d-%H%M%S')}-{cfg.digest()[:8]}"


def claim(path: Path, force: bool) -> Path:
    """Refuse to reuse an existing output unless ``force``; then clear it."""
    if path.exists():
        if not force:
            raise RunExists(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    return path


def resolve_runs(root: Path, patterns: list[str]) -> list[Path]:
    if not root.is_dir():
        raise DatasetError(f"runs directory {root} does not exist")
    names = sorted(p.name for p in root.iterdir() if (p / "manifest.txt").exists())
    found: list[str] = []
    for pat in patterns:
        hits = [n for n in names if fnmatch.fnmatchcase(n, pat)]
        found.extend(h for h in hits if h not in found)
    if not found:
        raise DatasetError(f"no runs under {root} match {patterns}")
    return [root / n for n in found]


def base_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.with_overrides(
        variant=getattr(args, "variant", None), mode=getattr(args, "mode", None),
        demos=getattr(args, "demos", None), seed=getattr(args, "seed", None),
        trials=getattr(args, "trials", None), steps=getattr(args, "steps", None))


# -- commands -----------------------------------------------------------------------
def cmd_collect(args) -> int:
    cfg = base_config(args)
    if args.out:
        out = Path(args.out)
    else:
        out = runs_dir(args) / (args.run_id or new_run_id("data", cfg)) / "dataset"
    claim(out, args.force)
    res = collect_demonstrations(cfg.mode, cfg.demos, cfg.seed)
    h = write_dataset(out, res.episodes, cfg.task, extra={
        "mode": cfg.mode.value, "seed": cfg.seed, "attempts": res.attempts,
        "successes": res.successes, "expert_success_rate": f"{res.success_rate:.4f}"})
    print(f"collected {len(res.episodes)} demonstrations ({res.successes}/{res.attempts} expert "
          f"successes) -> {out}")
    print(f"dataset hash {h}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = base_config(args)
    data_root = Path(args.dataset)
    if not (data_root / "manifest.txt").exists():
        raise DatasetError(f"no dataset at {data_root} (missing manifest.txt)")
    manifest, episodes = load_dataset(data_root)
    if not episodes:
        raise DatasetError(f"dataset {data_root} holds no episodes")
    if args.mode is None and manifest.get("mode"):
        cfg = cfg.with_overrides(mode=manifest["mode"])
    run_dir = runs_dir(args) / (args.run_id or new_run_id(cfg.variant.value, cfg))
    claim(run_dir, args.force)
    pcfg, tcfg = cfg.policy_config(), cfg.train_config()
    data = TrainingData.from_episodes(episodes, pcfg)
    model = init_model(pcfg)
    log.info("training %s on %d chunks for %d steps", pcfg.variant.value, len(data), tcfg.steps)
    result = train(model, data, tcfg)
    run_dir.mkdir(parents=True)
    blob = checkpoint_bytes(model, data.norm)
    (run_dir / "checkpoint.fvla").write_bytes(blob)
    (run_dir / "metrics.csv").write_text(result.metrics_csv(), encoding="utf-8")
    entries = dict(cfg.to_flat())
    entries.update({"variant": cfg.variant.value, "seed": cfg.seed,
                    "dataset": str(data_root), "dataset_hash": dataset_hash(data_root),
                    "dataset_mode": manifest.get("mode", ""),
                    "checkpoint_hash": content_hash(blob)})
    write_run_manifest(run_dir / "manifest.txt", entries)
    final = result.metrics[-1][1] if result.metrics else float("nan")
    print(f"trained {cfg.variant.value} for {tcfg.steps} steps, final loss {final:.4f} -> {run_dir}")
    return EXIT_OK


def load_run(run_dir: Path):
    mpath = run_dir / "manifest.txt"
    if not mpath.exists():
        raise DatasetError(f"no run manifest at {mpath}")
    manifest = read_run_manifest(mpath)
    cfg = run_config_from_flat(manifest)
    ckpt = run_dir / "checkpoint.fvla"
    if not ckpt.exists():
        raise DatasetError(f"no checkpoint at {ckpt}")
    if content_hash(ckpt.read_bytes()) != manifest.get("checkpoint_hash"):
        raise DatasetError(f"checkpoint {ckpt} does not match the hash in its manifest")
    try:
        model, norm = load_policy(ckpt, cfg.policy_config())
    except ValueError as exc:
        if isinstance(exc, (CheckpointError, DatasetError)):
            raise
        raise ConfigError(f"{run_dir.name}: {exc}") from None
    return manifest, cfg, model, norm


def cmd_eval(args) -> int:
    run_dir = runs_dir(args) / args.run_id
    manifest, cfg, model, norm = load_run(run_dir)
    if args.variant and PolicyVariant.parse(args.variant) is not cfg.variant:
        raise ConfigError(f"run {args.run_id} holds a {cfg.variant.value} checkpoint, "
                          f"not {PolicyVariant.parse(args.variant).value}")
    modes = [parse_mode(m) for m in (args.mode or [cfg.mode.value])]
    trials = args.trials or cfg.trials
    seed = cfg.seed if args.seed is None else args.seed
    for mode in modes:
        out = claim(run_dir / "eval" / mode.value, args.force)
        runner = PolicyRunner(model, norm, seed=seed, replan=args.replan)
        res = evaluate(runner, mode, trials, seed)
        out.mkdir(parents=True)
        (out / "episodes.csv").write_text(episodes_to_csv(res.episodes), encoding="utf-8")
        if runner.records:
            trace = RouterTrace(cfg.policy.fusion.n_experts)
            trace.extend(runner.records)
            trace.save(out / "router_trace.csv")
        print(f"{cfg.variant.value} {mode.label}: {res.n_success}/{trials} successes "
              f"({100 * res.success_rate:.1f}%)")
    return EXIT_OK


def _eval_dirs(run_dir: Path):
    ev = run_dir / "eval"
    return sorted(p for p in ev.iterdir() if p.is_dir()) if ev.is_dir() else []


def _analysis_out(args, runs: list[Path]) -> Path:
    root = runs_dir(args)
    return root / (args.out_id or runs[0].name) / "analysis"


def _load_curves(runs: list[Path], attribution: str):
    """One load curve per (variant, mode), pooling episodes over runs."""
    groups: dict[tuple[str, str], list] = {}
    n_exp: dict[tuple[str, str], int] = {}
    for run in runs:
        variant = read_run_manifest(run / "manifest.txt").get("variant", "?")
        for d in _eval_dirs(run):
            path = d / "router_trace.csv"
            if not path.exists():
                continue
            trace = RouterTrace.load(path)
            trace.validate()
            key = (variant, d.name)
            n_exp[key] = trace.n_experts
            groups.setdefault(key, []).extend(trace.by_episode().values())
    return {k: percentile_load(v, n_exp[k], f"{k[0]} {k[1]}", attribution)
            for k, v in sorted(groups.items())}


def cmd_analyze(args) -> int:
    runs = resolve_runs(runs_dir(args), args.runs)
    out = _analysis_out(args, runs)
    claim(out, args.force)
    evals, variants, modes = [], [], []
    for run in runs:
        m = read_run_manifest(run / "manifest.txt")
        variant, seed = m.get("variant", "?"), int(m.get("seed", 0))
        variants.append(variant)
        for d in _eval_dirs(run):
            logs = episodes_from_csv((d / "episodes.csv").read_text(encoding="utf-8"))
            evals.append(EvalRun.from_logs(variant, d.name, seed, logs))
            modes.append(d.name)
    if not evals:
        raise DatasetError(f"none of {[r.name for r in runs]} has evaluation logs; run eval first")
    order = [v.value for v in PolicyVariant]
    vs = sorted(dict.fromkeys(variants), key=lambda v: order.index(v) if v in order else len(order))
    mode_order = [m.value for m in PerturbationMode]
    ms = sorted(dict.fromkeys(modes), key=lambda m: mode_order.index(m) if m in mode_order else 99)
    table = aggregate_eval(evals, vs, ms)
    labels = {m.value: m.label for m in PerturbationMode}
    paths = write_table(table, out, mode_labels=labels)
    print(table.to_csv(labels), end="")
    for v, m in table.missing:
        print(f"warning: no evaluation for {v} / {m}", file=sys.stderr)
    for (variant, mode), curve in _load_curves(runs, args.attribution).items():
        emit_curves(curve, out, f"expert_load_{variant}_{mode}", png=False)
    print(f"wrote {paths['table']}")
    return EXIT_OK


def cmd_plot(args) -> int:
    runs = resolve_runs(runs_dir(args), args.runs)
    out = _analysis_out(args, runs) / "plots"
    curves = _load_curves(runs, args.attribution)
    if not curves:
        raise DatasetError("no router traces found; only MoE variants emit them")
    claim(out, args.force)
    for (variant, mode), curve in curves.items():
        paths = emit_curves(curve, out, f"expert_load_{variant}_{mode}", png=not args.no_png)
        print(f"{variant} {mode}: {curve.n_episodes} episodes -> {paths['svg']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_suite, summarize

    results, elapsed = run_suite(range(args.seeds), max_entries=args.max_entries)
    worst = summarize(results)
    for name, err in worst.items():
        print(f"{name:<18} {err:.3e} {'ok' if err <= TOLERANCE else 'FAIL'}")
    bad = [n for n, e in worst.items() if e > TOLERANCE]
    print(f"{len(worst)} cases x {args.seeds} seeds in {elapsed:.1f}s; "
          f"{'all within' if not bad else 'FAILED'} {TOLERANCE:g}")
    return EXIT_NUMERIC if bad else EXIT_OK


# -- argument parsing ---------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forcevla", description=__doc__.splitlines()[0])
    p.add_argument("--runs-dir", help="run directory root (default $FORCEVLA_RUNS_DIR or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run_id=True):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if run_id:
            sp.add_argument("--run-id", help="explicit run id (default: timestamp + config hash)")

    c = sub.add_parser("collect", help="record scripted-expert demonstrations")
    common(c)
    c.add_argument("--mode")
    c.add_argument("--demos", type=int)
    c.add_argument("--out", help="dataset directory (default runs/<run-id>/dataset)")
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", help="train a policy variant on a dataset")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--variant")
    t.add_argument("--mode", help="recorded in the manifest (default: the dataset's mode)")
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation of a trained run")
    e.add_argument("--run-id", required=True)
    e.add_argument("--mode", action="append", help="perturbation mode (repeatable)")
    e.add_argument("--trials", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--variant", help="expected variant; mismatch with the checkpoint is an error")
    e.add_argument("--replan", type=int, default=1, help="execute this many chunk actions per sample")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    for name, func, helptext in (("analyze", cmd_analyze, "success table and load curves"),
                                 ("plot", cmd_plot, "expert-load figures (SVG and PNG)")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("runs", nargs="+", help="run ids or glob patterns")
        a.add_argument("--out-id", help="run id whose analysis/ receives the outputs")
        a.add_argument("--attribution", choices=("top1", "full"), default="top1")
        a.add_argument("--force", action="store_true")
        if name == "plot":
            a.add_argument("--no-png", action="store_true")
        a.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="finite-difference check of every tensor primitive")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--max-entries", type=int, default=24)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, NonFiniteGradient, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, DatasetFormatError, CheckpointError, TraceError, TableError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
