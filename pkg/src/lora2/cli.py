"""Command-line entry point.

Exit codes: 0 success, 1 failed check or run error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .adapters import Lora2Adapter, Lora2Config
from .allocation import budget_at, global_mask_update, importance_full, importance_simplified, skipped_fraction, stable_argsort
from .autodiff import check_gradients
from .checkpoint import MetricsWriter, load_checkpoint, read_manifest, save_checkpoint, save_weights
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .models import merged_spec
from .report import METRICS_FILE, IncompleteRunError, export_heatmap
from .training import TrainingAborted, init_adapters, loss_closure, train

OUT_DIR_ENV = "LORA2_OUT_DIR"
CHECKPOINT_FILE = "checkpoint.lora2"
CONFIG_FILE = "config.toml"

log = logging.getLogger("lora2")


class UsageError(Exception):
    pass


def _load(args) -> ExperimentConfig:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        raise UsageError(f"config not found: {args.config}") from exc
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.train.total_steps = args.steps
        cfg.allocator.t_final = min(cfg.allocator.t_final, args.steps)
        cfg.allocator.t_warmup = min(cfg.allocator.t_warmup, max(cfg.allocator.t_final - 1, 0))
    try:
        cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _run_dir(args) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    base = os.environ.get(OUT_DIR_ENV, "runs")
    return Path(base) / Path(args.config).stem


def cmd_train(args) -> int:
    cfg = _load(args)
    run_dir = _run_dir(args)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / METRICS_FILE
    if metrics_path.exists():
        metrics_path.unlink()
    (run_dir / CONFIG_FILE).write_text(cfg.dumps())
    spec = cfg.build_spec()
    task = cfg.build_task(spec)
    with MetricsWriter(metrics_path) as sink:
        try:
            result = train(cfg.train_config(), spec, task, on_record=sink)
        except TrainingAborted as exc:
            print(f"training aborted: {exc}", file=sys.stderr)
            return 1
    last = result.metrics[-1]
    save_checkpoint(run_dir / CHECKPOINT_FILE, result.adapters, last.step, cfg)
    export_heatmap(run_dir, figures=args.figures)
    print(f"run: {run_dir}")
    print(f"final step {last.step}: task_loss={last.task_loss:.6g} eval={last.eval_metric:.6g} ranks={last.total_rank}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = _load(args)
    spec = cfg.build_spec()
    task = cfg.build_task(spec)
    tc = cfg.train_config()
    rng = np.random.default_rng(cfg.train.seed)
    adapters = init_adapters(spec, tc.adapter, tc.seed)
    # a well-scaled random point: at init lam is zero and the tiny factors
    # leave gradients near the finite-difference noise floor
    for site, ad in adapters.items():
        point = {f: rng.normal(0.0, 1.0 / np.sqrt(max(v.shape)), v.shape) for f, v in ad.params().items()}
        if isinstance(ad, Lora2Adapter):
            point["lam"] = rng.normal(size=(1, ad.r))
        adapters[site] = ad.with_params(point)
    batch = task.train.take(np.arange(min(tc.batch_size, len(task.train))))
    fn, params = loss_closure(spec, adapters, batch, task.kind, tc.orth)
    ok = True
    for name, value in params.items():
        entries = None
        if args.max_entries and value.size > args.max_entries:
            flat = rng.choice(value.size, args.max_entries, replace=False)
            entries = [np.unravel_index(i, value.shape) for i in np.sort(flat)]
        (rep,) = check_gradients(
            fn, {**params}, frozen=[n for n in params if n != name], step=args.step, tolerance=args.tolerance,
            entries=entries,
        )
        print(rep)
        ok &= rep.passed
    print("gradient check", "passed" if ok else "FAILED")
    return 0 if ok else 1


def _embedded_config(path) -> ExperimentConfig:
    text = read_manifest(path).get("config")
    if not text:
        raise UsageError("checkpoint carries no config; pass --config")
    return parse_config(text)


def cmd_merge(args) -> int:
    cfg = _load(args) if args.config else _embedded_config(args.checkpoint)
    adapters, step, _ = load_checkpoint(args.checkpoint, cfg)
    spec = cfg.build_spec()
    merged = merged_spec(spec, adapters)
    save_weights(args.out, {s.name: s.weight for s in merged.sites})
    print(f"merged {len(adapters)} adapter(s) from step {step} into {args.out}")
    return 0


def cmd_score_audit(args) -> int:
    cfg = _load(args)
    spec = cfg.build_spec()
    task = cfg.build_task(spec)
    tc = cfg.train_config()
    if tc.adapter.kind != "lora2":
        raise UsageError("score-audit needs adapter.kind = 'lora2'")
    sites = list(spec.attachment)
    cfgs = [Lora2Config(*spec.site(s).shape, tc.adapter.k, tc.adapter.r_init) for s in sites]
    sched = tc.schedule(sum(c.r_init for c in cfgs))
    if sched is None:
        raise UsageError("score-audit needs a pruning schedule (allocator.b_target > 0)")
    events = {"n": 0, "rank_mismatch": 0, "mask_mismatch": 0}

    def on_prune(step, adapters, state):
        ads = [adapters[s] for s in sites]
        simple = [importance_simplified(ad, state, s) for ad, s in zip(ads, sites)]
        full = [importance_full(ad, state, s) for ad, s in zip(ads, sites)]
        events["n"] += 1
        for a, b in zip(simple, full):
            if not np.array_equal(stable_argsort(a), stable_argsort(b)):
                events["rank_mismatch"] += 1
        # global masks compared on copies; the run itself is untouched
        by_simple = [ad.copy() for ad in ads]
        by_full = [ad.copy() for ad in ads]
        global_mask_update(by_simple, simple, budget_at(sched, step))
        global_mask_update(by_full, full, budget_at(sched, step))
        if any(not np.array_equal(x.mask, y.mask) for x, y in zip(by_simple, by_full)):
            events["mask_mismatch"] += 1

    try:
        train(tc, spec, task, on_prune=on_prune, track_all=True)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    frac = skipped_fraction(cfgs)
    print(f"skipped_fraction {frac:.6f}")
    print(f"prune events {events['n']}, per-adapter ranking mismatches {events['rank_mismatch']}")
    print(f"global mask differences between simplified and full scoring: {events['mask_mismatch']}")
    ok = events["rank_mismatch"] == 0
    print("score audit", "passed" if ok else "FAILED")
    return 0 if ok else 1


def cmd_export_heatmap(args) -> int:
    try:
        path = export_heatmap(args.run_dir, figures=args.figures)
    except IncompleteRunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(path.read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lora2", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, out=False):
        sp.add_argument("config")
        sp.add_argument("--seed", type=int, help="override train.seed")
        sp.add_argument("--steps", type=int, help="override train.total_steps")
        if out:
            sp.add_argument("--out-dir", help=f"run directory (default ${OUT_DIR_ENV}/<config name> or runs/<config name>)")

    sp = sub.add_parser("train", help="train and write metrics, checkpoint and heatmap")
    common(sp, out=True)
    sp.add_argument("--figures", action="store_true", help="also render PNG figures")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("grad-check", help="finite-difference audit of the combined loss")
    common(sp, out=True)
    sp.add_argument("--step", type=float, default=1e-6)
    sp.add_argument("--tolerance", type=float, default=1e-5)
    sp.add_argument("--max-entries", type=int, default=24, help="entries checked per leaf (0 = all)")
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("merge", help="fold a checkpoint into dense weights")
    sp.add_argument("checkpoint")
    sp.add_argument("out")
    sp.add_argument("--config", help="config to verify against (default: the one embedded in the checkpoint)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-dir", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("score-audit", help="compare simplified and full importance rankings on a live run")
    common(sp, out=True)
    sp.set_defaults(func=cmd_score_audit)

    sp = sub.add_parser("export-heatmap", help="write heatmap.csv for a finished run")
    sp.add_argument("run_dir")
    sp.add_argument("--figures", action="store_true")
    sp.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    sp.add_argument("--out-dir", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_export_heatmap)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
