"""Command-line front end: reproducible gen-data / train / eval runs.

Exit codes: 0 success, 2 usage or bad spec, 3 artifact/config mismatch,
4 training divergence, 5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .corruption import CorruptionError, CorruptionSpec, corrupt_sample
from .detector import (TrainingDivergedError, load_checkpoint,
                       save_checkpoint)
from .evalharness import emit_report, evaluate, report_from_dict, \
    report_markdown
from .gradcheck import TOLERANCE, suite
from .trainer import run_training, write_training_report
from .world import (DatasetFormatError, dataset_read, dataset_write,
                    generate_dataset)

EXIT_USAGE = 2
EXIT_MISMATCH = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5


def _load_config_or_fail(path) -> ExperimentConfig:
    try:
        return load_config(path)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _read_dataset(path, expected_hash: str):
    if not os.path.exists(path):
        print(f"error: dataset not found: {path}", file=sys.stderr)
        raise SystemExit(EXIT_MISMATCH)
    try:
        samples, ds_hash = dataset_read(path)
    except DatasetFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        raise SystemExit(EXIT_MISMATCH)
    if ds_hash != expected_hash:
        print(f"error: dataset {path} was generated under config hash "
              f"{ds_hash}, expected {expected_hash}", file=sys.stderr)
        raise SystemExit(EXIT_MISMATCH)
    return samples


def cmd_gen_data(args) -> int:
    cfg = _load_config_or_fail(args.config)
    if args.seed_override is not None:
        cfg.seed = args.seed_override
    if args.num_samples < 1:
        print("error: --num-samples must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    samples = generate_dataset(cfg.seed, args.num_samples, cfg.world)
    dataset_write(args.out, samples, cfg.content_hash())
    boxes = sum(len(s.scene.boxes) for s in samples)
    print(f"samples={len(samples)} boxes={boxes} seed={cfg.seed} "
          f"config_hash={cfg.content_hash()}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config_or_fail(args.config)
    samples = _read_dataset(args.dataset, cfg.content_hash())
    try:
        params, report = run_training(samples, cfg.grid, cfg.world, cfg.train)
    except TrainingDivergedError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    manifest = {
        "config_hash": cfg.content_hash(),
        "step_count": params.step_count,
        "fusion_kind": report.fusion_kind,
        "baseline": cfg.train.baseline,
        "grid": dataclasses.asdict(cfg.grid),
    }
    save_checkpoint(args.out, params, manifest)
    header = {"w": cfg.fusion.w, "learning_rate": cfg.train.learning_rate,
              "config_hash": cfg.content_hash()}
    write_training_report(f"{args.out}.train.txt", report, header)
    print(f"fusion={report.fusion_kind} w={cfg.fusion.w} "
          f"epochs={report.epochs} steps={report.total_steps} "
          f"final_loss={report.final_loss:.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config_or_fail(args.config)
    samples = _read_dataset(args.dataset, cfg.content_hash())
    try:
        params, manifest = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as e:
        print(f"error: cannot load checkpoint {args.checkpoint}: {e}",
              file=sys.stderr)
        return EXIT_MISMATCH
    if manifest.get("config_hash") != cfg.content_hash():
        print(f"error: checkpoint {args.checkpoint} trained under config "
              f"hash {manifest.get('config_hash')}, expected "
              f"{cfg.content_hash()}", file=sys.stderr)
        return EXIT_MISMATCH

    eval_cfg = cfg.eval
    if args.regimes:
        eval_cfg = dataclasses.replace(eval_cfg,
                                       regimes=tuple(args.regimes.split(",")))
    os.makedirs(args.out, exist_ok=True)
    run_id = os.path.splitext(os.path.basename(args.checkpoint))[0]
    reports = evaluate(samples, params, cfg.grid, cfg.world, cfg.fusion,
                       eval_cfg, baseline=bool(manifest.get("baseline")))
    mras = []
    for regime, rep in reports.items():
        path = os.path.join(args.out, f"{run_id}.{regime}.report.{args.format}")
        emit_report([rep], path, args.format)
        line = f"regime={regime} clean={rep.clean_value:.6f}"
        if rep.mra is not None:
            line += f" mRA={rep.mra:.6f}"
            mras.append(rep.mra)
        print(line)
    overall = float(np.mean(mras)) if mras else float("nan")
    print(f"mRA={overall:.6f}")
    return 0


def cmd_grad_check(args) -> int:
    _load_config_or_fail(args.config) if args.config else None
    results = suite()
    worst_name, worst = None, 0.0
    for name, err in results.items():
        print(f"{name}: max_rel_err={err:.3e}")
        if err > worst:
            worst_name, worst = name, err
    if worst >= TOLERANCE:
        print(f"FAIL: {worst_name} at {worst:.3e} >= {TOLERANCE}",
              file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"all checks below {TOLERANCE}")
    return 0


def cmd_corrupt_preview(args) -> int:
    cfg = _load_config_or_fail(args.config)
    try:
        spec = CorruptionSpec.parse(args.spec)
    except CorruptionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    samples = _read_dataset(args.dataset, cfg.content_hash())
    preview = samples[:4]
    corrupted = [corrupt_sample(s, spec, cfg.world) for s in preview]
    dataset_write(args.out, corrupted, cfg.content_hash())
    for i, (before, after) in enumerate(zip(preview, corrupted)):
        n0, n1 = before.sweep.num_points, after.sweep.num_points
        dropped = 1.0 - n1 / n0 if n0 else 0.0
        var0 = float(np.var(before.stream.views))
        var1 = float(np.var(after.stream.views))
        if n1 and n0:
            c0 = before.sweep.xy.mean(axis=0)
            c1 = after.sweep.xy.mean(axis=0)
            shift = float(np.hypot(*(c1 - c0)))
        else:
            shift = 0.0
        print(f"sample {i}: points_dropped={dropped:.4f} "
              f"variance_change={var1 - var0:+.6f} centroid_shift_m={shift:.4f}")
    return 0


def cmd_report(args) -> int:
    from .report import render_report_files

    reports = []
    for path in args.reports:
        with open(path) as f:
            for d in json.load(f):
                reports.append(report_from_dict(d))
    if args.markdown or not args.out:
        for rep in reports:
            print(report_markdown(rep))
    if args.out:
        written = render_report_files(reports, args.out, args.run_id)
        for path in written:
            print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevfuse",
        description="single-branch BEV fusion testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--num-samples", type=int, required=True)
    p.add_argument("--seed-override", type=int, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="corruption sweep and metric reports")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--regimes", default=None,
                   help="comma-separated subset of lc,l,c")
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("corrupt-preview",
                       help="corrupt a few samples and summarize the diff")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--spec", required=True, help="<family>:<severity>")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_corrupt_preview)

    p = sub.add_parser("report", help="render stored reports")
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.add_argument("--markdown", action="store_true")
    p.add_argument("--out", default=None,
                   help="directory for CSV + heatmap figures")
    p.add_argument("--run-id", default="run")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
