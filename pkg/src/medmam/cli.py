"""Command-line entry point.

Subcommands: train, eval, ablate, gradcheck, geomaudit, gen-data. One JSON
config file drives everything; outputs are JSON reports, CSV comparison
tables, and JSON checkpoints. Exit codes: 0 success, 1 contract error,
2 divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__, runner, synth
from .config import RunConfig, load_config
from .errors import ContractError, DivergenceError


def _write_json(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=2)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n")
        print(f"wrote {path}")


def _cfg(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def cmd_train(args) -> int:
    cfg = _cfg(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = runner.train(cfg, checkpoint_path=str(out_dir / "checkpoint.json"))
    _write_json(report.to_dict(), str(out_dir / "report.json"))
    print(
        f"test weighted_f1={report.weighted_f1:.4f} "
        f"weighted_accuracy={report.weighted_accuracy:.4f} "
        f"({report.epochs_run} epochs, {report.wall_time_s:.1f}s)"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _cfg(args)
    report = runner.evaluate(args.checkpoint, cfg, split=args.split)
    _write_json(report.to_dict(), args.out)
    print(
        f"{args.split} weighted_f1={report.weighted_f1:.4f} "
        f"weighted_accuracy={report.weighted_accuracy:.4f}"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = _cfg(args)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    results = runner.ablate(cfg, arms, n_seeds=args.seeds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for arm, reports in results.items():
        for rep in reports:
            seed = rep.config["seed"]
            _write_json(rep.to_dict(), str(out_dir / f"{arm}_seed{seed}.json"))
    rows = runner.comparison_rows(results)
    table_path = out_dir / "comparison.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["arm", "seed", "weighted_accuracy", "weighted_f1", "macro_f1"]
        )
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {table_path}")
    for row in rows:
        if str(row["arm"]).endswith("/mean"):
            print(
                f"{row['arm']:<28} weighted_f1={row['weighted_f1']:.4f} "
                f"weighted_accuracy={row['weighted_accuracy']:.4f}"
            )
    return 0


def cmd_gradcheck(args) -> int:
    seeds = tuple(range(args.seeds))
    report = runner.gradient_suite(seeds=seeds)
    for key, value in report.items():
        if key.endswith("_max"):
            print(f"{key:<28} {value:.3e}")
    print(f"runtime: {report['runtime_s']:.1f}s  max: {report['max_rel_error']:.3e}")
    if not report["passed"]:
        print("gradient suite FAILED (max relative error >= 1e-5)")
        return 2
    print("gradient suite passed")
    return 0


def cmd_geomaudit(args) -> int:
    curvatures = [float(c) for c in args.curvatures.split(",") if c.strip()]
    report = runner.geometry_audit(
        curvatures, dim=args.dim, trials=args.trials, seed=args.seed
    )
    _write_json(report, args.out)
    for key, stats in report.items():
        print(
            f"{key}: paper-mode norm deviation "
            f"max={stats['paper_euclidean_norm_rel_dev_max']:.3e} "
            f"mean={stats['paper_euclidean_norm_rel_dev_mean']:.3e}; "
            f"gyro reference max={stats['gyro_riemannian_norm_rel_dev_max']:.3e}"
        )
    return 0


def cmd_gen_data(args) -> int:
    cfg = _cfg(args)
    samples = synth.generate(cfg.synth_config())
    synth.save_jsonl(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medmam",
        description="Temporal feature alignment experiments on the Poincare ball.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the config's synthetic dataset")
    p.add_argument("--config", help="JSON config path (defaults apply when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--config", help="JSON config path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run ablation arms over shared seeds")
    p.add_argument("--config", help="JSON config path")
    p.add_argument("--arms", required=True,
                   help=f"comma-separated subset of {sorted(runner.ABLATION_ARMS)}")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=2)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("geomaudit", help="paper-mode transport audit")
    p.add_argument("--curvatures", default="0.01,0.1,1.0")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.set_defaults(fn=cmd_geomaudit)

    p = sub.add_parser("gen-data", help="export the config's dataset as JSON lines")
    p.add_argument("--config", help="JSON config path")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ContractError as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
