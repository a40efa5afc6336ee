"""Command-line entry point: ``cardiacef <subcommand> ...``.

Exit codes: 0 success, 2 validation/configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from . import data as D
from .exceptions import NumericalError, ValidationError
from .harness import (ABLATION_AXES, TrainConfig, ablate, ablation_grid,
                      epoch_rows, evaluate, gradcheck_all, train, write_metrics_csv)
from .estimator import CardiacEFRegressor
from .mfl import AGGREGATORS
from .ordinal import BIN_SCHEMES
from .diffcore import REGRESSION_LOSSES

logger = logging.getLogger("cardiacef")

# flag dest -> TrainConfig field
_OVERRIDES = {
    "aggregator": "aggregator", "echozoom": "echozoom", "bins": "bins", "bin_scheme": "bin_scheme",
    "reg_loss": "reg_loss", "temperature": "temperature", "shots": "shots", "seed": "seed",
    "epochs": "epochs", "lr": "learning_rate", "clip_length": "clip_length",
    "clip_stride": "clip_stride", "optimizer": "optimizer", "precision": "precision",
    "upsample": "upsample", "batch_size": "batch_size", "val_every": "val_every",
}


def _add_model_flags(p):
    p.add_argument("--config", help="JSON file of TrainConfig keys")
    p.add_argument("--aggregator", choices=AGGREGATORS)
    p.add_argument("--echozoom", choices=("on", "off"))
    p.add_argument("--bins", type=int)
    p.add_argument("--bin-scheme", choices=BIN_SCHEMES)
    p.add_argument("--reg-loss", choices=REGRESSION_LOSSES)
    p.add_argument("--temperature", type=float)
    p.add_argument("--shots", type=int, choices=(1, 2, 4, 8))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip-length", type=int)
    p.add_argument("--clip-stride", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--val-every", type=int)
    p.add_argument("--optimizer", choices=("radam", "adam"))
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--upsample", choices=("nearest", "bilinear"))


def _config(args):
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    changes = {}
    for dest, key in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "echozoom":
            value = value == "on"
        changes[key] = value
    return cfg.replace(**changes) if changes else cfg


def cmd_synth_gen(args):
    cfg = D.SyntheticConfig(resolution=args.resolution, total_frames=args.frames, seed=args.seed,
                            noise_sigma=args.noise_sigma, period_jitter=args.period_jitter,
                            tissue_sigma=args.tissue_sigma)
    manifest, clips = D.make_synthetic_dataset(args.clips_per_class, args.ef_min, args.ef_max, args.seed,
                                               cfg, args.val_per_class, args.test_per_class)
    D.write_dataset(args.out, manifest, clips)
    print(f"wrote {len(manifest)} clips to {args.out}")


def cmd_fewshot_split(args):
    manifest, _ = D.read_dataset(args.data) if os.path.isdir(args.data) else (D.read_manifest(args.data), None)
    subset = D.few_shot_sample(manifest, args.shots, args.seed)
    if args.out:
        D.write_manifest(args.out, subset)
    print(f"{args.shots}-shot subset: {len(subset)} rows")


def cmd_train(args):
    cfg = _config(args)
    manifest, clips = D.read_dataset(args.data)
    t0 = time.perf_counter()
    est = train(cfg, manifest, clips)
    wall = time.perf_counter() - t0
    if args.out:
        est.save(args.out)
        print(f"saved checkpoint to {args.out}")
    rows = epoch_rows(est, cfg)
    if len(manifest.split("TEST")):
        row = evaluate(est, manifest, clips, "TEST", cfg.name, cfg.shots, cfg.seed)
        row.wall_seconds = wall
        rows.append(row)
        print(f"test MAE {row.mae:.3f} RMSE {row.rmse:.3f}")
    if args.metrics_out:
        write_metrics_csv(args.metrics_out, rows)


def cmd_eval(args):
    est = CardiacEFRegressor.load(args.checkpoint)
    manifest, clips = D.read_dataset(args.data)
    row = evaluate(est, manifest, clips, args.split, args.setting, 0, est.random_state)
    print(f"{args.split} MAE {row.mae:.3f} RMSE {row.rmse:.3f}")
    if args.metrics_out:
        write_metrics_csv(args.metrics_out, [row])


def cmd_ablate(args):
    base = _config(args)
    manifest, clips = D.read_dataset(args.data)
    rows = ablate(ablation_grid(args.axis, base), args.seeds, manifest, clips)
    for row in rows:
        print(",".join(str(v) for v in row.as_csv()))
    if args.metrics_out:
        write_metrics_csv(args.metrics_out, rows)


def cmd_gradcheck(args):
    reports = gradcheck_all(seeds=args.seeds)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        if args.verbose or not r.passed:
            print(f"{'FAIL' if not r.passed else 'ok  '} {r.op_name:40s} {r.max_rel_error:.3e} {r.worst_coordinate}")
    worst = max(reports, key=lambda r: r.max_rel_error)
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed; worst {worst.op_name} {worst.max_rel_error:.3e}")
    return 3 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="cardiacef", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--clips-per-class", type=int, default=1)
    p.add_argument("--ef-min", type=int, default=20)
    p.add_argument("--ef-max", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-per-class", type=int, default=0)
    p.add_argument("--test-per-class", type=int, default=0)
    p.add_argument("--resolution", type=int, default=112)
    p.add_argument("--frames", type=int, default=175)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--period-jitter", type=float, default=0.0)
    p.add_argument("--tissue-sigma", type=float, default=0.04, help="std of the static background texture")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("fewshot-split", help="draw an n-shot TRAIN subset")
    p.add_argument("--data", required=True, help="dataset directory or manifest CSV")
    p.add_argument("--shots", type=int, choices=(1, 2, 4, 8), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fewshot_split)

    p = sub.add_parser("train", help="train on the few-shot subset of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--metrics-out")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="TEST", choices=D.SPLITS)
    p.add_argument("--setting", default="eval")
    p.add_argument("--metrics-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation axis over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--metrics-out")
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (ValidationError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
