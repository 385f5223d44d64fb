"""Command-line interface: dataset generation, distortion, training,
the bilevel optimizer, ablation suites, oracle checks, and reporting."""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from .config import make_config, write_config
from .dataforge import DistortionSpec, distort, load_container, make_synthetic, \
    save_container
from .runner import ARMS, run, run_ablation_suite, swap_valid_for_test

ESTIMATOR_ALIASES = {"ift": "ift_neumann", "darts": "darts_identity",
                     "exact": "exact_inverse"}


def _add_run_flags(p):
    p.add_argument("--config", help="config file (nested key = value sections)")
    p.add_argument("--ir", type=int, help="class imbalance ratio")
    p.add_argument("--nr", type=float, help="label noise ratio")
    p.add_argument("--epochs", type=int)
    p.add_argument("--ho-start", type=int, dest="ho_start",
                   help="epoch after which hyperparameter optimization begins")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--neumann-t", type=int, help="Neumann series steps")
    p.add_argument("--neumann-alpha", type=float, help="Neumann step size")
    p.add_argument("--estimator", choices=sorted(ESTIMATOR_ALIASES))
    p.add_argument("--arm", choices=ARMS)
    p.add_argument("--inner-lr", type=float)
    p.add_argument("--hyper-lr", type=float)
    p.add_argument("--seed", type=int, help="sets model, data, and noise seeds")
    p.add_argument("--model-seed", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--noise-seed", type=int)
    p.add_argument("--dataset", help="'synthetic' or a container path")
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--size", type=int, help="image size")
    p.add_argument("--valid-fraction", type=float)
    p.add_argument("--fold", type=int, help="fold seed for the stratified split")
    p.add_argument("--model", dest="model_kind", choices=["linear", "mlp", "tinycnn"])
    p.add_argument("--ho-source", choices=["valid", "test"])
    p.add_argument("--train-on-all", action="store_true", default=None)
    p.add_argument("--out", help="output directory")


def _config_from_args(args, **forced):
    overrides = dict(
        ir=args.ir, nr=args.nr, epochs=args.epochs, ho_start_epoch=args.ho_start,
        batch_size=args.batch_size, neumann_steps=args.neumann_t,
        neumann_alpha=args.neumann_alpha,
        estimator=ESTIMATOR_ALIASES.get(args.estimator),
        arm=args.arm, inner_lr=args.inner_lr, hyper_lr=args.hyper_lr,
        dataset=args.dataset, n_per_class=args.n_per_class, n_classes=args.classes,
        image_size=args.size, valid_fraction=args.valid_fraction,
        fold_seed=args.fold, model_kind=args.model_kind, ho_source=args.ho_source,
        train_on_all=args.train_on_all, out_dir=args.out,
        model_seed=args.model_seed, data_seed=args.data_seed,
        noise_seed=args.noise_seed,
    )
    if args.seed is not None:
        for key in ("model_seed", "data_seed", "noise_seed"):
            if overrides[key] is None:
                overrides[key] = args.seed
    overrides.update(forced)
    return make_config(args.config, **overrides)


def cmd_generate(args):
    view = make_synthetic(args.n_per_class, args.classes, args.size, args.seed)
    save_container(view, args.out)
    print(f"wrote {len(view)} images ({args.classes} classes, "
          f"{args.size}x{args.size}) to {args.out}")


def cmd_distort(args):
    view = load_container(args.input)
    spec = DistortionSpec(ir=args.ir, nr=args.nr, seed=args.seed)
    out = distort(view, spec)
    save_container(out, args.out)
    counts = out.class_counts().tolist()
    print(f"wrote {len(out)} records to {args.out}; class counts {counts}")


def _print_run_summary(result):
    print(f"arm={result.config.arm} estimator={result.config.estimator} "
          f"fold={result.config.fold_seed}")
    print(f"final test error: {100 * result.final_error:.2f}%")
    if len(result.per_class_acc):
        print(f"per-class accuracy: "
              f"{[round(100 * a, 1) for a in result.per_class_acc]}")
        print(f"inter-class accuracy std: {100 * result.interclass_std():.2f}%")
    print(f"passes: inner={result.counter.inner} outer={result.counter.outer} "
          f"ratio={result.counter.ratio():.4g}")


def cmd_train(args):
    cfg = _config_from_args(args)
    # plain trainer: the outer loop never fires
    from dataclasses import replace
    cfg = replace(cfg, ho_start_epoch=cfg.epochs,
                  arm=cfg.arm if args.arm else "baseline")
    result = run(cfg)
    _print_run_summary(result)


def cmd_autodo(args):
    cfg = _config_from_args(args)
    if args.swap_valid_for_test:
        report = swap_valid_for_test(cfg)
        print(json.dumps(report, indent=2))
        return
    result = run(cfg)
    _print_run_summary(result)
    if args.save_config and cfg.out_dir:
        write_config(cfg, os.path.join(cfg.out_dir, "run.cfg"))


def cmd_ablate(args):
    cfg = _config_from_args(args)
    arms = [a.strip() for a in args.arms.split(",")]
    table = run_ablation_suite(cfg, arms, folds=args.folds, workers=args.workers)
    print(f"{'arm':>18} {'mean err %':>12} {'std %':>8} {'interclass std %':>18}")
    for arm in arms:
        row = table["arms"][arm]
        print(f"{arm:>18} {100 * row['mean']:>12.2f} {100 * row['std']:>8.2f} "
              f"{100 * row['interclass_std_mean']:>18.2f}")
    if cfg.out_dir:
        with open(os.path.join(cfg.out_dir, "ablation.json"), "w") as f:
            json.dump(table, f, indent=2, sort_keys=True)


def cmd_check(args):
    from .checks import run_all_checks
    reports = run_all_checks()
    failed = 0
    for rep in reports:
        status = "PASS" if rep["passed"] else "FAIL"
        detail = {k: v for k, v in rep.items() if k not in ("name", "passed")}
        print(f"[{status}] {rep['name']}: {json.dumps(detail, default=float)}")
        failed += 0 if rep["passed"] else 1
    if args.out:
        with open(args.out, "w") as f:
            json.dump(reports, f, indent=2, default=float)
    if failed:
        sys.exit(1)


def cmd_report(args):
    paths = sorted(glob.glob(os.path.join(args.dir, "**", "summary.json"),
                             recursive=True))
    if not paths:
        print(f"no summary.json files under {args.dir}")
        sys.exit(1)
    groups = {}
    for path in paths:
        with open(path) as f:
            s = json.load(f)
        groups.setdefault(s["arm"], []).append(s["final_test_error"])
    print(f"{'arm':>18} {'runs':>5} {'mean err %':>12} {'std %':>8}")
    for arm, errs in sorted(groups.items()):
        print(f"{arm:>18} {len(errs):>5} {100 * np.mean(errs):>12.2f} "
              f"{100 * np.std(errs):>8.2f}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dataopt",
        description="Per-point train-data optimization via implicit differentiation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic glyph dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=250)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("distort", help="apply class imbalance and label noise")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ir", type=int, default=1)
    p.add_argument("--nr", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_distort)

    p = sub.add_parser("train", help="plain baseline training (no outer loop)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("autodo", help="bilevel run: train the model, optimize the table")
    _add_run_flags(p)
    p.add_argument("--swap-valid-for-test", action="store_true",
                   help="also run with the test set as the outer-loop source")
    p.add_argument("--save-config", action="store_true")
    p.set_defaults(func=cmd_autodo)

    p = sub.add_parser("ablate", help="run arms x folds and aggregate")
    _add_run_flags(p)
    p.add_argument("--arms", default="baseline,aug_shared,aug,aug_weights,aug_weights_soft")
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("check", help="oracle suite: gradients, Neumann, bilevel, Fisher")
    p.add_argument("--out", help="write the full JSON report here")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("report", help="aggregate run summaries to a mean/std table")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
