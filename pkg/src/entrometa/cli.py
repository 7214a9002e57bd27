"""Command-line front end.

Subcommands: ``entropy`` (budget calculator), ``bounds`` (theorem sweep to
CSV), ``cluster`` (label a point matrix), ``stability`` (SVCCA between two
representation CSVs), ``train`` (fit one model, save a checkpoint),
``run`` (one experiment from a JSON config), ``sweep`` (grid of overrides).

Exit codes: 0 success, 1 partial failure (some result rows failed),
2 invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import bounds as bounds_mod
from . import harness
from .cluster import DBSCAN, KMeans
from .entropy import EntropyBudget, expected_correct, noise_probability
from .metalearn import save_checkpoint
from .stability import svcca

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


def _parse_override(raw: str) -> tuple:
    if "=" not in raw:
        raise harness.ConfigError(f"override {raw!r} is not of the form path=value")
    path, text = raw.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text  # bare strings stay strings
    return path.strip(), value


def _load_config(path: str, overrides) -> harness.ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise harness.ConfigError(f"cannot read config {path}: {exc}") from None
    if overrides:
        data = harness.apply_overrides(data, dict(_parse_override(o) for o in overrides))
    return harness.config_from_dict(data)


def _cmd_entropy(args) -> int:
    budget = EntropyBudget(args.m, args.C, args.H if args.H is not None
                           else harness.entropy_for_noise(args.noise, args.m, args.C))
    print(f"m={budget.m} C={budget.C} H={budget.H:.6f} nats")
    print(f"p_correct={budget.p_correct:.6f}")
    print(f"expected_correct={expected_correct(budget):.6f}")
    print(f"noise_probability={noise_probability(budget):.6f}")
    return EXIT_OK


def _cmd_bounds(args) -> int:
    out = sys.stdout if args.output is None else open(args.output, "w")
    try:
        H_max = args.m * math.log(min(args.C1, args.C2))
        print("H,wct_bound,meta_bound,ratio", file=out)
        for H in np.linspace(0.0, H_max, args.grid_points):
            inp = bounds_mod.BoundInputs(
                m=args.m, C1=args.C1, C2=args.C2, k=args.k, H=float(H),
                n=args.n, beta=args.beta, beta_tilde=args.beta_tilde,
                M=args.M, delta=args.delta,
            )
            print(
                f"{float(H)!r},{bounds_mod.wct_bound(inp)!r},"
                f"{bounds_mod.meta_bound(inp)!r},{bounds_mod.dominant_term_ratio(inp)!r}",
                file=out,
            )
        check = bounds_mod.corollary_check(args.C1, args.C2, args.k)
        print(f"# corollary holds={check.holds} lhs={check.lhs} rhs={check.rhs}",
              file=out)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _cmd_cluster(args) -> int:
    X = np.loadtxt(args.input, delimiter="," if args.input.endswith(".csv") else None)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if args.algorithm == "dbscan":
        labels = DBSCAN(eps=args.eps, min_samples=args.min_samples).fit_predict(X)
    else:
        labels = KMeans(n_clusters=args.k, seed=args.seed).fit_predict(X)
    out = sys.stdout if args.output is None else open(args.output, "w")
    try:
        for lab in labels:
            print(int(lab), file=out)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _cmd_stability(args) -> int:
    X = np.loadtxt(args.x, delimiter=",")
    Y = np.loadtxt(args.y, delimiter=",")
    print(f"{svcca(X, Y, args.threshold)!r}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load_config(args.config, args.set)
    seed = config.seeds[0]
    X, y, X_train, y_local, train_c, test_c = harness._prepare_pool(config, seed)
    if args.method in harness.UNSUPERVISED_METHODS:
        unsup_mask = np.isin(y, train_c) | (y == -1)
        model = harness._train_unsupervised(args.method, config, X[unsup_mask], seed)
    else:
        y_annot, _ = harness._annotate(y_local, len(train_c), args.noise, seed)
        model = harness._train_supervised(
            args.method, config, X_train, y_annot, len(train_c), seed, None, 0
        )
    save_checkpoint(model.params_, args.output)
    print(f"saved checkpoint to {args.output}")
    return EXIT_OK


def _result_exit_code(rows) -> int:
    failed = sum(1 for r in rows if r["status"] != "ok")
    if failed == 0:
        return EXIT_OK
    if failed == len(rows):
        print("all cells failed", file=sys.stderr)
    return EXIT_PARTIAL


def _cmd_run(args) -> int:
    config = _load_config(args.config, args.set)
    result = harness.run_experiment(config)
    for row in result["rows"]:
        print(f"{row['method']} {row['grid']}={row['value']} seed={row['seed']} "
              f"metric={row['metric']} status={row['status']}")
    return _result_exit_code(result["rows"])


def _cmd_sweep(args) -> int:
    config = _load_config(args.config, args.set)
    try:
        with open(args.grid) as fh:
            grid = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise harness.ConfigError(f"cannot read grid {args.grid}: {exc}") from None
    result = harness.sweep(config, grid)
    print(f"{len(result['rows'])} rows")
    return _result_exit_code(result["rows"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entrometa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("entropy", help="annotation budget calculator")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--C", type=int, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--H", type=float, help="entropy budget in nats")
    group.add_argument("--noise", type=float, help="expected label-noise fraction")
    p.set_defaults(func=_cmd_entropy)

    p = sub.add_parser("bounds", help="generalization-bound sweep (CSV)")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--C1", type=int, required=True)
    p.add_argument("--C2", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--n", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--beta-tilde", dest="beta_tilde", type=float, default=None)
    p.add_argument("--M", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--grid-points", type=int, default=8)
    p.add_argument("--output", default=None)
    p.set_defaults(func=_cmd_bounds)

    p = sub.add_parser("cluster", help="label a whitespace/CSV point matrix")
    p.add_argument("--input", required=True)
    p.add_argument("--algorithm", choices=["dbscan", "kmeans"], default="dbscan")
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--min-samples", dest="min_samples", type=int, default=15)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default=None)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("stability", help="SVCCA between two representation CSVs")
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--threshold", type=float, default=0.99)
    p.set_defaults(func=_cmd_stability)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--method", default="maml",
                   choices=list(harness.SUPERVISED_METHODS) + list(harness.UNSUPERVISED_METHODS))
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--output", required=True)
    p.add_argument("--set", action="append", default=[],
                   help="dotted-path override, e.g. trainer.alpha=0.1")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("run", help="run one experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[])
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="cross-product of config overrides")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, help="JSON file: {path: [values...]}")
    p.add_argument("--set", action="append", default=[])
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
