"""Command line entry points.

Subcommands:

  gen-data     materialize a federation (synthetic or partitioned CSV) on disk
  run          execute one training method and write its artifact directory
  compare      run several methods on one federation at matched budgets
  solve-alpha  solve mixing weights for a dissimilarity matrix on stdin/file

Exit status: 0 on success, 2 for configuration errors (the message names the
offending field), 1 for numeric failures such as a diverging run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .datagen import SyntheticSpec, gen_synthetic, load_csv, partition_csv, save_federation
from .discrepancy import AlphaSolverConfig, solve_alpha_gd, solve_alpha_kkt
from .harness import (BENCHMARK_PRESET, ConfigError, RunConfig, build_config, compare,
                      execute_run, parse_config_text, read_matrix_csv)

_CONFIG_FLAGS = [
    ("--model", str, "loss family: logistic or ridge"),
    ("--reg", float, "l2 regularization strength"),
    ("--data", str, "directory written by gen-data"),
    ("--csv", str, "raw csv to partition into clients"),
    ("--label-col", str, "label column name or index for --csv"),
    ("--partition", str, "homogeneous or by-label"),
    ("--classes-per-client", int, "label classes per client for by-label"),
    ("--clients", int, "number of clients"),
    ("--dim", int, "feature dimension for synthetic data"),
    ("--samples", int, "samples per client for synthetic data"),
    ("--mu1", float, "first-group feature mean"),
    ("--mu2", float, "second-group feature mean"),
    ("--mu-w", float, "labeler mean"),
    ("--sigma-exponent", float, "coordinate variance decay exponent"),
    ("--rounds", int, "communication rounds (epochs for shuffling methods)"),
    ("--local-steps", int, "local SGD steps per round"),
    ("--gamma", float, "global step size override"),
    ("--eta", float, "personalized step size override"),
    ("--c-gamma", float, "multiplier on the default global step size"),
    ("--c-eta", float, "multiplier on the default personalized step size"),
    ("--t-alpha", int, "mixing-weight solver iterations"),
    ("--lam", float, "mixing-weight regularization"),
    ("--batch-m", int, "global mini-batch size for single-loop"),
    ("--fine-tune-steps", int, "local steps for localized-fedavg"),
    ("--batch-size", int, "local SGD batch size"),
    ("--diameter", float, "feasible-ball diameter"),
    ("--eval-every", int, "record metrics every this many epochs (0: final only)"),
]


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def _add_config_flags(p: argparse.ArgumentParser, with_method: bool = True):
    if with_method:
        p.add_argument("--method", choices=("two-stage", "single-loop", "werm",
                                            "localized-fedavg"))
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--preset", choices=("benchmark",),
                   help="start from the built-in benchmark configuration")
    p.add_argument("--seed", type=int, help="run seed (required)")
    p.add_argument("--out", help="output directory (required)")
    for flag, typ, desc in _CONFIG_FLAGS:
        p.add_argument(flag, type=typ, help=desc, dest=_dest(flag))
    p.add_argument("--csv-no-header", action="store_true",
                   help="csv file has no header row")
    p.add_argument("--alpha-trace", action="store_true",
                   help="write per-epoch mixing weights (single-loop)")


def _layers_from_args(args) -> RunConfig:
    layers = []
    if args.preset == "benchmark":
        layers.append(dict(BENCHMARK_PRESET))
    if args.config:
        layers.append(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    flag_layer = {}
    for flag, _, _ in _CONFIG_FLAGS:
        name = _dest(flag)
        value = getattr(args, name, None)
        if value is not None:
            flag_layer[name] = value
    for name in ("method", "seed", "out"):
        value = getattr(args, name, None)
        if value is not None:
            flag_layer[name] = value
    if getattr(args, "csv_no_header", False):
        flag_layer["csv_header"] = False
    if getattr(args, "alpha_trace", False):
        flag_layer["alpha_trace"] = True
    layers.append(flag_layer)
    cfg = build_config(*layers)
    if getattr(args, "out", None) is None and not any("out" in l for l in layers[:-1]):
        raise ConfigError("out", "required")
    return cfg


def _cmd_gen_data(args) -> int:
    if args.csv is not None:
        if args.label_col is None:
            raise ConfigError("label_col", "required when csv is given")
        label_col: str | int = args.label_col
        if label_col.lstrip("-").isdigit():
            label_col = int(label_col)
        rows, labels = load_csv(args.csv, label_col, not args.csv_no_header)
        fed = partition_csv(rows, labels, args.clients, args.partition,
                            args.classes_per_client, args.seed)
    else:
        spec = SyntheticSpec(args.clients, args.dim, args.samples, args.mu1,
                             args.mu2, args.mu_w, args.sigma_exponent, args.seed)
        fed = gen_synthetic(spec)
    save_federation(fed, args.out)
    counts = fed.train_counts()
    print(f"wrote {fed.n_clients} shards (dim {fed.dim}, "
          f"train sizes {counts.min()}..{counts.max()}) to {args.out}")
    return 0


def _cmd_run(args) -> int:
    cfg = _layers_from_args(args)
    art = execute_run(cfg)
    acc = art.final_eval_accuracy
    print(f"{art.method}: rounds {art.rounds}, messages {art.messages}, "
          f"mean eval accuracy {acc.mean():.4f}")
    print(f"artifacts in {cfg.out}")
    return 0


def _cmd_compare(args) -> int:
    cfg = _layers_from_args(args)
    methods = args.methods.split(",") if args.methods else list(
        ("two-stage", "single-loop", "werm", "localized-fedavg"))
    methods = [m.strip() for m in methods if m.strip()]
    results = compare(cfg, methods, allow_unequal_budget=args.allow_unequal_budget)
    for method in methods:
        art = results[method]
        print(f"{method}: rounds {art.rounds}, mean eval accuracy "
              f"{art.final_eval_accuracy.mean():.4f}")
    print(f"artifacts in {cfg.out}")
    return 0


def _cmd_solve_alpha(args) -> int:
    if args.matrix == "-":
        text = sys.stdin.read()
        rows = [[float(v) for v in line.split(",")]
                for line in text.splitlines() if line.strip()]
        z = np.array(rows, dtype=np.float64)
    else:
        z = read_matrix_csv(args.matrix)
    if z.ndim != 2 or z.shape[0] != z.shape[1]:
        raise ConfigError("matrix", f"need a square matrix, got shape {z.shape}")
    n = z.shape[0]
    if args.counts:
        counts = np.array([int(v) for v in args.counts.split(",")], dtype=np.int64)
        if counts.size != n or (counts <= 0).any():
            raise ConfigError("counts", f"need {n} positive integers")
    else:
        counts = np.ones(n, dtype=np.int64)
    if args.exact:
        alphas = np.stack([solve_alpha_kkt(z[i], counts, args.lam) for i in range(n)])
    else:
        acfg = AlphaSolverConfig(lam=args.lam, t_alpha=args.t_alpha)
        alphas = np.stack([solve_alpha_gd(z[i], counts, acfg) for i in range(n)])
    for row in alphas:
        print(", ".join(f"{v:.6g}" for v in row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="permfl",
        description="Personalized federated learning with estimated mixing weights.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a federation to disk")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--clients", type=int, default=50)
    g.add_argument("--dim", type=int, default=60)
    g.add_argument("--samples", type=int, default=500)
    g.add_argument("--mu1", type=float, default=0.2)
    g.add_argument("--mu2", type=float, default=-0.2)
    g.add_argument("--mu-w", type=float, default=0.1)
    g.add_argument("--sigma-exponent", type=float, default=1.2)
    g.add_argument("--csv", help="partition this csv instead of sampling")
    g.add_argument("--label-col")
    g.add_argument("--csv-no-header", action="store_true")
    g.add_argument("--partition", choices=("homogeneous", "by-label"),
                   default="homogeneous")
    g.add_argument("--classes-per-client", type=int, default=1)
    g.set_defaults(func=_cmd_gen_data)

    r = sub.add_parser("run", help="train one method")
    _add_config_flags(r)
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("compare", help="train several methods at matched budgets")
    _add_config_flags(c, with_method=False)
    c.add_argument("--methods",
                   help="comma-separated subset of two-stage,single-loop,"
                        "werm,localized-fedavg (default: all)")
    c.add_argument("--allow-unequal-budget", action="store_true",
                   help="keep --rounds for baselines instead of matching budgets")
    c.set_defaults(func=_cmd_compare)

    s = sub.add_parser("solve-alpha", help="solve mixing weights for a matrix")
    s.add_argument("matrix", help="csv of pairwise dissimilarities, or - for stdin")
    s.add_argument("--counts", help="comma-separated per-client sample counts")
    s.add_argument("--lam", type=float, default=1.0)
    s.add_argument("--t-alpha", type=int, default=200)
    s.add_argument("--exact", action="store_true",
                   help="use the closed-form solver instead of gradient descent")
    s.set_defaults(func=_cmd_solve_alpha)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
