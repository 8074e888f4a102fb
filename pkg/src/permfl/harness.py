"""Experiment harness: run configuration, metrics files, summaries, heatmaps.

Every run writes into its --out directory:

  config_used     resolved key=value echo; re-running from it reproduces the
                  run byte for byte
  metrics.csv     per-(method, epoch, client) rows, deterministic bytes
  timings.csv     wall-clock per eval point (kept out of metrics.csv so that
                  repeated runs stay byte-identical)
  alpha_matrix.csv, dissimilarity.csv, alpha_heatmap.pgm for methods that
  estimate mixing weights, and summary.txt with final-epoch aggregates.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import BaselineResult, run_localized_fedavg, run_werm
from .datagen import (Federation, SyntheticSpec, gen_synthetic, load_csv,
                      load_federation, partition_csv)
from .discrepancy import (AlphaSolverConfig, estimate_all_alphas, local_sgd_global,
                          mean_dissimilarity, pairwise_dissimilarity)
from .objectives import LossModel, estimate_constants
from .shuffling import run_shuffling
from .single_loop import run_single_loop

METHODS = ("two-stage", "single-loop", "werm", "localized-fedavg")

# Synthetic benchmark settings used throughout the README walkthrough; the
# seed, method, and output directory are left to the caller.
BENCHMARK_PRESET = dict(
    model="logistic", reg=1e-2, clients=50, dim=60, samples=500,
    mu1=0.2, mu2=-0.2, mu_w=0.1, sigma_exponent=1.2,
    rounds=30, local_steps=8, lam=1.0, t_alpha=200,
    c_gamma=1.0, c_eta=1.0, fine_tune_steps=60, batch_size=1,
    diameter=2000.0, eval_every=10,
)

METRIC_COLUMNS = [
    "method", "epoch", "round", "client",
    "personalized_train_loss", "personalized_eval_loss",
    "personalized_eval_accuracy", "suboptimality", "messages_sent",
    "global_loss", "alpha_drift",
]


class ConfigError(Exception):
    """Invalid run configuration; carries the offending field name."""

    def __init__(self, fld: str, message: str):
        super().__init__(f"{fld}: {message}")
        self.field = fld


@dataclass
class RunConfig:
    """Flat description of one run; serializes to key=value lines."""

    method: str = "two-stage"
    out: str = "."
    seed: int | None = None
    model: str = "logistic"
    reg: float = 1e-2
    # data source: an exported federation dir, a raw CSV, or synthetic params
    data: str | None = None
    csv: str | None = None
    label_col: str | None = None
    csv_header: bool = True
    partition: str = "homogeneous"
    classes_per_client: int = 1
    clients: int = 50
    dim: int = 60
    samples: int = 500
    mu1: float = 0.2
    mu2: float = -0.2
    mu_w: float = 0.1
    sigma_exponent: float = 1.2
    # optimization
    rounds: int = 30
    local_steps: int = 5
    gamma: float | None = None
    eta: float | None = None
    c_gamma: float = 1.0
    c_eta: float = 1.0
    t_alpha: int = 200
    lam: float = 1.0
    batch_m: int | None = None
    fine_tune_steps: int = 50
    batch_size: int = 1
    diameter: float = 2000.0
    eval_every: int = 10
    alpha_trace: bool = False

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {', '.join(METHODS)}")
        if self.seed is None:
            raise ConfigError("seed", "required; runs never draw implicit entropy")
        if self.model not in ("logistic", "ridge"):
            raise ConfigError("model", "must be logistic or ridge")
        if self.reg < 0:
            raise ConfigError("reg", "must be >= 0")
        if self.data is not None and self.csv is not None:
            raise ConfigError("data", "give either data or csv, not both")
        if self.csv is not None and self.label_col is None:
            raise ConfigError("label_col", "required when csv is given")
        if self.partition not in ("homogeneous", "by-label"):
            raise ConfigError("partition", "must be homogeneous or by-label")
        for name, lo in (("rounds", 1), ("local_steps", 1), ("t_alpha", 1),
                         ("batch_size", 1), ("clients", 2), ("dim", 1),
                         ("samples", 2), ("classes_per_client", 1)):
            if getattr(self, name) < lo:
                raise ConfigError(name, f"must be >= {lo}")
        for name in ("gamma", "eta"):
            val = getattr(self, name)
            if val is not None and val <= 0:
                raise ConfigError(name, "must be positive when set")
        for name in ("c_gamma", "c_eta", "lam", "diameter"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be positive")
        if self.batch_m is not None and self.batch_m < 1:
            raise ConfigError("batch_m", "must be >= 1 when set")
        if self.fine_tune_steps < 0:
            raise ConfigError("fine_tune_steps", "must be >= 0")
        if self.eval_every < 0:
            raise ConfigError("eval_every", "must be >= 0")
        return self


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_BOOL_FIELDS = {"csv_header", "alpha_trace"}
_INT_FIELDS = {"seed", "classes_per_client", "clients", "dim", "samples", "rounds",
               "local_steps", "t_alpha", "batch_m", "fine_tune_steps", "batch_size",
               "eval_every"}
_FLOAT_FIELDS = {"reg", "mu1", "mu2", "mu_w", "sigma_exponent", "gamma", "eta",
                 "c_gamma", "c_eta", "lam", "diameter"}


def _coerce(name: str, raw: str):
    if name in _BOOL_FIELDS:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(name, f"expected a boolean, got {raw!r}")
    try:
        if name in _INT_FIELDS:
            return int(raw)
        if name in _FLOAT_FIELDS:
            return float(raw)
    except ValueError:
        raise ConfigError(name, f"could not parse {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """Parse key=value lines (with # comments) into typed config values."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError("config", f"line {lineno} is not key=value: {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(key, "unknown configuration key")
        out[key] = _coerce(key, value.strip())
    return out


def build_config(*layers: dict) -> RunConfig:
    """Merge defaults with successive override layers (later wins, None skipped)."""
    cfg = RunConfig()
    for layer in layers:
        for key, value in layer.items():
            if value is None:
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(key, "unknown configuration key")
            setattr(cfg, key, value)
    return cfg.validate()


def config_echo(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        lines.append(f"{f.name}={value!r}" if isinstance(value, float)
                     else f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def build_federation(cfg: RunConfig) -> Federation:
    if cfg.data is not None:
        return load_federation(cfg.data)
    if cfg.csv is not None:
        label_col: str | int = cfg.label_col
        if isinstance(label_col, str) and label_col.lstrip("-").isdigit():
            label_col = int(label_col)
        rows, labels = load_csv(cfg.csv, label_col, cfg.csv_header)
        return partition_csv(rows, labels, cfg.clients, cfg.partition,
                             cfg.classes_per_client, cfg.seed)
    spec = SyntheticSpec(cfg.clients, cfg.dim, cfg.samples, cfg.mu1, cfg.mu2,
                         cfg.mu_w, cfg.sigma_exponent, cfg.seed)
    return gen_synthetic(spec)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_metrics(path: Path, rows: list[dict]):
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([
                row["method"], row["epoch"], row["round"], row["client"],
                _fmt(row.get("personalized_train_loss")),
                _fmt(row.get("personalized_eval_loss")),
                _fmt(row.get("personalized_eval_accuracy")),
                _fmt(row.get("suboptimality")),
                row.get("messages_sent", 0),
                _fmt(row.get("global_loss")),
                _fmt(row.get("alpha_drift")),
            ])


def write_matrix_csv(path: Path, matrix: np.ndarray):
    """Write a dense matrix at 6 significant digits."""
    with path.open("w", newline="", encoding="utf-8") as fh:
        for row in np.atleast_2d(matrix):
            fh.write(",".join(f"{v:.6g}" for v in row) + "\n")


def read_matrix_csv(path: Path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            rows.append([float(v) for v in line.split(",")])
    return np.array(rows, dtype=np.float64)


def emit_heatmap(alphas: np.ndarray, out_dir: str | Path, stem: str = "alpha"):
    """Write <stem>_matrix.csv plus an ASCII PGM image scaled so max = white."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    alphas = np.asarray(alphas, dtype=np.float64)
    write_matrix_csv(out / f"{stem}_matrix.csv", alphas)
    peak = float(alphas.max())
    if peak > 0:
        pixels = np.rint(255.0 * alphas / peak).astype(np.int64)
    else:
        pixels = np.zeros_like(alphas, dtype=np.int64)
    h, w = pixels.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(int(p)) for p in row) for row in pixels]
    (out / f"{stem}_heatmap.pgm").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out / f"{stem}_matrix.csv", out / f"{stem}_heatmap.pgm"


@dataclass
class RunArtifacts:
    """In-memory view of one finished run."""

    method: str
    rounds: int
    messages: int
    final_eval_accuracy: np.ndarray
    final_eval_loss: np.ndarray
    metrics_rows: list[dict]
    alphas: np.ndarray | None = None
    dissimilarity: np.ndarray | None = None
    extra_summary: list[str] = field(default_factory=list)


def _baseline_rows(result: BaselineResult, final_epoch: int) -> list[dict]:
    rows = []
    for ev in result.history:
        if ev.round == result.rounds:
            continue  # the final row below reports the finished model
        for i in range(ev.train_loss.size):
            rows.append(dict(method=result.name, epoch=ev.round, round=ev.round,
                             client=i, personalized_train_loss=ev.train_loss[i],
                             personalized_eval_loss=ev.eval_loss[i],
                             personalized_eval_accuracy=ev.eval_accuracy[i],
                             messages_sent=ev.messages))
    for i in range(result.train_loss.size):
        rows.append(dict(method=result.name, epoch=final_epoch, round=result.rounds,
                         client=i, personalized_train_loss=result.train_loss[i],
                         personalized_eval_loss=result.eval_loss[i],
                         personalized_eval_accuracy=result.eval_accuracy[i],
                         messages_sent=result.messages))
    return rows


def execute_run(cfg: RunConfig, federation: Federation | None = None,
                out_dir: str | Path | None = None) -> RunArtifacts:
    """Run one method end to end and write its artifact files."""
    cfg.validate()
    fed = federation if federation is not None else build_federation(cfg)
    model = LossModel(cfg.model, cfg.reg)
    if model.kind == "logistic":
        for i, sh in enumerate(fed.shards):
            if not np.all(np.abs(sh.labels) == 1.0):
                raise ConfigError("model", f"logistic needs +/-1 labels; shard {i} differs")
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    shards = fed.shards
    constants = estimate_constants(model, shards)
    t0 = time.monotonic_ns()

    common = dict(gamma=cfg.gamma, c_gamma=cfg.c_gamma, seed=cfg.seed,
                  diameter=cfg.diameter, batch_size=cfg.batch_size,
                  constants=constants, eval_every=cfg.eval_every)
    art: RunArtifacts
    if cfg.method == "werm":
        res = run_werm(shards, model, rounds=cfg.rounds, local_steps=cfg.local_steps,
                       **common)
        art = RunArtifacts(res.name, res.rounds, res.messages, res.eval_accuracy,
                           res.eval_loss, _baseline_rows(res, cfg.rounds))
    elif cfg.method == "localized-fedavg":
        res = run_localized_fedavg(shards, model, rounds=cfg.rounds,
                                   local_steps=cfg.local_steps,
                                   fine_tune_steps=cfg.fine_tune_steps, **common)
        art = RunArtifacts(res.name, res.rounds, res.messages, res.eval_accuracy,
                           res.eval_loss, _baseline_rows(res, cfg.rounds))
    elif cfg.method == "two-stage":
        stage1 = local_sgd_global(shards, model, rounds=cfg.rounds,
                                  local_steps=cfg.local_steps, gamma=cfg.gamma,
                                  c_gamma=cfg.c_gamma, seed=cfg.seed,
                                  diameter=cfg.diameter, batch_size=cfg.batch_size,
                                  constants=constants)
        z = pairwise_dissimilarity(shards, model, stage1.w)
        acfg = AlphaSolverConfig(lam=cfg.lam, t_alpha=cfg.t_alpha)
        alphas = estimate_all_alphas(shards, model, stage1.w, acfg, z=z)
        shuffle = run_shuffling(shards, model, alphas, epochs=cfg.rounds,
                                local_steps=cfg.local_steps, eta=cfg.eta,
                                c_eta=cfg.c_eta, seed=cfg.seed, diameter=cfg.diameter,
                                batch_size=cfg.batch_size, constants=constants,
                                eval_every=cfg.eval_every)
        rows = []
        for st in shuffle.history:
            for i in range(len(shards)):
                rows.append(dict(method="two-stage", epoch=st.epoch,
                                 round=stage1.rounds + st.rounds, client=i,
                                 personalized_train_loss=st.train_loss[i],
                                 personalized_eval_loss=st.eval_loss[i],
                                 personalized_eval_accuracy=st.eval_accuracy[i],
                                 suboptimality=None if st.suboptimality is None
                                 else st.suboptimality[i],
                                 messages_sent=stage1.messages + st.messages))
        final = shuffle.history[-1]
        zbar = mean_dissimilarity(z)
        art = RunArtifacts("two-stage", stage1.rounds + shuffle.rounds,
                           stage1.messages + shuffle.messages,
                           final.eval_accuracy, final.eval_loss, rows,
                           alphas=alphas, dissimilarity=z,
                           extra_summary=[
                               f"mean dissimilarity per client: min {zbar.min():.6g} "
                               f"max {zbar.max():.6g}"])
    else:  # single-loop
        res = run_single_loop(shards, model, epochs=cfg.rounds,
                              local_steps=cfg.local_steps, lam=cfg.lam,
                              t_alpha=cfg.t_alpha, eta=cfg.eta, gamma=cfg.gamma,
                              c_eta=cfg.c_eta, c_gamma=cfg.c_gamma,
                              batch_m=cfg.batch_m, seed=cfg.seed,
                              diameter=cfg.diameter, batch_size=cfg.batch_size,
                              constants=constants, eval_every=cfg.eval_every,
                              keep_alpha_trace=cfg.alpha_trace)
        diag = {d.epoch: d for d in res.diagnostics}
        rows = []
        for st in res.history:
            d = diag.get(st.epoch)
            for i in range(len(shards)):
                rows.append(dict(method="single-loop", epoch=st.epoch,
                                 round=st.rounds, client=i,
                                 personalized_train_loss=st.train_loss[i],
                                 personalized_eval_loss=st.eval_loss[i],
                                 personalized_eval_accuracy=st.eval_accuracy[i],
                                 messages_sent=st.messages,
                                 global_loss=None if d is None else d.global_loss,
                                 alpha_drift=None if d is None else d.alpha_drift))
        final = res.history[-1]
        art = RunArtifacts("single-loop", res.rounds, res.messages,
                           final.eval_accuracy, final.eval_loss, rows,
                           alphas=res.alphas)
        if cfg.alpha_trace:
            trace_dir = out / "alpha_trace"
            trace_dir.mkdir(exist_ok=True)
            for r, snap in enumerate(res.alpha_trace):
                write_matrix_csv(trace_dir / f"epoch_{r + 1}.csv", snap)

    elapsed = time.monotonic_ns() - t0
    write_metrics(out / "metrics.csv", art.metrics_rows)
    with (out / "timings.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "elapsed_ns"])
        w.writerow([art.method, elapsed])
    (out / "config_used").write_text(config_echo(cfg), encoding="utf-8")
    if art.alphas is not None:
        emit_heatmap(art.alphas, out)
    if art.dissimilarity is not None:
        write_matrix_csv(out / "dissimilarity.csv", art.dissimilarity)
    summary = summarize([out / "metrics.csv"])
    (out / "summary.txt").write_text(
        summary.text + "".join(f"{line}\n" for line in art.extra_summary),
        encoding="utf-8")
    return art


@dataclass
class Summary:
    per_method: dict
    text: str


def summarize(metric_files: Sequence[str | Path]) -> Summary:
    """Final-epoch mean and std of personalized accuracy and loss per method.

    With several files (one per seed) the std is taken across the per-file
    means. Clients missing from a method's final epoch raise an error naming
    every absent (method, client) pair.
    """
    per_file: dict[str, list[tuple[float, float]]] = {}
    missing: list[tuple[str, int]] = []
    for path in metric_files:
        rows = list(csv.DictReader(Path(path).open(encoding="utf-8")))
        if not rows:
            raise ValueError(f"{path}: empty metrics file")
        methods = sorted({r["method"] for r in rows})
        for method in methods:
            mrows = [r for r in rows if r["method"] == method]
            clients = {int(r["client"]) for r in mrows}
            last = max(int(r["epoch"]) for r in mrows)
            final_rows = {int(r["client"]): r for r in mrows if int(r["epoch"]) == last}
            for c in sorted(clients):
                if c not in final_rows:
                    missing.append((method, c))
            if any(m == method for m, _ in missing):
                continue
            acc = np.array([float(final_rows[c]["personalized_eval_accuracy"])
                            for c in sorted(clients)])
            lo = np.array([float(final_rows[c]["personalized_eval_loss"])
                           for c in sorted(clients)])
            per_file.setdefault(method, []).append((float(acc.mean()), float(lo.mean())))
    if missing:
        pairs = ", ".join(f"({m}, {c})" for m, c in missing)
        raise ValueError(f"missing final-epoch metrics for: {pairs}")

    per_method = {}
    lines = ["method,seeds,mean_eval_accuracy,std_eval_accuracy,mean_eval_loss,std_eval_loss"]
    text_lines = []
    for method in sorted(per_file):
        accs = np.array([a for a, _ in per_file[method]])
        losses = np.array([l for _, l in per_file[method]])
        entry = dict(seeds=len(accs), mean_eval_accuracy=float(accs.mean()),
                     std_eval_accuracy=float(accs.std()),
                     mean_eval_loss=float(losses.mean()),
                     std_eval_loss=float(losses.std()))
        per_method[method] = entry
        lines.append(f"{method},{entry['seeds']},{entry['mean_eval_accuracy']:.6g},"
                     f"{entry['std_eval_accuracy']:.6g},{entry['mean_eval_loss']:.6g},"
                     f"{entry['std_eval_loss']:.6g}")
        text_lines.append(
            f"{method}: eval accuracy {entry['mean_eval_accuracy']:.4f} "
            f"(std {entry['std_eval_accuracy']:.4f}), eval loss "
            f"{entry['mean_eval_loss']:.4f} (std {entry['std_eval_loss']:.4f}) "
            f"over {entry['seeds']} file(s)")
    summary_text = "\n".join(text_lines) + "\n"
    return Summary(per_method, summary_text)


def summary_csv(summary: Summary) -> str:
    lines = ["method,seeds,mean_eval_accuracy,std_eval_accuracy,mean_eval_loss,std_eval_loss"]
    for method in sorted(summary.per_method):
        e = summary.per_method[method]
        lines.append(f"{method},{e['seeds']},{e['mean_eval_accuracy']:.6g},"
                     f"{e['std_eval_accuracy']:.6g},{e['mean_eval_loss']:.6g},"
                     f"{e['std_eval_loss']:.6g}")
    return "\n".join(lines) + "\n"


def parity_rounds(cfg: RunConfig, n_clients: int) -> dict[str, int]:
    """Communication rounds per method matching cfg.rounds epochs of shuffling."""
    total = cfg.rounds * (n_clients + 1)
    return {"two-stage": total, "single-loop": total, "werm": total,
            "localized-fedavg": total}


def compare(cfg: RunConfig, methods: Sequence[str], *,
            allow_unequal_budget: bool = False) -> dict[str, RunArtifacts]:
    """Run several methods on one federation at matched communication budgets.

    Baselines get cfg.rounds * (N + 1) rounds so that every method exchanges
    the same number of communication rounds; pass allow_unequal_budget to
    keep cfg.rounds for everything instead.
    """
    for m in methods:
        if m not in METHODS:
            raise ConfigError("method", f"unknown method {m!r}")
    fed = build_federation(cfg)
    budget = parity_rounds(cfg, fed.n_clients)
    out = Path(cfg.out)
    results: dict[str, RunArtifacts] = {}
    for method in methods:
        sub = dataclasses.replace(cfg, method=method, out=str(out / method))
        if method in ("werm", "localized-fedavg") and not allow_unequal_budget:
            sub.rounds = budget[method]
        results[method] = execute_run(sub, federation=fed, out_dir=out / method)
    if not allow_unequal_budget:
        rounds = {m: r.rounds for m, r in results.items()}
        if len(set(rounds.values())) > 1:
            raise ConfigError("rounds", f"communication budgets differ: {rounds}; "
                                        "pass allow_unequal_budget to override")
    summary = summarize([out / m / "metrics.csv" for m in methods])
    (out / "comparison.txt").write_text(summary.text, encoding="utf-8")
    (out / "comparison.csv").write_text(summary_csv(summary), encoding="utf-8")
    return results
