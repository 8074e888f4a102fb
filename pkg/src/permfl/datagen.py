"""Synthetic federations, CSV partitioning, and federation disk format.

The synthetic generator builds two equally sized client groups with mirrored
feature means and a shared random labeler; the second group's labels are
flipped, so one global linear model cannot serve both groups.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .objectives import Shard
from .prng import stream

EVAL_FRACTION = 0.2


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the two-group synthetic federation."""

    n_clients: int = 50
    dim: int = 60
    samples_per_client: int = 500
    mu1: float = 0.2
    mu2: float = -0.2
    mu_w: float = 0.1
    sigma_exponent: float = 1.2
    seed: int = 0

    def validate(self):
        if self.n_clients < 2 or self.n_clients % 2 != 0:
            raise ValueError(f"n_clients must be even and >= 2, got {self.n_clients}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.samples_per_client < 2:
            raise ValueError(f"samples_per_client must be >= 2, got {self.samples_per_client}")
        if self.sigma_exponent < 0:
            raise ValueError(f"sigma_exponent must be >= 0, got {self.sigma_exponent}")


@dataclass
class Federation:
    """A list of client shards plus optional provenance.

    group_of assigns each client an integer group index (the synthetic
    generator uses 0 for the first half, 1 for the mirrored half).
    """

    shards: list[Shard]
    group_of: np.ndarray | None = None
    true_w: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    @property
    def dim(self) -> int:
        return self.shards[0].dim

    def train_counts(self) -> np.ndarray:
        return np.array([sh.n_train for sh in self.shards], dtype=np.int64)


def _coord_stds(dim: int, exponent: float) -> np.ndarray:
    # Diagonal covariance sigma_kk = k^(-exponent), k counted from 1.
    return np.arange(1, dim + 1, dtype=np.float64) ** (-exponent / 2.0)


def _positional_eval_idx(n: int, fraction: float = EVAL_FRACTION) -> np.ndarray:
    n_eval = int(n * fraction)
    return np.arange(n - n_eval, n, dtype=np.int64)


def gen_synthetic(spec: SyntheticSpec) -> Federation:
    """Generate the two-group mirrored-label federation described above.

    Group A is the first half of the clients. All draws come from streams
    keyed by (seed, role, client), so each shard can be regenerated
    independently and the output never depends on iteration order.
    """
    spec.validate()
    stds = _coord_stds(spec.dim, spec.sigma_exponent)
    w = spec.mu_w + stream(spec.seed, "labeler").standard_normal(spec.dim) * stds

    shards: list[Shard] = []
    half = spec.n_clients // 2
    for i in range(spec.n_clients):
        in_a = i < half
        mu = spec.mu1 if in_a else spec.mu2
        X = mu + stream(spec.seed, "client", i).standard_normal(
            (spec.samples_per_client, spec.dim)) * stds
        s = X @ w
        # Zero-margin samples get the +1 label in both groups.
        y = np.where(s >= 0.0, 1.0, -1.0) if in_a else np.where(-s >= 0.0, 1.0, -1.0)
        shards.append(Shard(X, y, _positional_eval_idx(spec.samples_per_client)))

    meta = {
        "kind": "synthetic",
        "n_clients": str(spec.n_clients),
        "dim": str(spec.dim),
        "samples_per_client": str(spec.samples_per_client),
        "mu1": repr(spec.mu1),
        "mu2": repr(spec.mu2),
        "mu_w": repr(spec.mu_w),
        "sigma_exponent": repr(spec.sigma_exponent),
        "seed": str(spec.seed),
    }
    group_of = (np.arange(spec.n_clients) >= half).astype(np.int64)
    return Federation(shards, group_of, w, meta)


def gen_cluster_rows(n_rows: int, n_clusters: int, dim: int, spread: float = 4.0,
                     noise: float = 0.5, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian blobs with the cluster index as a real-valued label.

    Convenience source for partitioning experiments: partitioning these rows
    by label puts whole clusters on single clients. Cluster k is centered at
    spread * s * e_{k mod dim} with s alternating sign on wrap-around, so any
    two centers sit exactly spread * sqrt(2) (or 2 * spread) apart and no
    random pair of clusters collapses together.
    """
    if n_clusters < 2 or dim < 1 or n_rows < n_clusters:
        raise ValueError("need n_clusters >= 2, dim >= 1 and n_rows >= n_clusters")
    if n_clusters > 2 * dim:
        raise ValueError("need n_clusters <= 2 * dim for separated centers")
    rng = stream(seed, "clusters")
    centers = np.zeros((n_clusters, dim))
    for k in range(n_clusters):
        centers[k, k % dim] = spread if k < dim else -spread
    labels = np.arange(n_rows, dtype=np.int64) % n_clusters
    rows = centers[labels] + rng.standard_normal((n_rows, dim)) * noise
    return rows, labels.astype(np.float64)


def partition_csv(rows: np.ndarray, labels: np.ndarray, n_clients: int,
                  mode: str = "homogeneous", classes_per_client: int = 1,
                  seed: int = 0) -> Federation:
    """Split pre-loaded rows across clients.

    homogeneous: a seeded uniform shuffle cut into near-equal chunks, any
    remainder going to the lowest client indices.
    by-label: client c receives the label classes (c*k + t) mod C for
    t < k = classes_per_client; each class's rows are split evenly over the
    clients holding it.
    """
    rows = np.asarray(rows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if rows.ndim != 2 or labels.shape != (rows.shape[0],):
        raise ValueError("rows must be 2-D with one label per row")
    if n_clients < 1:
        raise ValueError(f"n_clients must be >= 1, got {n_clients}")
    n = rows.shape[0]

    if mode == "homogeneous":
        perm = stream(seed, "partition").permutation(n)
        base, rem = divmod(n, n_clients)
        member_lists = []
        pos = 0
        for c in range(n_clients):
            size = base + (1 if c < rem else 0)
            if size == 0:
                raise ValueError(f"insufficient samples: client {c} would be empty")
            member_lists.append(perm[pos:pos + size])
            pos += size
    elif mode == "by-label":
        classes = np.unique(labels)
        n_classes = classes.size
        if classes_per_client < 1:
            raise ValueError(f"classes_per_client must be >= 1, got {classes_per_client}")
        if classes_per_client > n_classes:
            raise ValueError(
                f"insufficient classes: requested {classes_per_client} per client, "
                f"only {n_classes} present")
        if n_clients * classes_per_client < n_classes:
            raise ValueError(
                f"insufficient clients: {n_clients} clients x {classes_per_client} classes "
                f"cannot cover {n_classes} classes")
        holders: list[list[int]] = [[] for _ in range(n_classes)]
        for c in range(n_clients):
            for t in range(classes_per_client):
                holders[(c * classes_per_client + t) % n_classes].append(c)
        member_lists = [[] for _ in range(n_clients)]
        for k, cls in enumerate(classes):
            members = np.nonzero(labels == cls)[0]
            members = members[stream(seed, "partition", k).permutation(members.size)]
            owners = holders[k]
            base, rem = divmod(members.size, len(owners))
            pos = 0
            for rank, c in enumerate(owners):
                size = base + (1 if rank < rem else 0)
                if size == 0:
                    raise ValueError(
                        f"insufficient samples: class {cls} has too few rows for its "
                        f"{len(owners)} clients")
                member_lists[c].extend(members[pos:pos + size].tolist())
                pos += size
        member_lists = [
            np.asarray(m, dtype=np.int64)[stream(seed, "partition-client", c).permutation(len(m))]
            for c, m in enumerate(member_lists)
        ]
    else:
        raise ValueError(f"unknown partition mode {mode!r}")

    shards = []
    for c, m in enumerate(member_lists):
        if len(m) < 5:
            raise ValueError(
                f"insufficient samples: client {c} got {len(m)} rows, need at "
                "least 5 for an evaluation split")
        shards.append(Shard(rows[m], labels[m], _positional_eval_idx(len(m))))
    meta = {
        "kind": "partitioned",
        "mode": mode,
        "classes_per_client": str(classes_per_client),
        "n_clients": str(n_clients),
        "seed": str(seed),
    }
    return Federation(shards, None, None, meta)


def load_csv(path: str | Path, label_col: str | int, has_header: bool = True):
    """Read a numeric CSV, returning (rows, labels) with the label column removed."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        records = [row for row in reader if row]
    if not records:
        raise ValueError(f"{path}: empty CSV")
    if has_header:
        header = records[0]
        records = records[1:]
        if isinstance(label_col, str):
            if label_col not in header:
                raise ValueError(f"{path}: no column named {label_col!r}")
            label_ix = header.index(label_col)
        else:
            label_ix = int(label_col)
    else:
        if isinstance(label_col, str):
            raise ValueError("label_col must be an index when the CSV has no header")
        label_ix = int(label_col)
    if not records:
        raise ValueError(f"{path}: no data rows")
    width = len(records[0])
    if label_ix < 0:
        label_ix += width
    if label_ix < 0 or label_ix >= width:
        raise ValueError(f"{path}: label column {label_col} out of range for width {width}")
    try:
        data = np.array([[float(v) for v in row] for row in records], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric cell ({exc})") from exc
    labels = data[:, label_ix]
    rows = np.delete(data, label_ix, axis=1)
    return rows, labels


MANIFEST_NAME = "federation.txt"


def save_federation(fed: Federation, out_dir: str | Path):
    """Write shard_<i>.csv files plus a plain key=value manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = fed.dim
    for i, sh in enumerate(fed.shards):
        with (out / f"shard_{i}.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"f{k}" for k in range(d)] + ["label", "split"])
            eval_set = set(sh.eval_idx.tolist())
            for r in range(sh.features.shape[0]):
                split = "eval" if r in eval_set else "train"
                writer.writerow([repr(float(v)) for v in sh.features[r]]
                                + [repr(float(sh.labels[r])), split])
    lines = [f"n_clients={fed.n_clients}", f"dim={d}"]
    for key in sorted(fed.meta):
        if key not in ("n_clients", "dim"):
            lines.append(f"{key}={fed.meta[key]}")
    if fed.group_of is not None:
        lines.append("group_of=" + ",".join(str(int(g)) for g in fed.group_of))
    if fed.true_w is not None:
        lines.append("true_w=" + ",".join(repr(float(v)) for v in fed.true_w))
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_federation(path: str | Path) -> Federation:
    """Load a federation written by save_federation."""
    root = Path(path)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise ValueError(f"{root}: missing {MANIFEST_NAME}")
    meta: dict[str, str] = {}
    for line in manifest.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{manifest}: malformed line {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    n_clients = int(meta.pop("n_clients"))
    meta.pop("dim", None)
    group_of = meta.pop("group_of", None)
    groups = (np.array([int(g) for g in group_of.split(",")], dtype=np.int64)
              if group_of else None)
    true_w_raw = meta.pop("true_w", None)
    true_w = (np.array([float(v) for v in true_w_raw.split(",")])
              if true_w_raw else None)

    shards = []
    for i in range(n_clients):
        fpath = root / f"shard_{i}.csv"
        if not fpath.is_file():
            raise ValueError(f"{root}: missing shard_{i}.csv")
        with fpath.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        d = len(header) - 2
        feats = np.array([[float(v) for v in row[:d]] for row in rows])
        labels = np.array([float(row[d]) for row in rows])
        eval_idx = np.array([r for r, row in enumerate(rows) if row[d + 1] == "eval"],
                            dtype=np.int64)
        shards.append(Shard(feats, labels, eval_idx))
    return Federation(shards, groups, true_w, meta)
