"""Synthetic datasets rewarding expert specialization, CSV ingestion, batching.

``gen_subspace_clusters`` places each class inside its own random linear
subspace (pairwise orthogonal when they fit), so a router + specialist
experts can carve the input space cleanly. ``gen_piecewise_regression`` is
the regression counterpart: a different linear map per input region.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DataLoadError
from .linalg import Rng


@dataclass
class Dataset:
    X: np.ndarray           # (N, d_raw)
    y: np.ndarray           # class indices or real targets
    kind: str               # "classification" or "regression"
    n_classes: int = 0      # valid for classification
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.shape[0] < 1:
            raise ContractViolation("dataset must contain at least one row")
        if not np.all(np.isfinite(self.X)):
            raise ContractViolation("features contain non-finite values")
        if self.kind == "classification":
            yi = self.y.astype(np.int64)
            if yi.min() < 0 or yi.max() >= self.n_classes:
                raise ContractViolation("class indices out of range")

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass
class BatchPlan:
    seed: int
    batch_size: int
    epochs: int = 1
    shuffle: bool = True


def gen_subspace_clusters(rng: Rng, K: int, d_raw: int, n_per_cluster: int,
                          subspace_dim: int, noise_std: float = 0.0) -> Dataset:
    """K classes, class k living in its own ``subspace_dim``-dim subspace.

    Bases come from one QR factorization, so they are exactly orthogonal when
    K * subspace_dim <= d_raw; otherwise each basis is sampled independently
    and the dataset carries an ``overlapping_subspaces`` warning flag.
    """
    if K < 2:
        raise ContractViolation("need at least K=2 clusters")
    if subspace_dim > d_raw:
        raise ContractViolation("subspace_dim cannot exceed d_raw")
    overlapping = K * subspace_dim > d_raw
    if overlapping:
        bases = []
        for _ in range(K):
            q, _ = np.linalg.qr(rng.gen.normal(size=(d_raw, subspace_dim)))
            bases.append(q)
    else:
        q, _ = np.linalg.qr(rng.gen.normal(size=(d_raw, K * subspace_dim)))
        bases = [q[:, k * subspace_dim:(k + 1) * subspace_dim] for k in range(K)]
    xs, ys = [], []
    for k in range(K):
        # coefficients with unit mean so classes have distinct in-subspace centroids
        z = rng.gen.normal(1.0, 1.0, size=(n_per_cluster, subspace_dim))
        pts = z @ bases[k].T
        if noise_std > 0:
            pts = pts + rng.gen.normal(0.0, noise_std, size=pts.shape)
        xs.append(pts)
        ys.append(np.full(n_per_cluster, k, dtype=np.int64))
    return Dataset(np.vstack(xs), np.concatenate(ys), "classification", K,
                   {"overlapping_subspaces": overlapping, "bases": bases})


def gen_piecewise_regression(rng: Rng, pieces: int, d_raw: int, n: int,
                             noise_std: float = 0.0) -> Dataset:
    """Targets follow a region-specific linear map; regions are the cells of
    a nearest-anchor partition (boundaries are hyperplane bisectors)."""
    if pieces < 2:
        raise ContractViolation("need at least 2 pieces")
    anchors = rng.gen.normal(size=(pieces, d_raw))
    maps = rng.gen.normal(size=(pieces, d_raw)) / np.sqrt(d_raw)
    X = rng.gen.normal(size=(n, d_raw))
    dist = ((X[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2)
    region = np.argmin(dist, axis=1)
    y = np.einsum("nd,nd->n", X, maps[region])
    if noise_std > 0:
        y = y + rng.gen.normal(0.0, noise_std, size=n)
    return Dataset(X, y, "regression", 0, {"regions": region})


def write_csv(dataset: Dataset, path) -> None:
    """Full-precision decimal CSV: feature columns f0..f{d-1} plus target."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        d = dataset.X.shape[1]
        writer.writerow([f"f{i}" for i in range(d)] + ["target"])
        for row, target in zip(dataset.X, dataset.y):
            tgt = int(target) if dataset.kind == "classification" else repr(float(target))
            writer.writerow([repr(float(v)) for v in row] + [tgt])


def load_csv(path, feature_columns: list[str], target_column: str,
             kind: str = "classification") -> Dataset:
    """Strict CSV ingestion; errors carry row and column coordinates."""
    try:
        f = open(path, newline="")
    except OSError as exc:
        raise DataLoadError(f"cannot open {path}: {exc}") from None
    with f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataLoadError("no data rows: file is empty") from None
        for col in feature_columns + [target_column]:
            if col not in header:
                raise DataLoadError(f"missing column {col!r}")
        fidx = [header.index(c) for c in feature_columns]
        tidx = header.index(target_column)
        xs, ys = [], []
        for rownum, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataLoadError(f"row {rownum}: expected {len(header)} cells, got {len(row)}")
            try:
                xs.append([float(row[i]) for i in fidx])
            except ValueError:
                bad = next(i for i in fidx if not _is_float(row[i]))
                raise DataLoadError(
                    f"row {rownum}, column {header[bad]!r}: unparsable cell {row[bad]!r}") from None
            cell = row[tidx]
            if kind == "classification":
                try:
                    ys.append(int(cell))
                except ValueError:
                    raise DataLoadError(
                        f"row {rownum}, column {target_column!r}: unparsable cell {cell!r}") from None
            else:
                if not _is_float(cell):
                    raise DataLoadError(
                        f"row {rownum}, column {target_column!r}: unparsable cell {cell!r}")
                ys.append(float(cell))
    if not xs:
        raise DataLoadError("no data rows")
    X = np.asarray(xs, dtype=np.float64)
    if kind == "classification":
        y = np.asarray(ys, dtype=np.int64)
        return Dataset(X, y, "classification", int(y.max()) + 1)
    return Dataset(X, np.asarray(ys, dtype=np.float64), "regression")


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def batches(dataset: Dataset, plan: BatchPlan):
    """Deterministic per-epoch shuffled mini-batches; final partial batch kept."""
    if plan.batch_size > dataset.n:
        raise ContractViolation("batch_size cannot exceed dataset size")
    for epoch in range(plan.epochs):
        if plan.shuffle:
            perm = np.random.default_rng([plan.seed, epoch]).permutation(dataset.n)
        else:
            perm = np.arange(dataset.n)
        for start in range(0, dataset.n, plan.batch_size):
            idx = perm[start:start + plan.batch_size]
            yield dataset.X[idx], dataset.y[idx]
