"""Synthetic blobs, label-skewed client partitions and CSV ingestion."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, feature_dim) float64
    labels: np.ndarray    # (n,) int64
    n_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    indices: np.ndarray
    source: Dataset

    def __len__(self):
        return self.indices.shape[0]

    @property
    def features(self):
        return self.source.features[self.indices]

    @property
    def labels(self):
        return self.source.labels[self.indices]

    def materialize(self) -> Dataset:
        return self.source.subset(self.indices)


@dataclass(frozen=True)
class PartitionSpec:
    n_genuine: int
    q: float
    seed: int


def make_blobs(C: int, per_class: int, feature_dim: int, spread: float, seed: int,
               center_scale: float = 1.0) -> Dataset:
    """``C`` isotropic Gaussian clusters, ``per_class`` points each, class-major order."""
    if C < 1 or per_class < 1 or feature_dim < 1:
        raise DataError("C, per_class and feature_dim must be positive")
    if spread < 0:
        raise DataError("spread must be non-negative")
    centers = stream(seed, "blob-centers").normal(0.0, center_scale, size=(C, feature_dim))
    noise = stream(seed, "blob-noise").normal(0.0, 1.0, size=(C, per_class, feature_dim))
    X = (centers[:, None, :] + spread * noise).reshape(C * per_class, feature_dim)
    y = np.repeat(np.arange(C, dtype=np.int64), per_class)
    return Dataset(X, y, C)


def split_per_class(data: Dataset, counts) -> list[Dataset]:
    """Cut each class's examples, in order, into consecutive chunks of ``counts``."""
    parts = [[] for _ in counts]
    for c in range(data.n_classes):
        idx = np.flatnonzero(data.labels == c)
        if len(idx) < sum(counts):
            raise DataError(f"class {c} has {len(idx)} examples, need {sum(counts)}")
        start = 0
        for p, n in enumerate(counts):
            parts[p].append(idx[start:start + n])
            start += n
    return [data.subset(np.concatenate(p)) for p in parts]


def client_groups(n_clients: int, C: int) -> list[np.ndarray]:
    """Contiguous id groups; the remainder goes to the first groups."""
    base, extra = divmod(n_clients, C)
    groups, start = [], 0
    for g in range(C):
        size = base + (1 if g < extra else 0)
        groups.append(np.arange(start, start + size))
        start += size
    return groups


def _assign(labels, C, groups, q, rng):
    n = labels.shape[0]
    home = rng.random(n) < q
    # uniform over the other C-1 groups
    shift = rng.integers(1, C, size=n) if C > 1 else np.zeros(n, dtype=np.int64)
    group = np.where(home, labels, (labels + shift) % C)
    owner = np.empty(n, dtype=np.int64)
    u = rng.random(n)
    for g in range(C):
        sel = group == g
        members = groups[g]
        owner[sel] = members[np.minimum((u[sel] * len(members)).astype(np.int64),
                                        len(members) - 1)]
    return owner


def partition_noniid(data: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    C = data.n_classes
    if not (1.0 / C - 1e-12 <= spec.q <= 1.0):
        raise DataError(f"q={spec.q} outside [1/C, 1] for C={C}")
    if spec.n_genuine < C:
        raise DataError(f"need at least C={C} genuine clients, got {spec.n_genuine}")
    groups = client_groups(spec.n_genuine, C)
    for attempt in range(100):
        rng = stream(spec.seed, "partition", attempt)
        owner = _assign(data.labels, C, groups, spec.q, rng)
        counts = np.bincount(owner, minlength=spec.n_genuine)
        if counts.min() > 0:
            order = np.argsort(owner, kind="stable")
            bounds = np.concatenate([[0], np.cumsum(counts)])
            return [ClientDataset(i, order[bounds[i]:bounds[i + 1]], data)
                    for i in range(spec.n_genuine)]
    raise DataError("partition left a client without data after 100 reseeds")


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Read ``f0,...,fk,label`` rows. Row numbers in errors count the header as row 1."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1].strip() != "label":
            raise DataError(f"{path}: header must end with 'label'")
        width = len(header)
        feats, labels = [], []
        for rowno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise DataError(f"{path}: row {rowno} has {len(row)} fields, expected {width}")
            try:
                feats.append([float(x) for x in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise DataError(f"{path}: row {rowno}: {exc}") from None
    y = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if y.size else 1
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        bad = int(np.flatnonzero((y < 0) | (y >= n_classes))[0]) + 2
        raise DataError(f"{path}: row {bad}: label outside [0, {n_classes})")
    X = np.asarray(feats, dtype=np.float64).reshape(len(labels), width - 1)
    return Dataset(X, y, n_classes)


def save_csv(data: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(data.feature_dim)] + ["label"])
        for x, y in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
