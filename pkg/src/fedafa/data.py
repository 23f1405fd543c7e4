"""Synthetic benchmark data, long-tail subsampling, Dirichlet partitioning and
class-balanced sampling."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

DATASET_MAGIC = b"FDST"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

RngLike = Union[int, np.random.Generator, None]


def as_rng(seed: RngLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise ValueError(f"{len(self.features)} feature rows vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


def concat(parts: list[Dataset]) -> Dataset:
    return Dataset(np.concatenate([p.features for p in parts]),
                   np.concatenate([p.labels for p in parts]), parts[0].num_classes)


def class_means(num_classes: int, dim: int, seed: int) -> np.ndarray:
    """Cluster centres drawn uniformly on the unit sphere."""
    rng = np.random.default_rng([seed, 0])
    m = rng.standard_normal((num_classes, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def generate_synthetic(num_classes: int, dim: int, n_per_class: int, cluster_spread: float,
                       seed: int, sample_seed: Optional[int] = None) -> Dataset:
    """Isotropic Gaussian clusters around unit-sphere centres, grouped by class.

    ``sample_seed`` (default: ``seed``) only drives the noise, so two calls that
    share ``seed`` but differ in ``sample_seed`` draw fresh samples of the same
    clusters (used for held-out test data).
    """
    if num_classes < 2 or dim < 2:
        raise ValueError("need num_classes >= 2 and dim >= 2")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    means = class_means(num_classes, dim, seed)
    rng = np.random.default_rng([seed if sample_seed is None else sample_seed, 1])
    labels = np.repeat(np.arange(num_classes), n_per_class)
    x = means[labels] + cluster_spread * rng.standard_normal((len(labels), dim))
    return Dataset(x, labels, num_classes)


def longtail_counts(n_per_class: int, num_classes: int, imbalance_factor: float) -> list[int]:
    """round(rho**j * n_c) with rho = imbalance_factor ** (-1 / (C - 1))."""
    if imbalance_factor < 1:
        raise ValueError("imbalance_factor must be >= 1")
    rho = imbalance_factor ** (-1.0 / (num_classes - 1))
    counts = [int(math.floor(rho ** j * n_per_class + 0.5)) for j in range(num_classes)]
    if min(counts) < 1:
        raise ValueError(
            f"tail class would keep 0 samples (n_c={n_per_class}, factor={imbalance_factor}); "
            "use a larger per-class count")
    return counts


def apply_longtail(dataset: Dataset, imbalance_factor: float, seed: RngLike = 0) -> Dataset:
    """Subsample a balanced dataset so class j keeps round(rho**j * n_c) samples.

    Class 0 is the head. Kept samples are a seeded random subset of each class.
    """
    counts = dataset.class_counts()
    if len(set(counts.tolist())) != 1:
        raise ValueError(f"apply_longtail expects a balanced dataset, got class counts {counts.tolist()}")
    keep = longtail_counts(int(counts[0]), dataset.num_classes, imbalance_factor)
    rng = as_rng(seed)
    idx = []
    for c, k in enumerate(keep):
        members = np.flatnonzero(dataset.labels == c)
        idx.append(np.sort(rng.permutation(members)[:k]))
    return dataset.subset(np.concatenate(idx))


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    imbalance_factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.imbalance_factor < 1:
            raise ValueError("imbalance_factor must be >= 1")


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer split of ``total`` following ``proportions``; sums to ``total`` exactly."""
    raw = total * np.asarray(proportions, dtype=np.float64)
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        # stable ordering keeps ties deterministic (lower index first)
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def partition_indices(labels: np.ndarray, num_classes: int, spec: PartitionSpec,
                      max_redraws: int = 100) -> list[np.ndarray]:
    """Per-class Dirichlet(alpha) split of sample indices across clients."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot partition an empty dataset")
    rng = np.random.default_rng([spec.seed, 2])
    K = spec.num_clients
    for _ in range(max_redraws):
        shards: list[list[np.ndarray]] = [[] for _ in range(K)]
        for c in range(num_classes):
            members = rng.permutation(np.flatnonzero(labels == c))
            if len(members) == 0:
                continue
            p = rng.dirichlet(np.full(K, spec.alpha))
            cuts = np.cumsum(largest_remainder(len(members), p))[:-1]
            for k, part in enumerate(np.split(members, cuts)):
                shards[k].append(part)
        out = [np.sort(np.concatenate(s)) if s else np.empty(0, dtype=np.int64) for s in shards]
        if all(len(o) > 0 for o in out):
            return out
    raise RuntimeError(f"a client stayed empty after {max_redraws} Dirichlet redraws; "
                       "use fewer clients or a larger alpha")


def dirichlet_partition(dataset: Dataset, spec: PartitionSpec) -> list[Dataset]:
    return [dataset.subset(idx) for idx in partition_indices(dataset.labels, dataset.num_classes, spec)]


def train_test_split(dataset: Dataset, test_fraction: float, seed: RngLike) -> tuple[Dataset, Dataset]:
    """Stratified split; class c contributes round(test_fraction * n_c) test samples."""
    rng = as_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        members = rng.permutation(np.flatnonzero(dataset.labels == c))
        n_test = int(math.floor(test_fraction * len(members) + 0.5))
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])
    return (dataset.subset(np.sort(np.concatenate(train_idx))),
            dataset.subset(np.sort(np.concatenate(test_idx))))


def random_oversample(dataset: Dataset, seed: RngLike) -> Dataset:
    """Duplicate random minority samples until every present class has the local max count."""
    counts = dataset.class_counts()
    target = counts.max()
    rng = as_rng(seed)
    extra = []
    for c in np.flatnonzero(counts):
        need = target - counts[c]
        if need:
            extra.append(rng.choice(np.flatnonzero(dataset.labels == c), size=need, replace=True))
    if not extra:
        return dataset
    idx = np.concatenate([np.arange(len(dataset))] + extra)
    return dataset.subset(idx)


def balanced_indices(labels: np.ndarray, batch_size: int, rng: np.random.Generator,
                     num_classes: Optional[int] = None) -> Iterator[np.ndarray]:
    """Endless stream of index batches: uniform class among present ones, then
    uniform sample within that class (with replacement)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot sample from an empty dataset")
    order = np.argsort(labels, kind="stable")
    present, starts, counts = np.unique(labels[order], return_index=True, return_counts=True)
    while True:
        k = rng.integers(len(present), size=batch_size)
        within = np.floor(rng.random(batch_size) * counts[k]).astype(np.int64)
        yield order[starts[k] + within]


def balanced_batches(dataset: Dataset, batch_size: int, seed: RngLike) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Class-balanced (x, y) batches realising the balanced view of a local dataset."""
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    for idx in balanced_indices(dataset.labels, batch_size, as_rng(seed)):
        yield dataset.features[idx], dataset.labels[idx]


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch of shuffled mini-batch indices (last batch may be short)."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


# -- file format --------------------------------------------------------------

def save_dataset(dataset: Dataset, path) -> None:
    n, d = dataset.features.shape
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, d, dataset.num_classes)
    Path(path).write_bytes(header + dataset.features.astype("<f4").tobytes()
                           + dataset.labels.astype("<u4").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n, d, C = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    expected = _HEADER.size + 4 * n * d + 4 * n
    if len(raw) != expected:
        raise ValueError(f"{path}: file is {len(raw)} bytes but header implies {expected}")
    x = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    y = np.frombuffer(raw, dtype="<u4", count=n, offset=_HEADER.size + 4 * n * d)
    if n and int(y.max()) >= C:
        raise ValueError(f"{path}: label {int(y.max())} out of range for {C} classes")
    return Dataset(x.copy(), y.astype(np.int64), C)
