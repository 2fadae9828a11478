"""Synthetic datasets, client partitions (IID, Dirichlet, pathological) and
partition statistics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .exceptions import GenerationError, ParameterError
from .numerics import Rng, dirichlet_sample


@dataclass
class Dataset:
    x: np.ndarray  # (n, d_in)
    y: np.ndarray  # (n,) integer labels
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.ndim != 1 or self.x.shape[0] != self.y.shape[0]:
            raise ParameterError(f"bad dataset shapes x={self.x.shape} y={self.y.shape}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ParameterError("labels out of range")

    def __len__(self):
        return self.y.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


class GaussianMixture:
    """Class means at pairwise distance >= separation * noise_std."""

    def __init__(self, num_classes: int, d_in: int, separation: float, noise_std: float,
                 rng: Rng, max_tries: int = 200):
        if num_classes < 2:
            raise ParameterError("need at least 2 classes")
        if separation < 0 or noise_std < 0:
            raise ParameterError("separation and noise_std must be nonnegative")
        self.num_classes = num_classes
        self.d_in = d_in
        self.noise_std = noise_std
        scale = noise_std if noise_std > 0 else 1.0
        min_dist = separation * scale
        for attempt in range(max_tries):
            dirs = rng.split("means", attempt).normal(size=(num_classes, d_in))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            means = dirs * min_dist
            gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)
            gaps[np.diag_indices(num_classes)] = np.inf
            if gaps.min() >= min_dist:
                self.means = means
                return
        raise GenerationError(
            f"could not place {num_classes} means {min_dist:g} apart in {d_in} dims")

    def sample(self, n_per_class: int, rng: Rng) -> Dataset:
        y = np.repeat(np.arange(self.num_classes), n_per_class)
        x = self.means[y]
        if self.noise_std > 0:
            x = x + rng.normal(0.0, self.noise_std, size=x.shape)
        return Dataset(x, y, self.num_classes)


def gen_gaussian_mixture(num_classes, n_per_class, d_in, separation, noise_std, rng: Rng) -> Dataset:
    mix = GaussianMixture(num_classes, d_in, separation, noise_std, rng.split("mixture"))
    return mix.sample(n_per_class, rng.split("samples"))


def make_train_test(num_classes, n_train, n_test, d_in, separation, noise_std, rng: Rng):
    mix = GaussianMixture(num_classes, d_in, separation, noise_std, rng.split("mixture"))
    return mix.sample(n_train, rng.split("train")), mix.sample(n_test, rng.split("test"))


def load_dataset_csv(path_or_buf, num_classes: Optional[int] = None) -> Dataset:
    """Read a feature table with header ``x0..x{d-1},y``."""
    if hasattr(path_or_buf, "read"):
        rows = list(csv.reader(path_or_buf))
    else:
        with open(path_or_buf, newline="") as fh:
            rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[-1] != "y":
        raise ParameterError("last CSV column must be 'y'")
    x = np.array([[float(v) for v in r[:-1]] for r in body])
    y = np.array([int(r[-1]) for r in body])
    if num_classes is None:
        num_classes = int(y.max()) + 1
    return Dataset(x, y, num_classes)


# -- partitions ------------------------------------------------------------------

@dataclass
class PartitionSpec:
    kind: str = "dir"  # iid | dir | path
    num_clients: int = 5
    alpha: float = 0.1
    classes_per_client: int = 2
    seed: int = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "num_clients": self.num_clients, "alpha": self.alpha,
                "classes_per_client": self.classes_per_client, "seed": self.seed}


@dataclass
class Partition:
    assignments: List[np.ndarray]
    counts: np.ndarray  # (K, C)
    spec: Optional[PartitionSpec] = None
    flags: Dict[str, list] = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def client_labels(self, k: int) -> set:
        return {int(c) for c in np.nonzero(self.counts[k])[0]}

    def to_json(self) -> str:
        return json.dumps({
            "spec": self.spec.to_dict() if self.spec else None,
            "assignments": [a.tolist() for a in self.assignments],
            "counts": self.counts.tolist(),
            "flags": self.flags,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Partition":
        obj = json.loads(text)
        spec = PartitionSpec(**obj["spec"]) if obj.get("spec") else None
        return cls([np.asarray(a, dtype=np.int64) for a in obj["assignments"]],
                   np.asarray(obj["counts"], dtype=np.int64), spec, obj.get("flags", {}))


def _finish(dataset: Dataset, assignments, spec) -> Partition:
    assignments = [np.asarray(a, dtype=np.int64) for a in assignments]
    counts = np.stack([
        np.bincount(dataset.y[a], minlength=dataset.num_classes) if a.size
        else np.zeros(dataset.num_classes, dtype=np.int64)
        for a in assignments
    ])
    empty = [k for k, a in enumerate(assignments) if a.size == 0]
    flags = {"empty_clients": empty} if empty else {}
    return Partition(assignments, counts, spec, flags)


def partition_iid(dataset: Dataset, num_clients: int, rng: Rng) -> Partition:
    if num_clients < 1:
        raise ParameterError("num_clients must be >= 1")
    perm = rng.permutation(len(dataset))
    shards = np.array_split(perm, num_clients)
    return _finish(dataset, shards, PartitionSpec("iid", num_clients))


def largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing exactly to ``total`` that track ``shares * total``."""
    raw = shares * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def partition_dirichlet(dataset: Dataset, num_clients: int, alpha: float, rng: Rng,
                        return_shares: bool = False):
    """Per class, split its samples across clients by a Dir(alpha) draw."""
    if not alpha > 0:
        raise ParameterError("alpha must be positive")
    if num_clients < 1:
        raise ParameterError("num_clients must be >= 1")
    buckets = [[] for _ in range(num_clients)]
    shares = np.zeros((dataset.num_classes, num_clients))
    for c in range(dataset.num_classes):
        crng = rng.split("class", c)
        idx = np.nonzero(dataset.y == c)[0]
        q = dirichlet_sample(crng.split("q"), alpha, num_clients)
        shares[c] = q
        n_k = largest_remainder(q, idx.size)
        idx = idx[crng.split("order").permutation(idx.size)]
        start = 0
        for k in range(num_clients):
            buckets[k].extend(idx[start:start + n_k[k]].tolist())
            start += n_k[k]
    part = _finish(dataset, [sorted(b) for b in buckets],
                   PartitionSpec("dir", num_clients, alpha=alpha))
    return (part, shares) if return_shares else part


def partition_pathological(dataset: Dataset, num_clients: int, classes_per_client: int,
                           rng: Rng) -> Partition:
    """Disjoint class groups; each client receives every sample of its classes."""
    if classes_per_client < 1 or num_clients < 1:
        raise ParameterError("classes_per_client and num_clients must be >= 1")
    if classes_per_client * num_clients > dataset.num_classes:
        raise ParameterError(
            f"{num_clients} clients x {classes_per_client} classes exceeds "
            f"{dataset.num_classes} classes")
    order = rng.permutation(dataset.num_classes)
    assignments = []
    for k in range(num_clients):
        mine = order[k * classes_per_client:(k + 1) * classes_per_client]
        assignments.append(np.nonzero(np.isin(dataset.y, mine))[0])
    return _finish(dataset, assignments,
                   PartitionSpec("path", num_clients, classes_per_client=classes_per_client))


def make_partition(dataset: Dataset, spec: PartitionSpec) -> Partition:
    rng = Rng(spec.seed).split("partition")
    if spec.kind == "iid":
        part = partition_iid(dataset, spec.num_clients, rng)
    elif spec.kind == "dir":
        part = partition_dirichlet(dataset, spec.num_clients, spec.alpha, rng)
    elif spec.kind == "path":
        part = partition_pathological(dataset, spec.num_clients, spec.classes_per_client, rng)
    else:
        raise ParameterError(f"unknown partition kind {spec.kind!r}")
    part.spec = spec
    return part


def build_local_testset(test: Dataset, client_labels) -> Dataset:
    keep = np.isin(test.y, sorted(client_labels))
    return test.subset(np.nonzero(keep)[0])


@dataclass
class PartitionStats:
    histogram: np.ndarray  # (K, C)
    shard_sizes: np.ndarray
    max_class_share: np.ndarray  # nan for empty clients
    effective_classes: np.ndarray  # inverse Simpson index, nan for empty clients
    empty_clients: List[int]

    def heatmap_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["client"] + [f"class_{c}" for c in range(self.histogram.shape[1])])
        for k, row in enumerate(self.histogram):
            w.writerow([k] + [int(v) for v in row])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "shard_sizes": self.shard_sizes.tolist(),
            "max_class_share": [None if math.isnan(v) else round(float(v), 6)
                                for v in self.max_class_share],
            "effective_classes": [None if math.isnan(v) else round(float(v), 6)
                                  for v in self.effective_classes],
            "empty_clients": self.empty_clients,
        }


def partition_stats(partition: Partition, dataset: Dataset) -> PartitionStats:
    hist = np.stack([
        np.bincount(dataset.y[a], minlength=dataset.num_classes) if a.size
        else np.zeros(dataset.num_classes, dtype=np.int64)
        for a in partition.assignments
    ])
    sizes = hist.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = hist / sizes[:, None]
        max_share = np.where(sizes > 0, p.max(axis=1), np.nan)
        eff = np.where(sizes > 0, 1.0 / np.sum(p ** 2, axis=1), np.nan)
    empty = [int(k) for k in np.nonzero(sizes == 0)[0]]
    return PartitionStats(hist, sizes, max_share, eff, empty)
