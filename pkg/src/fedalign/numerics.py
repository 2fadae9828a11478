"""Dense linear algebra helpers, similarity kernels, masked softmax and a
splittable random stream.

Matrices and vectors are plain float64 numpy arrays; the helpers here only
validate shapes and finiteness and then defer to numpy.
"""
from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import numpy as np

from .exceptions import (
    DegenerateInputError,
    EmptySupportError,
    ParameterError,
    ShapeError,
)

SIM_KINDS = ("cosine", "dot", "euclidean")


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} has non-finite entries")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ShapeError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} has non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def l2_normalize(v) -> np.ndarray:
    v = as_vector(v)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    return v / norm


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero row")
    return m / norms


def similarity(x, y, kind: str = "cosine", negate_euclidean: bool = True) -> float:
    """Similarity between two vectors.

    ``euclidean`` is a distance; with ``negate_euclidean`` (the default) its
    negation is returned so that larger always means more similar.
    """
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    if x.shape != y.shape:
        raise ShapeError(f"dimension mismatch {x.shape} vs {y.shape}")
    if kind == "cosine":
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        if nx == 0.0 or ny == 0.0:
            raise DegenerateInputError("cosine similarity with a zero vector")
        return float(x @ y / (nx * ny))
    if kind == "dot":
        return float(x @ y)
    if kind == "euclidean":
        dist = float(np.sqrt(np.sum((x - y) ** 2)))
        return -dist if negate_euclidean else dist
    raise ParameterError(f"unknown similarity kind {kind!r}")


def similarity_matrix(xs: np.ndarray, ys: np.ndarray, kind: str = "cosine",
                      negate_euclidean: bool = True) -> np.ndarray:
    """Pairwise ``similarity`` between the rows of ``xs`` and ``ys``."""
    if kind == "cosine":
        nx = np.linalg.norm(xs, axis=1, keepdims=True)
        ny = np.linalg.norm(ys, axis=1, keepdims=True)
        if np.any(nx == 0.0) or np.any(ny == 0.0):
            raise DegenerateInputError("cosine similarity with a zero vector")
        return (xs / nx) @ (ys / ny).T
    if kind == "dot":
        return xs @ ys.T
    if kind == "euclidean":
        dist = np.sqrt(np.sum((xs[:, None, :] - ys[None, :, :]) ** 2, axis=-1))
        return -dist if negate_euclidean else dist
    raise ParameterError(f"unknown similarity kind {kind!r}")


def masked_softmax(scores, masked: Iterable[int] = ()) -> np.ndarray:
    """Softmax over the unmasked entries; masked entries are exactly zero.

    Masking removes an index from the support entirely, which is the same as
    giving it a score of minus infinity.
    """
    scores = as_vector(scores, "scores")
    keep = np.ones(scores.shape[0], dtype=bool)
    for i in masked:
        keep[int(i)] = False
    if not keep.any():
        raise EmptySupportError("every index is masked")
    out = np.zeros_like(scores)
    s = scores[keep]
    e = np.exp(s - s.max())
    out[keep] = e / e.sum()
    return out


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)) and label >= 0:
        return int(label)
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Seeded random stream that can be split into independent children.

    A child depends only on the root seed and its label path, never on how many
    draws the parent has made, so ``Rng(7).split("client", 3)`` is the same
    stream wherever it is created.
    """

    def __init__(self, seed: int, path: Sequence = ()):
        if int(seed) < 0:
            raise ParameterError("seed must be nonnegative")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(_label_key(p) for p in self.path)
        )
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def split(self, *labels) -> "Rng":
        return Rng(self.seed, self.path + tuple(labels))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path!r})"

    # thin conveniences over the generator
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)


def gaussian(rng: Rng, mean: float = 0.0, std: float = 1.0) -> float:
    if std < 0:
        raise ParameterError("std must be nonnegative")
    if std == 0:
        return float(mean)
    return float(mean + std * rng.generator.standard_normal())


def dirichlet_sample(rng: Rng, alpha: float, k: int) -> np.ndarray:
    """Draw from the symmetric Dirichlet Dir(alpha, ..., alpha) on k coordinates.

    Gamma variates are built in log space (G(a) = G(a+1) * U**(1/a)) so that
    tiny concentrations such as 0.01 do not underflow to an all-zero draw.
    """
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if k == 1:
        return np.ones(1)
    g = rng.generator
    log_g = np.log(g.standard_gamma(alpha + 1.0, size=k)) + np.log1p(-g.random(size=k)) / alpha
    log_g -= log_g.max()
    w = np.exp(log_g)
    return w / w.sum()
