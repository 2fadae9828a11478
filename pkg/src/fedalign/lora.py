"""Low-rank adapter algebra and the binary delta checkpoint format."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import FormatError, ParameterError, ShapeError
from .numerics import Rng, as_matrix

DEFAULT_GAMMA = 0.25

MAGIC = b"FALD"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sHH")
_DIMS = struct.Struct("<II")
_F64 = struct.Struct("<d")


@dataclass
class LoraDelta:
    """Trainable factor pair; the weight change it represents is ``gamma * b @ a``."""

    a: np.ndarray  # (r, d2)
    b: np.ndarray  # (d1, r)
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        self.a = as_matrix(self.a, "a")
        self.b = as_matrix(self.b, "b")
        if self.a.shape[0] != self.b.shape[1]:
            raise ShapeError(f"rank mismatch: a {self.a.shape}, b {self.b.shape}")
        if self.rank > min(self.b.shape[0], self.a.shape[1]):
            raise ParameterError("rank exceeds min(d1, d2)")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ParameterError(f"gamma must be finite and positive, got {self.gamma}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def shape(self) -> tuple:
        return (self.b.shape[0], self.a.shape[1])

    def copy(self) -> "LoraDelta":
        return LoraDelta(self.a.copy(), self.b.copy(), self.gamma)


@dataclass
class DenseDelta:
    """An effective weight change of full shape (d1, d2)."""

    w: np.ndarray

    def __post_init__(self):
        self.w = as_matrix(self.w, "w")

    @property
    def shape(self) -> tuple:
        return self.w.shape

    @classmethod
    def zeros(cls, d1: int, d2: int) -> "DenseDelta":
        return cls(np.zeros((d1, d2)))


@dataclass
class LayerWeights:
    w0: np.ndarray
    init_offset: DenseDelta = None
    lora: Optional[LoraDelta] = None

    def __post_init__(self):
        self.w0 = as_matrix(self.w0, "w0")
        if self.init_offset is None:
            self.init_offset = DenseDelta.zeros(*self.w0.shape)
        if self.init_offset.shape != self.w0.shape:
            raise ShapeError(f"offset {self.init_offset.shape} != w0 {self.w0.shape}")
        if self.lora is not None and self.lora.shape != self.w0.shape:
            raise ShapeError(f"lora {self.lora.shape} != w0 {self.w0.shape}")

    @property
    def shape(self) -> tuple:
        return self.w0.shape


def init_lora(d1: int, d2: int, r: int, gamma: float, rng: Rng) -> LoraDelta:
    """Kaiming-uniform ``a`` (fan-in d2) and zero ``b``, so the delta starts at zero."""
    if r < 1 or r > min(d1, d2):
        raise ParameterError(f"rank {r} invalid for a {d1}x{d2} matrix")
    bound = math.sqrt(6.0 / d2)
    a = rng.uniform(-bound, bound, size=(r, d2))
    return LoraDelta(a=a, b=np.zeros((d1, r)), gamma=gamma)


def effective_delta(delta: LoraDelta) -> DenseDelta:
    return DenseDelta(delta.gamma * (delta.b @ delta.a))


def compose_weight(layer: LayerWeights) -> np.ndarray:
    w = layer.w0 + layer.init_offset.w
    if layer.lora is not None:
        w = w + effective_delta(layer.lora).w
    return w


def total_delta(layer: LayerWeights) -> DenseDelta:
    """Cumulative change of a layer relative to its frozen backbone weight."""
    if layer.lora is None:
        return DenseDelta(layer.init_offset.w.copy())
    return DenseDelta(layer.init_offset.w + effective_delta(layer.lora).w)


def linear_combine(deltas: Sequence[DenseDelta], coeffs) -> DenseDelta:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 1 or len(deltas) != coeffs.shape[0] or not deltas:
        raise ShapeError(f"{len(deltas)} deltas vs coefficients of shape {coeffs.shape}")
    shape = deltas[0].shape
    out = np.zeros(shape)
    for d, c in zip(deltas, coeffs):
        if d.shape != shape:
            raise ShapeError(f"delta shape {d.shape} != {shape}")
        out += c * d.w
    return DenseDelta(out)


def factored_average(deltas: Sequence[LoraDelta], coeffs) -> LoraDelta:
    """Combine ``a`` and ``b`` factors separately.

    Biased: sum(c_j B_j) @ sum(c_j A_j) is not sum(c_j B_j A_j). Kept only for
    comparison with the exact dense combination.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if len(deltas) != coeffs.shape[0] or not deltas:
        raise ShapeError("deltas and coefficients differ in length")
    a = sum(c * d.a for d, c in zip(deltas, coeffs))
    b = sum(c * d.b for d, c in zip(deltas, coeffs))
    return LoraDelta(a=a, b=b, gamma=deltas[0].gamma)


def lora_param_count(d1: int, d2: int, r: int) -> int:
    if min(d1, d2, r) < 1:
        raise ParameterError("dimensions must be positive")
    return r * (d1 + d2)


def stack_param_count(shapes: Sequence[tuple], r: int, lora_start: int) -> int:
    """LoRA parameters of a block stack where blocks ``lora_start..`` are adapted."""
    return sum(lora_param_count(d1, d2, r) for d1, d2 in shapes[lora_start:])


# -- serialization -----------------------------------------------------------

def serialize_matrices(mats: Sequence[np.ndarray], gamma: float = 1.0) -> bytes:
    parts = [_HEAD.pack(MAGIC, FORMAT_VERSION, len(mats))]
    for m in mats:
        m = np.ascontiguousarray(m, dtype="<f8")
        parts.append(_DIMS.pack(*m.shape))
        parts.append(m.tobytes(order="C"))
    parts.append(_F64.pack(gamma))
    return b"".join(parts)


def deserialize_matrices(data: bytes) -> tuple:
    """Inverse of ``serialize_matrices``; returns ``(matrices, gamma)``."""
    if len(data) < _HEAD.size:
        raise FormatError("truncated header")
    magic, version, count = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    pos = _HEAD.size
    mats = []
    for _ in range(count):
        if len(data) < pos + _DIMS.size:
            raise FormatError("truncated matrix header")
        rows, cols = _DIMS.unpack_from(data, pos)
        pos += _DIMS.size
        nbytes = rows * cols * 8
        if rows == 0 or cols == 0 or len(data) < pos + nbytes + _F64.size:
            raise FormatError(f"payload too short for a {rows}x{cols} matrix")
        mats.append(np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos)
                    .reshape(rows, cols).astype(np.float64))
        pos += nbytes
    if len(data) != pos + _F64.size:
        raise FormatError("payload length does not match header dimensions")
    (gamma,) = _F64.unpack_from(data, pos)
    return mats, gamma


def serialize_delta(delta) -> bytes:
    if isinstance(delta, LoraDelta):
        return serialize_matrices([delta.a, delta.b], delta.gamma)
    if isinstance(delta, DenseDelta):
        return serialize_matrices([delta.w], 1.0)
    raise TypeError(f"cannot serialize {type(delta).__name__}")


def deserialize_delta(data: bytes):
    mats, gamma = deserialize_matrices(data)
    if len(mats) == 2:
        return LoraDelta(a=mats[0], b=mats[1], gamma=gamma)
    if len(mats) == 1:
        return DenseDelta(mats[0])
    raise FormatError(f"expected 1 or 2 matrices, found {len(mats)}")
