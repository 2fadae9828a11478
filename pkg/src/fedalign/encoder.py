"""Toy block encoders standing in for the image and text towers.

Each encoder is a stack of ``num_blocks`` dense blocks ``h = act(W h_prev)``
followed by a frozen projection and L2 normalization. Blocks at index
``lora_start`` and above carry a LoRA adapter; everything else is frozen.
Gradients are computed analytically, batched over rows.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .exceptions import ContractError, ParameterError, ShapeError
from .lora import (
    DEFAULT_GAMMA,
    DenseDelta,
    LayerWeights,
    compose_weight,
    init_lora,
    total_delta,
)
from .numerics import Rng, l2_normalize_rows

ACTIVATIONS = ("tanh", "identity")
STYLES = ("ST", "GT")

_state_ids = itertools.count()


@dataclass(frozen=True)
class EncoderConfig:
    num_blocks: int = 12
    d_in: int = 16
    d_hidden: int = 32
    d_embed: int = 16
    activation: str = "tanh"
    lora_start: int = 2
    rank: int = 4
    gamma: float = DEFAULT_GAMMA
    hidden_gain: float = 0.08  # scale of the orthogonal hidden blocks

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ParameterError("num_blocks must be >= 1")
        if min(self.d_in, self.d_hidden, self.d_embed) < 1:
            raise ParameterError("dimensions must be positive")
        if self.d_embed > self.d_hidden:
            raise ParameterError("d_embed must not exceed d_hidden")
        if not 0 <= self.lora_start <= self.num_blocks:
            raise ParameterError(f"lora_start must lie in [0, {self.num_blocks}]")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.rank < 1:
            raise ParameterError("rank must be >= 1")
        if not self.gamma > 0:
            raise ParameterError("gamma must be positive")
        if not self.hidden_gain > 0:
            raise ParameterError("hidden_gain must be positive")
        dims = [min(self.block_shape(i)) for i in self.adapted]
        if dims and self.rank > min(dims):
            raise ParameterError(f"rank {self.rank} exceeds adapted layer dimensions")

    def block_shape(self, i: int) -> tuple:
        return (self.d_hidden, self.d_in if i == 0 else self.d_hidden)

    @property
    def adapted(self) -> range:
        return range(self.lora_start, self.num_blocks)

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderState:
    """Frozen backbone blocks and projection plus per-block LoRA adapters."""

    def __init__(self, config: EncoderConfig, blocks: List[LayerWeights], projection: np.ndarray):
        if len(blocks) != config.num_blocks:
            raise ShapeError("block count does not match config")
        for i, blk in enumerate(blocks):
            if blk.shape != config.block_shape(i):
                raise ShapeError(f"block {i} has shape {blk.shape}, expected {config.block_shape(i)}")
            if i < config.lora_start and blk.lora is not None:
                raise ParameterError(f"block {i} is below lora_start and may not carry LoRA")
        if projection.shape != (config.d_embed, config.d_hidden):
            raise ShapeError(f"projection shape {projection.shape}")
        self.config = config
        self.blocks = blocks
        self.projection = projection
        self.version = 0
        self._id = next(_state_ids)

    def copy(self) -> "EncoderState":
        blocks = [
            LayerWeights(b.w0, DenseDelta(b.init_offset.w.copy()),
                         None if b.lora is None else b.lora.copy())
            for b in self.blocks
        ]
        return EncoderState(self.config, blocks, self.projection)

    def params(self) -> List[np.ndarray]:
        """Trainable arrays in the order ``[a_l, b_l, a_{l+1}, b_{l+1}, ...]``."""
        out = []
        for i in self.config.adapted:
            lora = self.blocks[i].lora
            if lora is not None:
                out.extend([lora.a, lora.b])
        return out

    def touch(self):
        """Mark parameters as changed; forward caches taken before are stale."""
        self.version += 1

    def reset_lora(self, rng: Rng):
        cfg = self.config
        for i in cfg.adapted:
            d1, d2 = cfg.block_shape(i)
            self.blocks[i].lora = init_lora(d1, d2, cfg.rank, cfg.gamma, rng.split("lora", i))
        self.touch()

    def set_offsets(self, offsets: List[DenseDelta]):
        adapted = list(self.config.adapted)
        if len(offsets) != len(adapted):
            raise ShapeError(f"expected {len(adapted)} layer deltas, got {len(offsets)}")
        for i, off in zip(adapted, offsets):
            if off.shape != self.blocks[i].shape:
                raise ShapeError(f"layer {i}: delta {off.shape} vs weight {self.blocks[i].shape}")
            self.blocks[i].init_offset = DenseDelta(off.w.copy())
        self.touch()

    def layer_deltas(self) -> List[DenseDelta]:
        """Cumulative effective delta of each adapted layer."""
        return [total_delta(self.blocks[i]) for i in self.config.adapted]


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: List[np.ndarray]
    post: List[np.ndarray]
    weights: List[np.ndarray]
    raw_embedding: np.ndarray
    embedding: np.ndarray
    state_id: int = -1
    version: int = -1


def build_backbone(config: EncoderConfig, rng: Rng) -> EncoderState:
    """Seeded frozen backbone: Gaussian first block, scaled orthogonal hidden blocks.

    The small hidden gain keeps the deep tanh stack near its linear regime, so
    rank-r adapters move the embedding noticeably within a few Adam steps.
    """
    blocks = []
    for i in range(config.num_blocks):
        d1, d2 = config.block_shape(i)
        brng = rng.split("block", i)
        if i == 0:
            w0 = brng.normal(0.0, 1.0 / np.sqrt(d2), size=(d1, d2))
        else:
            q, r = np.linalg.qr(brng.normal(size=(d1, d2)))
            w0 = config.hidden_gain * q * np.sign(np.diag(r))
        blocks.append(LayerWeights(w0))
    projection = rng.split("projection").normal(
        0.0, 1.0 / np.sqrt(config.d_hidden), size=(config.d_embed, config.d_hidden))
    return EncoderState(config, blocks, projection)


def build_encoder(config: EncoderConfig, backbone_rng: Rng, lora_rng: Optional[Rng] = None) -> EncoderState:
    state = build_backbone(config, backbone_rng)
    if lora_rng is not None:
        state.reset_lora(lora_rng)
    return state


def _act(kind, a):
    return np.tanh(a) if kind == "tanh" else a


def forward(state: EncoderState, x):
    """Embed one input vector or a batch of row vectors.

    Returns ``(embedding, cache)``; embeddings are unit-norm rows (or a single
    unit vector when ``x`` is 1-D).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    cfg = state.config
    if xb.ndim != 2 or xb.shape[1] != cfg.d_in:
        raise ShapeError(f"expected input of width {cfg.d_in}, got shape {x.shape}")
    h = xb
    pre, post, weights = [], [], []
    for blk in state.blocks:
        w = compose_weight(blk)
        a = h @ w.T
        h = _act(cfg.activation, a)
        weights.append(w)
        pre.append(a)
        post.append(h)
    e = h @ state.projection.T
    z = l2_normalize_rows(e)
    cache = ForwardCache(xb, pre, post, weights, e, z, state._id, state.version)
    return (z[0] if single else z), cache


def embed(state: EncoderState, x) -> np.ndarray:
    return forward(state, x)[0]


def backward(state: EncoderState, cache: ForwardCache, grad_embedding) -> List[np.ndarray]:
    """Gradients of a scalar loss w.r.t. the trainable arrays of ``state``.

    ``grad_embedding`` holds d(loss)/d(normalized embedding) for every row of
    the cached forward pass. The output is ordered like ``state.params()``.
    """
    if cache.state_id != state._id or cache.version != state.version:
        raise ContractError("forward cache is stale for this encoder state")
    cfg = state.config
    g = np.asarray(grad_embedding, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.embedding.shape:
        raise ShapeError(f"gradient shape {g.shape} vs embedding {cache.embedding.shape}")

    z = cache.embedding
    norms = np.linalg.norm(cache.raw_embedding, axis=1, keepdims=True)
    g_e = (g - z * np.sum(z * g, axis=1, keepdims=True)) / norms
    g_h = g_e @ state.projection

    grads = {}
    for i in range(cfg.num_blocks - 1, cfg.lora_start - 1, -1):
        if cfg.activation == "tanh":
            g_a = g_h * (1.0 - cache.post[i] ** 2)
        else:
            g_a = g_h
        h_prev = cache.post[i - 1] if i > 0 else cache.inputs
        lora = state.blocks[i].lora
        if lora is not None:
            d_w = g_a.T @ h_prev
            grads[i] = (lora.gamma * (lora.b.T @ d_w), lora.gamma * (d_w @ lora.a.T))
        if i > cfg.lora_start:
            g_h = g_a @ cache.weights[i]

    out = []
    for i in cfg.adapted:
        if i in grads:
            out.extend(grads[i])
    return out


# -- class descriptions --------------------------------------------------------

@dataclass
class ClassDescription:
    class_id: int
    style: str
    variants: List[np.ndarray] = field(default_factory=list)

    @property
    def variant_count(self) -> int:
        return len(self.variants)


def make_descriptions(num_classes: int, style: str, variants: int, d_in: int, rng: Rng,
                      spread: float = 0.1) -> List[ClassDescription]:
    """Synthetic description embeddings: one anchor per class, GT variants jittered around it."""
    if num_classes < 1:
        raise ParameterError("num_classes must be >= 1")
    if style not in STYLES:
        raise ParameterError(f"unknown description style {style!r}")
    if style == "GT" and variants < 2:
        raise ParameterError("GT style needs at least 2 variants")
    out = []
    for c in range(num_classes):
        crng = rng.split("class", c)
        anchor = crng.split("anchor").normal(size=d_in)
        anchor /= np.linalg.norm(anchor)
        if style == "ST":
            vs = [anchor]
        else:
            vs = []
            for v in range(variants):
                u = anchor + crng.split("variant", v).normal(0.0, spread, size=d_in)
                vs.append(u / np.linalg.norm(u))
        out.append(ClassDescription(c, style, vs))
    return out


def select_variant(desc: ClassDescription, rng: Rng) -> np.ndarray:
    if desc.style == "ST" or desc.variant_count == 1:
        return desc.variants[0]
    return desc.variants[int(rng.integers(desc.variant_count))]
