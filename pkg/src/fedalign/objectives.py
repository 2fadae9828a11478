"""Losses, their gradients w.r.t. normalized embeddings, and the Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .encoder import EncoderState, backward, forward, select_variant
from .exceptions import ConfigError, ParameterError, ShapeError
from .numerics import Rng, similarity_matrix

PROB_FLOOR = 1e-30
DEFAULT_TAU = 2.66
DEFAULT_MU = 0.1


@dataclass(frozen=True)
class ObjectiveConfig:
    tau: float = DEFAULT_TAU
    mu: float = DEFAULT_MU
    sim_kind: str = "cosine"

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError("tau must be positive")
        if self.mu < 0:
            raise ParameterError("mu must be nonnegative")


class CEStats:
    """Counts how often the probability floor had to be applied."""
    floor_hits = 0


def logits(zv: np.ndarray, text_feats: np.ndarray, cfg: ObjectiveConfig) -> np.ndarray:
    text_feats = np.asarray(text_feats, dtype=np.float64)
    if text_feats.ndim != 2 or text_feats.shape[0] < 1:
        raise ParameterError("need at least one class text feature")
    zv = np.atleast_2d(zv)
    return similarity_matrix(zv, text_feats, cfg.sim_kind) / cfg.tau


def _softmax_rows(s):
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict_probs(zv, text_feats, cfg: ObjectiveConfig = ObjectiveConfig()) -> np.ndarray:
    """Class probabilities from temperature-scaled similarity to each class text feature.

    Accepts one embedding (returns a vector) or a batch of rows.
    """
    single = np.ndim(zv) == 1
    p = _softmax_rows(logits(zv, text_feats, cfg))
    return p[0] if single else p


def cross_entropy(probs, labels) -> float:
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels, dtype=int)
    if probs.shape[0] != labels.shape[0]:
        raise ShapeError("one label per probability row required")
    picked = probs[np.arange(len(labels)), labels]
    low = picked < PROB_FLOOR
    if low.any():
        CEStats.floor_hits += int(low.sum())
        picked = np.maximum(picked, PROB_FLOOR)
    return float(-np.mean(np.log(picked)))


def _ce_grad_wrt_z(z, text_feats, labels, cfg):
    """Mean CE over rows of ``z`` and d(loss)/dz (cosine and dot kinds).

    Also returns d(loss)/d(text_feats) for the text-side objective.
    """
    n = z.shape[0]
    s = logits(z, text_feats, cfg)
    p = _softmax_rows(s)
    picked = np.maximum(p[np.arange(n), labels], PROB_FLOOR)
    loss = float(-np.mean(np.log(picked)))
    g_s = p.copy()
    g_s[np.arange(n), labels] -= 1.0
    g_s /= n * cfg.tau
    if cfg.sim_kind == "dot":
        return loss, g_s @ text_feats, g_s.T @ z
    if cfg.sim_kind == "cosine":
        # inputs are unit-norm on both sides, so cosine is a dot product;
        # the projections onto the tangent space are done by the encoder backward
        return loss, g_s @ text_feats, g_s.T @ z
    raise ParameterError(f"training with sim_kind {cfg.sim_kind!r} is not supported")


def class_means(feats: np.ndarray, labels: np.ndarray):
    classes = np.unique(labels)
    means = np.stack([feats[labels == c].mean(axis=0) for c in classes])
    return classes, means


def orthogonality_penalty(feats, labels) -> float:
    """Frobenius norm of ``Z Z^T - I`` where rows of Z are per-class mean features."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    labels = np.asarray(labels, dtype=int)
    _, zbar = class_means(feats, labels)
    m = zbar @ zbar.T - np.eye(zbar.shape[0])
    return float(np.linalg.norm(m))


def _orth_grad_wrt_z(z, labels):
    classes, zbar = class_means(z, labels)
    m = zbar @ zbar.T - np.eye(zbar.shape[0])
    norm = np.linalg.norm(m)
    grad = np.zeros_like(z)
    if norm == 0.0:
        # not differentiable at the optimum; use the zero subgradient
        return 0.0, grad
    g_zbar = 2.0 * (m @ zbar) / norm
    for row, c in enumerate(classes):
        mask = labels == c
        grad[mask] = g_zbar[row] / mask.sum()
    return float(norm), grad


def local_objective(x, labels, encoder: EncoderState, text_feats, cfg: ObjectiveConfig):
    """CE + mu * orthogonality on one batch.

    Returns ``(loss, grads, aux)`` where grads follow ``encoder.params()`` and
    ``aux`` carries the embeddings and probabilities of the forward pass.
    """
    labels = np.asarray(labels, dtype=int)
    text_feats = np.asarray(text_feats, dtype=np.float64)
    if labels.size and labels.max() >= text_feats.shape[0]:
        raise ParameterError("text features do not cover every label")
    z, cache = forward(encoder, x)
    ce, g_z, _ = _ce_grad_wrt_z(z, text_feats, labels, cfg)
    loss = ce
    if cfg.mu > 0:
        orth, g_orth = _orth_grad_wrt_z(z, labels)
        loss += cfg.mu * orth
        g_z = g_z + cfg.mu * g_orth
    grads = backward(encoder, cache, g_z)
    probs = predict_probs(z, text_feats, cfg)
    return loss, grads, {"embeddings": z, "probs": probs, "ce": ce}


def local_loss(x, labels, encoder, text_feats, cfg) -> float:
    z = forward(encoder, x)[0]
    loss = cross_entropy(predict_probs(z, text_feats, cfg), labels)
    if cfg.mu > 0:
        loss += cfg.mu * orthogonality_penalty(z, labels)
    return loss


def text_features(text_encoder: EncoderState, descriptions, rng: Rng = None) -> np.ndarray:
    """Embed one variant per class: a random one when ``rng`` is given, else variant 0."""
    if rng is None:
        inputs = np.stack([d.variants[0] for d in descriptions])
    else:
        inputs = np.stack([select_variant(d, rng) for d in descriptions])
    return forward(text_encoder, inputs)[0]


def text_objective(feats, labels, text_encoder: EncoderState, descriptions,
                   cfg: ObjectiveConfig, rng: Rng = None):
    """CE of uploaded image features against text features from the text tower.

    Gradients flow only into the text encoder's LoRA factors.
    """
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    labels = np.asarray(labels, dtype=int)
    if labels.size and labels.max() >= len(descriptions):
        raise ConfigError(f"label {labels.max()} has no description")
    if rng is None:
        inputs = np.stack([d.variants[0] for d in descriptions])
    else:
        inputs = np.stack([select_variant(d, rng) for d in descriptions])
    t, cache = forward(text_encoder, inputs)
    loss, _, g_t = _ce_grad_wrt_z(feats, t, labels, cfg)
    grads = backward(text_encoder, cache, g_t)
    return loss, grads, inputs


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """In-place bias-corrected Adam update of ``params``; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params vs {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.lr != 0.0:
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
