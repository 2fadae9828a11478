"""Server side of a round: text-tower training on uploaded features and
prototype-driven aggregation of the clients' layer deltas."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .client import UploadPackage
from .encoder import ClassDescription, EncoderState
from .exceptions import EmptySupportError, ParameterError, ShapeError
from .lora import DenseDelta, linear_combine
from .numerics import Rng, masked_softmax, similarity_matrix
from .objectives import (
    AdamState,
    ObjectiveConfig,
    adam_step,
    cross_entropy,
    predict_probs,
    text_features,
    text_objective,
)


@dataclass
class CoefficientMatrix:
    alpha: np.ndarray  # (K, K), rows sum to one
    raw: np.ndarray  # (K, K) scores before softmax
    d_raw: Dict[tuple, Dict[int, float]]  # (k, j) -> {class: attention factor}


def relational_attention(protos_k: Dict[int, np.ndarray], protos_j: Dict[int, np.ndarray],
                         sim_kind: str = "cosine", negate_euclidean: bool = True) -> Dict[int, float]:
    """For each class c held by k: sum over j's prototypes of sim(u_kc, u_jc')."""
    if not protos_k:
        return {}
    if not protos_j:
        return {c: 0.0 for c in protos_k}
    ck = sorted(protos_k)
    cj = sorted(protos_j)
    s = similarity_matrix(np.stack([protos_k[c] for c in ck]),
                          np.stack([protos_j[c] for c in cj]), sim_kind, negate_euclidean)
    return {c: float(v) for c, v in zip(ck, s.sum(axis=1))}


def influence_coefficients(prototypes: Sequence[Dict[int, np.ndarray]], n_kc: np.ndarray,
                           ex_query: bool = True, sim_kind: str = "cosine",
                           negate_euclidean: bool = True) -> CoefficientMatrix:
    """Row-stochastic client-to-client weights from prototype attention.

    Raw score k->j is sum_c (N_kc / N_k) * d_kj^c over classes where k has a
    prototype; each row is then softmax-normalized, with the diagonal removed
    from the support when ``ex_query`` is set.
    """
    K = len(prototypes)
    n_kc = np.asarray(n_kc, dtype=np.float64)
    if n_kc.shape[0] != K:
        raise ShapeError("one count row per client required")
    if ex_query and K < 2:
        raise EmptySupportError("ex-query aggregation needs at least two clients")
    raw = np.zeros((K, K))
    d_raw = {}
    for k in range(K):
        n_k = n_kc[k].sum()
        for j in range(K):
            d = relational_attention(prototypes[k], prototypes[j], sim_kind, negate_euclidean)
            d_raw[(k, j)] = d
            if n_k > 0:
                raw[k, j] = sum(n_kc[k, c] / n_k * v for c, v in d.items())
    alpha = np.stack([masked_softmax(raw[k], [k] if ex_query else []) for k in range(K)])
    return CoefficientMatrix(alpha, raw, d_raw)


def query_aggregate(alpha_row, deltas: Sequence[Sequence[DenseDelta]]) -> List[DenseDelta]:
    """Layerwise combination of every client's deltas with one coefficient row."""
    alpha_row = np.asarray(alpha_row, dtype=np.float64)
    if len(deltas) != alpha_row.shape[0]:
        raise ShapeError(f"{len(deltas)} clients vs row of length {alpha_row.shape[0]}")
    n_layers = len(deltas[0])
    if any(len(d) != n_layers for d in deltas):
        raise ShapeError("clients disagree on the number of layers")
    return [linear_combine([d[i] for d in deltas], alpha_row) for i in range(n_layers)]


def weighted_aggregate(deltas: Sequence[Sequence[DenseDelta]], sample_counts) -> List[DenseDelta]:
    counts = np.asarray(sample_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ParameterError("sample counts must be nonnegative")
    total = counts.sum()
    if total <= 0:
        raise ParameterError("sample counts sum to zero")
    return query_aggregate(counts / total, deltas)


def splice(global_deltas: Sequence[DenseDelta], personal_deltas: Sequence[DenseDelta],
           lora_start: int, boundary: int, num_blocks: int) -> List[DenseDelta]:
    """Global deltas on blocks [lora_start, boundary), personalized ones above.

    Both inputs list the adapted blocks lora_start..num_blocks-1 in order.
    ``boundary`` may be num_blocks + 1, meaning every layer is global.
    """
    if not 0 <= lora_start <= boundary <= num_blocks + 1:
        raise ParameterError(
            f"need lora_start <= boundary <= num_blocks + 1, got {lora_start}, {boundary}, {num_blocks}")
    n = num_blocks - lora_start
    if len(global_deltas) != n or len(personal_deltas) != n:
        raise ShapeError(f"expected {n} layer deltas")
    out = []
    for offset in range(n):
        src = global_deltas if lora_start + offset < boundary else personal_deltas
        out.append(DenseDelta(src[offset].w.copy()))
    return out


class ServerState:
    def __init__(self, text_encoder: EncoderState, descriptions: List[ClassDescription],
                 boundary: int, ex_query: bool = True, sim_kind: str = "cosine",
                 negate_euclidean: bool = True, objective: ObjectiveConfig = ObjectiveConfig(mu=0.0),
                 lr: float = 1e-3, batch_size: int = 64, rng: Optional[Rng] = None):
        cfg = text_encoder.config
        if not cfg.lora_start <= boundary <= cfg.num_blocks + 1:
            raise ParameterError("boundary must lie in [lora_start, num_blocks + 1]")
        self.text_encoder = text_encoder
        self.descriptions = descriptions
        self.boundary = boundary
        self.ex_query = ex_query
        self.sim_kind = sim_kind
        self.negate_euclidean = negate_euclidean
        self.objective = objective
        self.adam = AdamState(lr=lr)
        self.batch_size = batch_size
        self.rng = rng if rng is not None else Rng(0).split("server")
        self.shuffle_rng = self.rng.split("shuffle")
        self.variant_rng = self.rng.split("variants")
        self.global_deltas: Optional[List[DenseDelta]] = None
        self.last_coefficients: Optional[CoefficientMatrix] = None
        self.text_loss: float = float("nan")
        self.flags: List[str] = []

    def current_text_features(self) -> np.ndarray:
        return text_features(self.text_encoder, self.descriptions)


def _gather(packages: Sequence[UploadPackage]):
    feats = [p.shared_feats for p in packages if p.num_shared]
    labels = [p.shared_labels for p in packages if p.num_shared]
    if not feats:
        return None, None
    return np.concatenate(feats), np.concatenate(labels)


def uploaded_ce(server: ServerState, packages) -> float:
    feats, labels = _gather(packages)
    if feats is None:
        return float("nan")
    probs = predict_probs(feats, server.current_text_features(), server.objective)
    return cross_entropy(probs, labels)


def train_text_encoder(server: ServerState, packages: Sequence[UploadPackage],
                       epochs: int = 1) -> np.ndarray:
    """Adam epochs of the text objective over the union of uploaded features.

    Returns the class text features recomputed with description variant 0.
    """
    feats, labels = _gather(sorted(packages, key=lambda p: p.client_id))
    if feats is None:
        server.flags.append("empty_upload_union")
        server.text_loss = float("nan")
        return server.current_text_features()
    enc = server.text_encoder
    losses = []
    n = feats.shape[0]
    for _ in range(epochs):
        order = server.shuffle_rng.permutation(n)
        for start in range(0, n, server.batch_size):
            idx = order[start:start + server.batch_size]
            loss, grads, _ = text_objective(feats[idx], labels[idx], enc, server.descriptions,
                                            server.objective, server.variant_rng)
            losses.append(loss)
            adam_step(enc.params(), grads, server.adam)
            enc.touch()
    server.text_loss = float(np.mean(losses)) if losses else float("nan")
    return server.current_text_features()


@dataclass
class Broadcast:
    personalized: List[List[DenseDelta]]  # per client, per adapted layer
    global_deltas: List[DenseDelta]
    coefficients: CoefficientMatrix
    query_deltas: List[List[DenseDelta]]  # per client, before splicing


def aggregate(server: ServerState, packages: Sequence[UploadPackage], ex_query: Optional[bool] = None,
              weighted_only: bool = False) -> Broadcast:
    """Coefficients, per-client query aggregation, global weighted aggregation, splice."""
    packages = sorted(packages, key=lambda p: p.client_id)
    cfg = server.text_encoder.config
    ex = server.ex_query if ex_query is None else ex_query
    deltas = [p.deltas for p in packages]
    counts = np.array([p.n_k for p in packages], dtype=np.float64)
    global_deltas = weighted_aggregate(deltas, counts)
    coeffs = influence_coefficients([p.prototypes for p in packages],
                                    np.stack([p.n_kc for p in packages]), ex,
                                    server.sim_kind, server.negate_euclidean)
    personalized, queried = [], []
    for k in range(len(packages)):
        q = global_deltas if weighted_only else query_aggregate(coeffs.alpha[k], deltas)
        queried.append(q)
        personalized.append(splice(global_deltas, q, cfg.lora_start, server.boundary, cfg.num_blocks))
    return Broadcast(personalized, global_deltas, coeffs, queried)


def aggregate_and_broadcast(server: ServerState, packages: Sequence[UploadPackage],
                            text_epochs: int = 1, weighted_only: bool = False):
    """One server round: train the text tower, then aggregate image deltas.

    Returns ``(broadcast, text_feats)``.
    """
    text_feats = train_text_encoder(server, packages, text_epochs)
    out = aggregate(server, packages, weighted_only=weighted_only)
    server.global_deltas = out.global_deltas
    server.last_coefficients = out.coefficients
    return out, text_feats
