"""Client side of a round: local LoRA training, collection of correctly
predicted features, prototypes, and the upload package."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .datagen import Dataset
from .encoder import EncoderState
from .exceptions import ParameterError, ShapeError
from .lora import DenseDelta, deserialize_matrices, serialize_matrices
from .objectives import AdamState, ObjectiveConfig, adam_step, local_objective
from .numerics import Rng


@dataclass(frozen=True)
class ClientConfig:
    local_epochs: int = 1
    batch_size: int = 64
    mu: float = 0.1
    tau: float = 2.66
    upload_ratio: float = 1.0
    lr: float = 1e-3

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ParameterError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not 0 < self.upload_ratio <= 1:
            raise ParameterError("upload_ratio must lie in (0, 1]")

    @property
    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(tau=self.tau, mu=self.mu, sim_kind="cosine")


@dataclass
class UploadPackage:
    client_id: int
    deltas: List[DenseDelta]
    prototypes: Dict[int, np.ndarray]
    shared_feats: np.ndarray  # (n_shared, d_embed)
    shared_labels: np.ndarray
    n_k: int
    n_kc: np.ndarray
    n_tilde: int
    n_tilde_c: np.ndarray
    lora_params: int = 0
    dense_params: int = 0
    mean_loss: float = float("nan")
    train_accuracy: float = float("nan")
    flags: List[str] = field(default_factory=list)

    @property
    def num_shared(self) -> int:
        return int(self.shared_labels.shape[0])

    def sidecar(self) -> dict:
        return {
            "client_id": self.client_id,
            "prototypes": {str(c): v.tolist() for c, v in sorted(self.prototypes.items())},
            "d_embed": int(self.shared_feats.shape[1]),
            "shared_feats": self.shared_feats.tolist(),
            "shared_labels": self.shared_labels.tolist(),
            "n_k": self.n_k,
            "n_kc": self.n_kc.tolist(),
            "n_tilde": self.n_tilde,
            "n_tilde_c": self.n_tilde_c.tolist(),
            "lora_params": self.lora_params,
            "dense_params": self.dense_params,
            "mean_loss": self.mean_loss,
            "train_accuracy": self.train_accuracy,
            "flags": self.flags,
        }


def save_package(pkg: UploadPackage, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"upload_{pkg.client_id}.fald").write_bytes(serialize_matrices([x.w for x in pkg.deltas]))
    (d / f"upload_{pkg.client_id}.json").write_text(json.dumps(pkg.sidecar()))


def load_package(directory, client_id: int) -> UploadPackage:
    d = Path(directory)
    mats, _ = deserialize_matrices((d / f"upload_{client_id}.fald").read_bytes())
    meta = json.loads((d / f"upload_{client_id}.json").read_text())
    feats = np.asarray(meta["shared_feats"], dtype=np.float64)
    return UploadPackage(
        client_id=meta["client_id"],
        deltas=[DenseDelta(m) for m in mats],
        prototypes={int(c): np.asarray(v) for c, v in meta["prototypes"].items()},
        shared_feats=feats.reshape(-1, meta["d_embed"]),
        shared_labels=np.asarray(meta["shared_labels"], dtype=np.int64),
        n_k=meta["n_k"], n_kc=np.asarray(meta["n_kc"]), n_tilde=meta["n_tilde"],
        n_tilde_c=np.asarray(meta["n_tilde_c"]), lora_params=meta["lora_params"],
        dense_params=meta["dense_params"], mean_loss=meta["mean_loss"],
        train_accuracy=meta["train_accuracy"], flags=meta["flags"],
    )


class ClientState:
    def __init__(self, client_id: int, shard: Dataset, encoder: EncoderState,
                 text_feats: np.ndarray, rng: Rng, lr: float = 1e-3):
        self.id = client_id
        self.shard = shard
        self.encoder = encoder
        self.text_feats = np.asarray(text_feats, dtype=np.float64)
        self.rng = rng
        self.shuffle_rng = rng.split("shuffle")
        self.adam = AdamState(lr=lr)
        self.round = 0
        self.last_upload: Optional[UploadPackage] = None

    @property
    def num_classes(self) -> int:
        return self.text_feats.shape[0]


def compute_prototypes(feats, labels) -> Dict[int, np.ndarray]:
    """Mean feature per predicted class; classes without entries are absent."""
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    return {int(c): feats[labels == c].mean(axis=0) for c in np.unique(labels)}


def _param_counts(encoder: EncoderState):
    cfg = encoder.config
    shapes = [cfg.block_shape(i) for i in cfg.adapted]
    return (sum(cfg.rank * (d1 + d2) for d1, d2 in shapes),
            sum(d1 * d2 for d1, d2 in shapes))


def local_update(client: ClientState, cfg: ClientConfig) -> UploadPackage:
    """Train the client's adapters for ``local_epochs`` and assemble its upload.

    Correct predictions are collected only during the final epoch, from the
    forward pass that precedes each optimizer step.
    """
    shard = client.shard
    C = client.num_classes
    enc = client.encoder
    lora_params, dense_params = _param_counts(enc)
    n_kc = shard.class_counts() if len(shard) else np.zeros(C, dtype=np.int64)
    d_embed = enc.config.d_embed
    client.adam.lr = cfg.lr
    if len(shard) == 0:
        client.round += 1
        pkg = UploadPackage(client.id, enc.layer_deltas(), {}, np.zeros((0, d_embed)),
                            np.zeros(0, dtype=np.int64), 0, n_kc, 0, np.zeros(C, dtype=np.int64),
                            lora_params, dense_params, flags=["empty_shard"])
        client.last_upload = pkg
        return pkg

    obj = cfg.objective
    correct_z, correct_y = [], []
    losses, hits = [], 0
    n = len(shard)
    for epoch in range(cfg.local_epochs):
        final = epoch == cfg.local_epochs - 1
        order = client.shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = shard.x[idx], shard.y[idx]
            loss, grads, aux = local_objective(xb, yb, enc, client.text_feats, obj)
            losses.append(loss)
            if final:
                pred = np.argmax(aux["probs"], axis=1)
                ok = pred == yb
                hits += int(ok.sum())
                correct_z.append(aux["embeddings"][ok])
                correct_y.append(yb[ok])
            adam_step(enc.params(), grads, client.adam)
            enc.touch()

    feats = np.concatenate(correct_z) if correct_z else np.zeros((0, d_embed))
    labels = np.concatenate(correct_y) if correct_y else np.zeros(0, dtype=np.int64)
    prototypes = compute_prototypes(feats, labels)
    n_tilde_c = np.bincount(labels, minlength=C)
    n_tilde = int(labels.shape[0])

    keep = math.ceil(cfg.upload_ratio * n_tilde)
    if keep < n_tilde:
        pick = np.sort(client.rng.split("upload", client.round).choice(n_tilde, keep, replace=False))
        feats, labels = feats[pick], labels[pick]

    pkg = UploadPackage(
        client_id=client.id, deltas=enc.layer_deltas(), prototypes=prototypes,
        shared_feats=feats, shared_labels=labels, n_k=n, n_kc=n_kc,
        n_tilde=n_tilde, n_tilde_c=n_tilde_c, lora_params=lora_params,
        dense_params=dense_params, mean_loss=float(np.mean(losses)),
        train_accuracy=hits / n,
    )
    client.round += 1
    client.last_upload = pkg
    return pkg


def apply_broadcast(client: ClientState, personalized: List[DenseDelta], text_feats) -> None:
    """Install broadcast deltas as frozen offsets under fresh zero-B adapters."""
    text_feats = np.asarray(text_feats, dtype=np.float64)
    if text_feats.shape != client.text_feats.shape:
        raise ShapeError(f"text features {text_feats.shape} vs {client.text_feats.shape}")
    client.encoder.set_offsets(personalized)
    client.encoder.reset_lora(client.rng.split("lora", client.round))
    client.text_feats = text_feats.copy()
    client.adam = AdamState(lr=client.adam.lr)


def upload_cost(pkg: UploadPackage, mode: str, d_embed: int) -> int:
    """Scalars in an upload: model term + d_embed per prototype + (d_embed + 1) per shared feature."""
    if mode == "factored":
        model = pkg.lora_params
    elif mode == "dense":
        model = pkg.dense_params
    else:
        raise ParameterError(f"unknown accounting mode {mode!r}")
    return model + d_embed * len(pkg.prototypes) + (d_embed + 1) * pkg.num_shared
