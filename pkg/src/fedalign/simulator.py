"""End-to-end federated rounds over an in-process transport, evaluation,
baselines, communication accounting and checkpoints."""
from __future__ import annotations

import hashlib
import json
import math
import queue
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .client import ClientConfig, ClientState, UploadPackage, apply_broadcast, local_update, upload_cost
from .datagen import (
    Dataset,
    Partition,
    PartitionSpec,
    build_local_testset,
    make_partition,
    make_train_test,
)
from .encoder import EncoderConfig, EncoderState, build_backbone, build_encoder, forward, make_descriptions
from .exceptions import ConfigError, FedAlignError, InvariantViolation, ParameterError
from .lora import DenseDelta, deserialize_matrices, serialize_matrices
from .numerics import SIM_KINDS, Rng
from .objectives import ObjectiveConfig, predict_probs, text_features
from .server import ServerState, aggregate, aggregate_and_broadcast, weighted_aggregate

EVAL_MODES = ("aggregated_with_self", "raw_local", "auto")
BASELINES = ("fedalign", "zero_shot", "local_only", "weighted_only")


@dataclass
class RunConfig:
    # protocol
    global_rounds: int = 10
    num_clients: int = 5
    local_epochs: int = 1
    tau: float = 2.66
    mu: float = 0.1
    lr: float = 1e-3
    batch_size: int = 64
    rank: int = 4
    lora_start: int = 2
    boundary: int = 9
    gamma: float = 0.25
    ex_query: bool = True
    sim_kind: str = "cosine"
    negate_euclidean: bool = True
    desc_style: str = "GT"
    desc_variants: int = 4
    upload_ratio: float = 1.0
    text_epochs: int = 1
    local_eval_mode: str = "auto"
    # partition
    partition: str = "dir"
    alpha: float = 0.1
    classes_per_client: int = 2
    # synthetic data
    num_classes: int = 10
    n_train_per_class: int = 200
    n_test_per_class: int = 50
    separation: float = 6.0
    noise_std: float = 1.0
    # encoders
    num_blocks: int = 12
    d_in: int = 16
    d_hidden: int = 32
    d_embed: int = 16
    activation: str = "tanh"
    hidden_gain: float = 0.08
    # execution
    seed: int = 0
    n_jobs: int = 1
    check_invariants: bool = True

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.global_rounds >= 0, "global_rounds must be >= 0")
        need(self.num_clients >= 1, "num_clients must be >= 1")
        need(self.local_epochs >= 1, "local_epochs must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.text_epochs >= 1, "text_epochs must be >= 1")
        need(self.tau > 0, "tau must be positive")
        need(self.mu >= 0, "mu must be nonnegative")
        need(self.lr >= 0, "lr must be nonnegative")
        need(self.gamma > 0, "gamma must be positive")
        need(0 < self.upload_ratio <= 1, "upload_ratio must lie in (0, 1]")
        need(0 <= self.lora_start <= self.num_blocks, "lora_start must lie in [0, num_blocks]")
        need(self.lora_start <= self.boundary <= self.num_blocks + 1,
             "boundary must lie in [lora_start, num_blocks + 1]")
        need(self.sim_kind in SIM_KINDS, f"sim_kind must be one of {SIM_KINDS}")
        need(self.desc_style in ("ST", "GT"), "desc_style must be ST or GT")
        need(self.desc_style == "ST" or self.desc_variants >= 2, "GT needs desc_variants >= 2")
        need(self.local_eval_mode in EVAL_MODES, f"local_eval_mode must be one of {EVAL_MODES}")
        need(self.partition in ("iid", "dir", "path"), "partition must be iid, dir or path")
        need(self.alpha > 0, "alpha must be positive")
        need(self.num_classes >= 2, "num_classes must be >= 2")
        need(self.n_train_per_class >= 1 and self.n_test_per_class >= 1, "per-class counts must be >= 1")
        need(not (self.ex_query and self.num_clients < 2), "ex_query needs at least two clients")
        if self.partition == "path":
            need(self.classes_per_client >= 1, "classes_per_client must be >= 1")
            need(self.classes_per_client * self.num_clients <= self.num_classes,
                 f"path partition infeasible: {self.num_clients} x {self.classes_per_client} "
                 f"> {self.num_classes} classes")
        need(self.n_jobs >= 1, "n_jobs must be >= 1")
        try:
            self.encoder_config()
        except ParameterError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.num_blocks, self.d_in, self.d_hidden, self.d_embed,
                             self.activation, self.lora_start, self.rank, self.gamma,
                             self.hidden_gain)

    def client_config(self) -> ClientConfig:
        return ClientConfig(self.local_epochs, self.batch_size, self.mu, self.tau,
                            self.upload_ratio, self.lr)

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(self.partition, self.num_clients, self.alpha,
                             self.classes_per_client, self.seed)

    def resolved_eval_mode(self) -> str:
        if self.local_eval_mode != "auto":
            return self.local_eval_mode
        return "raw_local" if self.partition == "path" else "aggregated_with_self"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RoundMetrics:
    round: int
    global_accuracy: float
    local_accuracy: List[Optional[float]]
    local_accuracy_mean: Optional[float]
    local_accuracy_aggregated: List[Optional[float]]
    local_accuracy_raw: List[Optional[float]]
    local_eval_mode: str
    mean_local_loss: Optional[float]
    text_loss: Optional[float]
    upload_factored: int
    upload_dense: int
    download_factored: int
    download_dense: int
    seed: int
    wall_time: float = 0.0

    def record(self) -> dict:
        """JSON-ready dict; wall time is left out so records are reproducible."""
        d = asdict(self)
        d.pop("wall_time")
        return {k: _clean(v) for k, v in d.items()}


def _clean(v):
    if isinstance(v, list):
        return [_clean(x) for x in v]
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


# -- transport -------------------------------------------------------------------

class Transport:
    """In-process message queues with a per-round scalar-count ledger."""

    def __init__(self):
        self.up: "queue.Queue" = queue.Queue()
        self.down: Dict[int, "queue.Queue"] = {}
        self.ledger: List[dict] = []
        self._open = None

    def begin_round(self, t: int):
        self._open = {"round": t, "upload_factored": 0, "upload_dense": 0,
                      "download_factored": 0, "download_dense": 0}
        self.ledger.append(self._open)

    def send_up(self, pkg: UploadPackage):
        protos = sum(int(v.size) for v in pkg.prototypes.values())
        shared = int(pkg.shared_feats.size) + int(pkg.shared_labels.size)
        dense = sum(int(d.w.size) for d in pkg.deltas)
        self._open["upload_factored"] += pkg.lora_params + protos + shared
        self._open["upload_dense"] += dense + protos + shared
        self.up.put(pkg)

    def collect_uploads(self) -> List[UploadPackage]:
        out = []
        while not self.up.empty():
            out.append(self.up.get())
        return sorted(out, key=lambda p: p.client_id)

    def send_down(self, client_id: int, deltas: List[DenseDelta], lora_params: int):
        self._open["download_factored"] += lora_params
        self._open["download_dense"] += sum(int(d.w.size) for d in deltas)
        self.down.setdefault(client_id, queue.Queue()).put(deltas)

    def broadcast_text(self, text_feats: np.ndarray):
        # one broadcast message shared by every client
        self._open["download_factored"] += int(text_feats.size)
        self._open["download_dense"] += int(text_feats.size)
        self._text = text_feats

    def receive(self, client_id: int):
        return self.down[client_id].get(), self._text


# -- evaluation ------------------------------------------------------------------

def encoder_with_deltas(backbone: EncoderState, deltas: Sequence[DenseDelta]) -> EncoderState:
    """A frozen copy of ``backbone`` whose adapted layers carry ``deltas`` as offsets."""
    enc = backbone.copy()
    for i in enc.config.adapted:
        enc.blocks[i].lora = None
    enc.set_offsets(list(deltas))
    return enc


def zero_deltas(config: EncoderConfig) -> List[DenseDelta]:
    return [DenseDelta.zeros(*config.block_shape(i)) for i in config.adapted]


def predict_labels(encoder: EncoderState, text_feats, x, tau: float = 2.66) -> np.ndarray:
    z = forward(encoder, x)[0]
    return np.argmax(predict_probs(z, text_feats, ObjectiveConfig(tau=tau)), axis=1)


def accuracy(encoder: EncoderState, text_feats, data: Dataset, tau: float = 2.66) -> float:
    if len(data) == 0:
        raise ParameterError("cannot evaluate on an empty test set")
    return float(np.mean(predict_labels(encoder, text_feats, data.x, tau) == data.y))


def evaluate_global(global_deltas, text_feats, test: Dataset, backbone: EncoderState,
                    tau: float = 2.66) -> float:
    return accuracy(encoder_with_deltas(backbone, global_deltas), text_feats, test, tau)


def evaluate_local(client_deltas: Sequence[Sequence[DenseDelta]], client_labels: Sequence[set],
                   text_feats, test: Dataset, backbone: EncoderState,
                   tau: float = 2.66) -> List[Optional[float]]:
    """Accuracy of each client's model on the test samples of its own labels."""
    out = []
    for deltas, labels in zip(client_deltas, client_labels):
        local = build_local_testset(test, labels)
        if len(local) == 0:
            out.append(None)
        else:
            out.append(accuracy(encoder_with_deltas(backbone, deltas), text_feats, local, tau))
    return out


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


# -- run -------------------------------------------------------------------------

@dataclass
class World:
    """Everything derived from the config before any training happens."""
    config: RunConfig
    train: Dataset
    test: Dataset
    partition: Partition
    image_backbone: EncoderState
    text_encoder: EncoderState
    descriptions: list


def build_world(config: RunConfig, data: Optional[tuple] = None) -> World:
    """Seeded data, partition, towers and descriptions.

    ``data`` may supply an external ``(train, test)`` pair of Datasets in place
    of the synthetic Gaussian mixture.
    """
    config.validate()
    root = Rng(config.seed)
    if data is None:
        train, test = make_train_test(config.num_classes, config.n_train_per_class,
                                      config.n_test_per_class, config.d_in, config.separation,
                                      config.noise_std, root.split("data"))
    else:
        train, test = data
        for ds in (train, test):
            if ds.x.shape[1] != config.d_in:
                raise ConfigError(f"data has {ds.x.shape[1]} features but d_in={config.d_in}")
            if ds.num_classes != config.num_classes:
                raise ConfigError(f"data has {ds.num_classes} classes but num_classes={config.num_classes}")
        if len(test) == 0:
            raise ConfigError("test set is empty")
    partition = make_partition(train, config.partition_spec())
    enc_cfg = config.encoder_config()
    image_backbone = build_backbone(enc_cfg, root.split("image_backbone"))
    text_encoder = build_encoder(enc_cfg, root.split("text_backbone"), root.split("text_lora"))
    descriptions = make_descriptions(config.num_classes, config.desc_style, config.desc_variants,
                                     config.d_in, root.split("descriptions"))
    return World(config, train, test, partition, image_backbone, text_encoder, descriptions)


@dataclass
class RunResult:
    config: RunConfig
    kind: str
    metrics: List[RoundMetrics]
    world: World
    clients: List[ClientState]
    server: ServerState
    global_deltas: List[DenseDelta]
    personalized: List[List[DenseDelta]]
    with_self: List[List[DenseDelta]]
    raw_local: List[List[DenseDelta]]
    text_feats: np.ndarray
    transport: Transport
    upload_log: List[List[dict]] = field(default_factory=list)
    coefficient_log: List[np.ndarray] = field(default_factory=list)
    norm_log: List[dict] = field(default_factory=list)

    def metrics_jsonl(self) -> str:
        return "".join(json.dumps(m.record(), sort_keys=True) + "\n" for m in self.metrics)


def _fingerprint(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _frozen_arrays(enc: EncoderState):
    return [b.w0 for b in enc.blocks] + [enc.projection]


def _stack_norm(deltas) -> float:
    return float(np.sqrt(sum(float(np.sum(d.w * d.w)) for d in deltas)))


def _check(cond, msg):
    if not cond:
        raise InvariantViolation(msg)


def run_training(config: RunConfig, kind: str = "fedalign", serial: Optional[bool] = None,
                 data: Optional[tuple] = None) -> RunResult:
    """Run ``config.global_rounds`` rounds of the protocol (or a baseline ``kind``).

    Round 0 of the returned metrics is the zero-shot state before any training.
    """
    if kind not in BASELINES:
        raise ConfigError(f"unknown run kind {kind!r}")
    world = build_world(config, data)
    enc_cfg = config.encoder_config()
    root = Rng(config.seed)
    text0 = text_features(world.text_encoder, world.descriptions)
    tau = config.tau

    clients = []
    for k in range(config.num_clients):
        crng = root.split("client", k)
        enc = world.image_backbone.copy()
        enc.reset_lora(crng.split("lora", 0))
        shard = world.train.subset(world.partition.assignments[k])
        clients.append(ClientState(k, shard, enc, text0, crng, lr=config.lr))
    server = ServerState(world.text_encoder, world.descriptions, config.boundary,
                         config.ex_query, config.sim_kind, config.negate_euclidean,
                         ObjectiveConfig(tau=tau, mu=0.0), config.lr, config.batch_size,
                         root.split("server"))
    labels = [world.partition.client_labels(k) for k in range(config.num_clients)]
    frozen_print = _fingerprint(_frozen_arrays(world.image_backbone))
    text_frozen_print = _fingerprint(_frozen_arrays(world.text_encoder))

    zeros = zero_deltas(enc_cfg)
    global_deltas = zeros
    personalized = [zeros for _ in clients]
    with_self = [zeros for _ in clients]
    raw_local = [zeros for _ in clients]
    text_feats = text0
    transport = Transport()
    mode = config.resolved_eval_mode()
    lora_params = sum(enc_cfg.rank * sum(enc_cfg.block_shape(i)) for i in enc_cfg.adapted)

    def snapshot(t, losses, text_loss, comm, wall):
        if kind == "local_only":
            # no global model exists; score each client's own model on the global test set
            g = _mean([evaluate_global(d, text_feats, world.test, world.image_backbone, tau)
                       for d in raw_local])
        else:
            g = evaluate_global(global_deltas, text_feats, world.test, world.image_backbone, tau)
        agg = evaluate_local(with_self, labels, text_feats, world.test, world.image_backbone, tau)
        raw = evaluate_local(raw_local, labels, text_feats, world.test, world.image_backbone, tau)
        chosen = raw if mode == "raw_local" else agg
        return RoundMetrics(
            round=t, global_accuracy=g, local_accuracy=chosen, local_accuracy_mean=_mean(chosen),
            local_accuracy_aggregated=agg, local_accuracy_raw=raw, local_eval_mode=mode,
            mean_local_loss=_mean(losses) if losses else None,
            text_loss=None if text_loss is None or math.isnan(text_loss) else text_loss,
            upload_factored=comm["upload_factored"], upload_dense=comm["upload_dense"],
            download_factored=comm["download_factored"], download_dense=comm["download_dense"],
            seed=config.seed, wall_time=wall)

    empty_comm = {"upload_factored": 0, "upload_dense": 0, "download_factored": 0, "download_dense": 0}
    metrics = [snapshot(0, [], None, empty_comm, 0.0)]
    result = RunResult(config, kind, metrics, world, clients, server, global_deltas, personalized,
                       with_self, raw_local, text_feats, transport)
    if kind == "zero_shot":
        return result

    ccfg = config.client_config()
    use_serial = config.n_jobs == 1 if serial is None else serial
    pool = None if use_serial else ThreadPoolExecutor(max_workers=config.n_jobs)
    try:
        for t in range(config.global_rounds):
            t0 = time.perf_counter()
            transport.begin_round(t + 1)
            if pool is None:
                packages = [local_update(c, ccfg) for c in clients]
            else:
                packages = list(pool.map(lambda c: local_update(c, ccfg), clients))
            raw_local = [p.deltas for p in packages]

            if kind == "local_only":
                # no communication: each client keeps building on its own deltas
                for c, p in zip(clients, packages):
                    apply_broadcast(c, p.deltas, c.text_feats)
                personalized = raw_local
                with_self = raw_local
                text_loss = None
                comm = dict(empty_comm)
                transport.ledger[-1].update(comm)
            else:
                for p in packages:
                    transport.send_up(p)
                result.upload_log.append([
                    {"client_id": p.client_id, "lora_params": p.lora_params,
                     "dense_params": p.dense_params, "prototypes": len(p.prototypes),
                     "shared": p.num_shared, "n_tilde": p.n_tilde} for p in packages])
                received = transport.collect_uploads()
                weighted = kind == "weighted_only"
                out, text_feats = aggregate_and_broadcast(server, received, config.text_epochs,
                                                          weighted_only=weighted)
                global_deltas = out.global_deltas
                personalized = out.personalized
                result.coefficient_log.append(out.coefficients.alpha)
                if weighted or config.num_clients == 1:
                    with_self = personalized
                else:
                    inference = aggregate(server, received, ex_query=False)
                    with_self = inference.personalized
                for c in clients:
                    transport.send_down(c.id, personalized[c.id], lora_params)
                transport.broadcast_text(text_feats)
                for c in clients:
                    deltas, feats = transport.receive(c.id)
                    apply_broadcast(c, deltas, feats)
                text_loss = server.text_loss
                comm = {k: v for k, v in transport.ledger[-1].items() if k != "round"}
                if config.check_invariants:
                    alpha = out.coefficients.alpha
                    _check(np.all(alpha >= 0) and np.allclose(alpha.sum(axis=1), 1.0, atol=1e-9),
                           "coefficient rows are not probability vectors")
                    if config.ex_query and not weighted:
                        _check(np.all(np.diag(alpha) == 0.0), "ex-query diagonal is not zero")
            if config.check_invariants:
                for c in clients:
                    _check(_fingerprint(_frozen_arrays(c.encoder)) == frozen_print,
                           f"client {c.id} modified its frozen backbone")
                _check(_fingerprint(_frozen_arrays(server.text_encoder)) == text_frozen_print,
                       "server modified the frozen text backbone")
            result.norm_log.append({
                "round": t + 1,
                "global": _stack_norm(global_deltas),
                "personalized": [_stack_norm(p) for p in personalized],
            })
            losses = [p.mean_loss for p in packages if not math.isnan(p.mean_loss)]
            metrics.append(snapshot(t + 1, losses, text_loss, comm, time.perf_counter() - t0))
    finally:
        if pool is not None:
            pool.shutdown()

    result.global_deltas = global_deltas
    result.personalized = personalized
    result.with_self = with_self
    result.raw_local = raw_local
    result.text_feats = text_feats
    return result


def run_baseline(config: RunConfig, kind: str, data: Optional[tuple] = None) -> RunResult:
    if kind not in ("zero_shot", "local_only", "weighted_only"):
        raise ConfigError(f"unknown baseline {kind!r}")
    return run_training(config, kind=kind, data=data)


def comm_ledger(result: RunResult) -> dict:
    """Closed-form scalar counts per round, from the logged upload contents."""
    cfg = result.config
    enc_cfg = cfg.encoder_config()
    d = enc_cfg.d_embed
    lora_params = sum(enc_cfg.rank * sum(enc_cfg.block_shape(i)) for i in enc_cfg.adapted)
    dense_params = sum(int(np.prod(enc_cfg.block_shape(i))) for i in enc_cfg.adapted)
    text = cfg.num_classes * d
    rounds = []
    for t, ups in enumerate(result.upload_log, start=1):
        rounds.append({
            "round": t,
            "upload_factored": sum(u["lora_params"] + d * u["prototypes"] + (d + 1) * u["shared"]
                                   for u in ups),
            "upload_dense": sum(u["dense_params"] + d * u["prototypes"] + (d + 1) * u["shared"]
                                for u in ups),
            "download_factored": len(ups) * lora_params + text,
            "download_dense": len(ups) * dense_params + text,
            "download_text": text,
        })
    keys = ("upload_factored", "upload_dense", "download_factored", "download_dense", "download_text")
    totals = {k: sum(r[k] for r in rounds) for k in keys}
    return {"rounds": rounds, "totals": totals}


def aggregation_report(result: RunResult) -> dict:
    """Coefficient matrices and delta norms per round."""
    return {
        "config": result.config.to_dict(),
        "kind": result.kind,
        "rounds": [
            {"round": n["round"],
             "coefficients": (result.coefficient_log[i].tolist()
                              if i < len(result.coefficient_log) else None),
             "global_delta_norm": n["global"],
             "personalized_delta_norms": n["personalized"]}
            for i, n in enumerate(result.norm_log)
        ],
    }


# -- checkpoints -----------------------------------------------------------------

def _write_stack(path: Path, deltas: Sequence[DenseDelta]):
    path.write_bytes(serialize_matrices([d.w for d in deltas]))


def _read_stack(path: Path) -> List[DenseDelta]:
    mats, _ = deserialize_matrices(path.read_bytes())
    return [DenseDelta(m) for m in mats]


def save_checkpoints(result: RunResult, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_stack(d / "global.fald", result.global_deltas)
    for k in range(len(result.clients)):
        _write_stack(d / f"client_{k}_personalized.fald", result.personalized[k])
        _write_stack(d / f"client_{k}_with_self.fald", result.with_self[k])
        _write_stack(d / f"client_{k}_local.fald", result.raw_local[k])
    text_enc = result.server.text_encoder
    mats = []
    for i in text_enc.config.adapted:
        mats.extend([text_enc.blocks[i].lora.a, text_enc.blocks[i].lora.b])
    if mats:
        (d / "text_lora.fald").write_bytes(serialize_matrices(mats, text_enc.config.gamma))
    (d / "text_features.fald").write_bytes(serialize_matrices([result.text_feats]))
    meta = {"config": result.config.to_dict(), "kind": result.kind,
            "encoder": result.config.encoder_config().to_dict(),
            "num_clients": len(result.clients)}
    (d / "checkpoint.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return d


def load_checkpoint_config(directory) -> RunConfig:
    meta = json.loads((Path(directory) / "checkpoint.json").read_text())
    return RunConfig.from_dict(meta["config"])


def evaluate_checkpoints(directory, config: Optional[RunConfig] = None,
                         data: Optional[tuple] = None) -> dict:
    """Recompute final global and local accuracies from saved deltas.

    Text features are rebuilt from the saved text adapters and the seeded
    frozen text tower.
    """
    d = Path(directory)
    meta = json.loads((d / "checkpoint.json").read_text())
    config = config or RunConfig.from_dict(meta["config"])
    world = build_world(config, data)
    text_enc = world.text_encoder
    if (d / "text_lora.fald").exists():
        mats, gamma = deserialize_matrices((d / "text_lora.fald").read_bytes())
        for n, i in enumerate(text_enc.config.adapted):
            text_enc.blocks[i].lora.a[...] = mats[2 * n]
            text_enc.blocks[i].lora.b[...] = mats[2 * n + 1]
        text_enc.touch()
    text_feats = text_features(text_enc, world.descriptions)
    global_deltas = _read_stack(d / "global.fald")
    K = config.num_clients
    labels = [world.partition.client_labels(k) for k in range(K)]
    with_self = [_read_stack(d / f"client_{k}_with_self.fald") for k in range(K)]
    raw = [_read_stack(d / f"client_{k}_local.fald") for k in range(K)]
    if meta.get("kind") == "local_only":
        g = _mean([evaluate_global(r, text_feats, world.test, world.image_backbone, config.tau)
                   for r in raw])
    else:
        g = evaluate_global(global_deltas, text_feats, world.test, world.image_backbone, config.tau)
    agg = evaluate_local(with_self, labels, text_feats, world.test, world.image_backbone, config.tau)
    loc = evaluate_local(raw, labels, text_feats, world.test, world.image_backbone, config.tau)
    mode = config.resolved_eval_mode()
    chosen = loc if mode == "raw_local" else agg
    return {"global_accuracy": g, "local_accuracy": chosen, "local_accuracy_mean": _mean(chosen),
            "local_accuracy_aggregated": agg, "local_accuracy_raw": loc, "local_eval_mode": mode}
