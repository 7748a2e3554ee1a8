"""Momentum contrast: key queue, EMA key encoder, InfoNCE with temporal masking."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from clab.data import MODES, AugmentationPolicy, sample_pairs
from clab.errors import ConfigError, ContractError, NumericError
from clab.nn import tensor as T
from clab.nn.checkpoint import load as load_tensors, save as save_tensors
from clab.nn.layers import Encoder, EncoderConfig
from clab.nn.optim import LrSchedule, ParamSet, schedule_rate, sgd_step
from clab.nn.tensor import Tensor

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6


@dataclass
class ContrastiveConfig:
    temperature: float = 0.2
    queue_size: int = 512
    ema: float = 0.99
    mode: str = "mocotp"
    masking: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0", "temperature")
        if self.queue_size < 1:
            raise ConfigError("queue_size must be >= 1", "queue_size")
        if not 0.0 <= self.ema <= 1.0:
            raise ConfigError("ema must lie in [0, 1]", "ema")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}", "mode")


class KeyQueue:
    """FIFO of unit-norm key embeddings tagged with their location id."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ConfigError("queue capacity must be >= 1", "queue_size")
        self.capacity = capacity
        self.dim = dim
        self.embeddings = np.zeros((0, dim))
        self.locations = np.zeros(0, dtype=np.int64)

    @classmethod
    def random(cls, capacity: int, dim: int, rng: np.random.Generator) -> "KeyQueue":
        """A full queue of random unit vectors tagged with location -1.

        Starting full keeps the number of negatives fixed from the first step,
        so early losses are comparable with later ones.
        """
        q = cls(capacity, dim)
        emb = rng.normal(size=(capacity, dim))
        q.embeddings = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        q.locations = np.full(capacity, -1, dtype=np.int64)
        return q

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def enqueue(self, keys: np.ndarray, locations: Sequence) -> None:
        keys = np.asarray(keys, dtype=np.float64)
        locations = np.asarray(locations)
        if keys.ndim != 2 or keys.shape[1] != self.dim or len(locations) != keys.shape[0]:
            raise ContractError(f"expected ({len(locations)}, {self.dim}) keys, got {keys.shape}")
        if keys.shape[0] > self.capacity:
            raise ConfigError(f"batch of {keys.shape[0]} keys exceeds queue capacity "
                              f"{self.capacity}", "queue_size")
        _check_unit(keys, "queued keys")
        if len(self) == 0:
            self.locations = locations.copy()
        else:
            self.locations = np.concatenate([self.locations, locations])
        self.embeddings = np.concatenate([self.embeddings, keys])
        if len(self) > self.capacity:
            drop = len(self) - self.capacity
            self.embeddings = self.embeddings[drop:]
            self.locations = self.locations[drop:]

    def state(self) -> dict[str, np.ndarray]:
        return {"queue.embeddings": self.embeddings.copy(),
                "queue.locations": self.locations.astype(np.float64)}

    @classmethod
    def from_state(cls, capacity: int, dim: int, state: dict[str, np.ndarray]) -> "KeyQueue":
        q = cls(capacity, dim)
        emb = state.get("queue.embeddings")
        if emb is not None and emb.size and emb.shape[1] == dim:
            q.embeddings = np.asarray(emb, dtype=np.float64).reshape(-1, dim)
            q.locations = state["queue.locations"].astype(np.int64)
        return q


def _check_unit(x: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(np.atleast_2d(x), axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ContractError(f"{what} must have unit norm (max deviation "
                            f"{np.abs(norms - 1.0).max():.2e})")


def info_nce_batch(q: Tensor, k_pos, queue_emb: np.ndarray, queue_locs: np.ndarray,
                   query_locs: np.ndarray, temperature: float, mask: bool) -> Tensor:
    """Mean InfoNCE over a batch of queries.

    Logit column 0 holds q.k+; the remaining columns hold q.k- for every
    queue entry.  With ``mask`` on, queue entries whose location equals the
    query's are removed from that query's softmax denominator.
    """
    if not temperature > 0:
        raise ConfigError("temperature must be > 0", "temperature")
    q = T.as_tensor(q)
    k_pos = T.as_tensor(k_pos)
    if q.shape != k_pos.shape:
        raise ContractError(f"query {q.shape} and positive key {k_pos.shape} shapes differ")
    _check_unit(q.data, "queries")
    _check_unit(k_pos.data, "positive keys")
    B = q.shape[0]
    pos = T.rowdot(q, k_pos)
    keep = None
    if len(queue_emb):
        if queue_emb.shape[1] != q.shape[1]:
            raise ContractError("queue and query dimensions differ")
        _check_unit(queue_emb, "negative keys")
        logits = T.concat([pos, T.matmul(q, Tensor(queue_emb.T))], axis=1)
        if mask:
            same = np.asarray(query_locs)[:, None] == np.asarray(queue_locs)[None, :]
            keep = np.concatenate([np.ones((B, 1), dtype=bool), ~same], axis=1)
    else:
        logits = pos
    return T.cross_entropy(logits * (1.0 / temperature), np.zeros(B, dtype=np.int64), keep=keep)


def info_nce(q, k_pos, negatives: Sequence[tuple[np.ndarray, object]], query_location,
             temperature: float, mask_false_negatives: bool) -> Tensor:
    """InfoNCE for a single query against explicit ``(embedding, location_id)`` negatives."""
    q = q if isinstance(q, Tensor) else Tensor(np.asarray(q, dtype=np.float64))
    k_pos = k_pos if isinstance(k_pos, Tensor) else Tensor(np.asarray(k_pos, dtype=np.float64))
    if q.data.ndim == 1:
        q = T.reshape(q, (1, -1))
    if k_pos.data.ndim == 1:
        k_pos = T.reshape(k_pos, (1, -1))
    if negatives:
        emb = np.stack([np.asarray(e, dtype=np.float64) for e, _ in negatives])
        locs = np.empty(len(negatives), dtype=object)
        locs[:] = [loc for _, loc in negatives]
    else:
        emb, locs = np.zeros((0, q.shape[1])), np.empty(0, dtype=object)
    qloc = np.empty(1, dtype=object)
    qloc[0] = query_location
    return info_nce_batch(q, k_pos, emb, locs, qloc, temperature, mask_false_negatives)


@dataclass
class MomentumPair:
    """Query encoder trained by SGD and a key encoder following it by EMA."""
    query: Encoder
    key: Encoder
    m: float = 0.99

    @classmethod
    def from_query(cls, query: Encoder, m: float) -> "MomentumPair":
        return cls(query, query.copy(requires_grad=False), m)


def ema_update(key: ParamSet, query: ParamSet, m: float) -> None:
    """key <- m * key + (1 - m) * query, elementwise for every parameter."""
    if key.names() != query.names():
        raise ContractError("key and query parameter names differ")
    for name in key:
        kp, qp = key[name], query[name]
        if kp.shape != qp.shape:
            raise ContractError(f"shape mismatch for {name!r}: {kp.shape} vs {qp.shape}")
        if m == 1.0:
            continue
        kp.data = qp.data.copy() if m == 0.0 else m * kp.data + (1.0 - m) * qp.data


@dataclass
class StepResult:
    loss: float
    collision_rate: float


def moco_step(pair: MomentumPair, queue: KeyQueue, view_q: np.ndarray, view_k: np.ndarray,
              locations: np.ndarray, cfg: ContrastiveConfig, lr: float,
              momentum: float = 0.9, weight_decay: float = 1e-4) -> StepResult:
    """One training step, in this order:

    1. EMA update of the key encoder; 2. gradient-free, normalised key
    embeddings; 3. projected query embeddings; 4. mean InfoNCE against the
    current queue; 5. backward + SGD on the query encoder; 6. enqueue keys.
    ``collision_rate`` is the share of queries with at least one
    same-location entry in the queue they were scored against.
    """
    ema_update(pair.key.params, pair.query.params, pair.m)
    with T.no_grad():
        keys = pair.key.forward(view_k, "projected").data
    q = pair.query.forward(view_q, "projected")
    collisions = 0.0
    if len(queue):
        same = np.asarray(locations)[:, None] == queue.locations[None, :]
        collisions = float(same.any(axis=1).mean())
    loss = info_nce_batch(q, keys, queue.embeddings, queue.locations, locations,
                          cfg.temperature, cfg.masking)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError("non-finite contrastive loss")
    params = pair.query.params
    params.zero_grad()
    T.backward(loss)
    sgd_step(params, lr, momentum=momentum, weight_decay=weight_decay)
    params.clear_grad()
    queue.enqueue(keys, locations)
    return StepResult(value, collisions)


# ---------------------------------------------------------------- pretraining loop

@dataclass
class PretrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.contrastive, dict):
            self.contrastive = ContrastiveConfig(**self.contrastive)
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationPolicy(**self.augmentation)
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", "epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.batch_size > self.contrastive.queue_size:
            raise ConfigError("batch_size must not exceed queue_size", "batch_size")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0", "lr")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("schedule must be 'cosine' or 'constant'", "schedule")

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "contrastive": asdict(self.contrastive),
                "augmentation": self.augmentation.to_dict(), "epochs": self.epochs,
                "batch_size": self.batch_size, "lr": self.lr, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "schedule": self.schedule}


@dataclass
class PretrainState:
    pair: MomentumPair
    queue: KeyQueue
    config: PretrainConfig
    seed: int
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    collision_history: list[float] = field(default_factory=list)
    rng_state: dict | None = None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    # drop the ragged tail so every step sees a full batch
    order = rng.permutation(n)
    if n < batch_size:
        yield order
        return
    for s in range(0, n - batch_size + 1, batch_size):
        yield order[s:s + batch_size]


def init_state(cfg: PretrainConfig, seed: int) -> PretrainState:
    query = Encoder.init(cfg.encoder, np.random.default_rng([seed, 1]))
    pair = MomentumPair.from_query(query, cfg.contrastive.ema)
    queue = KeyQueue.random(cfg.contrastive.queue_size, cfg.encoder.proj_dim,
                            np.random.default_rng([seed, 3]))
    return PretrainState(pair, queue, cfg, seed)


def pretrain(data, cfg: PretrainConfig, seed: int, out: str | Path | None = None,
             state: PretrainState | None = None, until: int | None = None) -> PretrainState:
    """Self-supervised pretraining over ``data`` (a label-free view).

    Pass a previously saved ``state`` (see :func:`load_pretrain`) to resume;
    epochs already recorded are not repeated.  If ``out`` is given, a
    checkpoint is written after every epoch.  ``until`` stops early (the
    schedule still spans ``cfg.epochs``), which is how an interrupted run looks.
    """
    from clab.data import Dataset

    if isinstance(data, Dataset):
        data = data.unlabeled()
    if tuple(data.image_shape) != cfg.encoder.input_shape:
        raise ContractError(f"data images {data.image_shape} do not match encoder input "
                            f"{cfg.encoder.input_shape}")
    st = state or init_state(cfg, seed)
    rng = np.random.default_rng([seed, 2])
    if st.rng_state is not None:
        rng.bit_generator.state = st.rng_state
    n = len(data)
    steps_per_epoch = max(1, n // cfg.batch_size)
    sched = LrSchedule("cosine" if cfg.schedule == "cosine" else "constant", cfg.lr,
                       total_steps=max(1, cfg.epochs * steps_per_epoch))
    stop = cfg.epochs if until is None else min(until, cfg.epochs)
    while st.epoch < stop:
        losses, coll = [], []
        for idx in _batches(n, cfg.batch_size, rng):
            t = st.epoch * steps_per_epoch + len(losses)
            lr = schedule_rate(sched, t)
            vq, vk, locs = sample_pairs(data, idx, cfg.contrastive.mode, cfg.augmentation, rng)
            res = moco_step(st.pair, st.queue, vq, vk, locs, cfg.contrastive, lr,
                            cfg.momentum, cfg.weight_decay)
            losses.append(res.loss)
            coll.append(res.collision_rate)
        st.loss_history.append(float(np.mean(losses)))
        st.collision_history.append(float(np.mean(coll)))
        st.epoch += 1
        st.rng_state = rng.bit_generator.state
        log.info("pretrain epoch %d/%d loss %.4f", st.epoch, cfg.epochs, st.loss_history[-1])
        if out is not None:
            save_pretrain(st, out)
    if out is not None and cfg.epochs == 0:
        save_pretrain(st, out)
    return st


def save_pretrain(st: PretrainState, out: str | Path) -> Path:
    """Write ``<out>.clab`` (query, key, queue tensors) and ``<out>.json`` sidecar."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {}
    for name, t in st.pair.query.params.items():
        tensors[f"query.{name}"] = t.data
    for name, t in st.pair.key.params.items():
        tensors[f"key.{name}"] = t.data
    for name, v in st.pair.query.params.momentum.items():
        tensors[f"momentum.{name}"] = v
    tensors.update(st.queue.state())
    tensor_path = out.with_suffix(".clab")
    save_tensors(tensor_path, tensors)
    sidecar = {"kind": "pretrain", "config": st.config.to_dict(), "seed": st.seed,
               "epoch": st.epoch, "loss_history": st.loss_history,
               "collision_history": st.collision_history, "optimizer_step": st.pair.query.params.step,
               "rng_state": st.rng_state}
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return tensor_path


def load_pretrain(path: str | Path) -> PretrainState:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    tensors = load_tensors(path.with_suffix(".clab"))
    cfg = PretrainConfig(**meta["config"])
    st = init_state(cfg, meta["seed"])
    st.pair.query.params.load_arrays({k[6:]: v for k, v in tensors.items() if k.startswith("query.")})
    st.pair.key.params.load_arrays({k[4:]: v for k, v in tensors.items() if k.startswith("key.")})
    st.pair.query.params.momentum = {k[9:]: v.copy() for k, v in tensors.items()
                                     if k.startswith("momentum.")}
    st.pair.query.params.step = meta.get("optimizer_step", 0)
    st.queue = KeyQueue.from_state(cfg.contrastive.queue_size, cfg.encoder.proj_dim, tensors)
    st.epoch = meta["epoch"]
    st.loss_history = list(meta["loss_history"])
    st.collision_history = list(meta.get("collision_history", []))
    st.rng_state = meta.get("rng_state")
    return st


def load_encoder(path: str | Path) -> Encoder:
    """Load the backbone-bearing encoder from any clab checkpoint.

    Pretraining checkpoints yield their query encoder; supervised checkpoints
    their encoder.
    """
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    tensors = load_tensors(path.with_suffix(".clab"))
    enc_cfg = EncoderConfig(**meta["config"]["encoder"])
    enc = Encoder.init(enc_cfg, 0)
    prefix = "query." if meta.get("kind") == "pretrain" else "encoder."
    enc.params.load_arrays({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    return enc
