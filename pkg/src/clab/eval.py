"""Evaluation of an encoder: weighted k-NN, linear probing, finetuning, and metrics."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from clab.data import AugmentationPolicy, Dataset, augment_batch
from clab.errors import ConfigError, ContractError, NumericError
from clab.nn import tensor as T
from clab.nn.checkpoint import save as save_tensors
from clab.nn.layers import Encoder, LinearHead
from clab.nn.optim import LrSchedule, Plateau, sgd_step

log = logging.getLogger(__name__)

PROTOCOLS = ("knn", "linear", "finetune")


@dataclass
class FeatureBank:
    features: np.ndarray
    labels: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.labels):
            raise ContractError(f"bank of shape {self.features.shape} does not match "
                                f"{len(self.labels)} labels")
        if self.normalized:
            norms = np.linalg.norm(self.features, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ContractError("bank flagged normalized but rows are not unit-norm")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def normalize(self) -> "FeatureBank":
        if self.normalized:
            return self
        unit = bool(np.all(np.linalg.norm(self.features, axis=1) > 0))
        return FeatureBank(_safe_normalize(self.features), self.labels, unit)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label"] + [f"f{i}" for i in range(self.dim)])
            for lab, row in zip(self.labels, self.features):
                w.writerow([int(lab)] + [repr(float(v)) for v in row])

    def save(self, path: str | Path) -> None:
        save_tensors(path, {"features": self.features, "labels": self.labels.astype(np.float64)})


def _safe_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def extract_features(encoder: Encoder, ds: Dataset, batch_size: int = 500) -> FeatureBank:
    """Backbone features of every sample, in dataset order, without augmentation."""
    if tuple(ds.image_shape) != encoder.config.input_shape:
        raise ContractError(f"dataset images {ds.image_shape} do not match encoder input "
                            f"{encoder.config.input_shape}")
    chunks = []
    with T.no_grad():
        for s in range(0, len(ds), batch_size):
            chunks.append(encoder.backbone(ds.images[s:s + batch_size]).data)
    return FeatureBank(np.concatenate(chunks), ds.labels.copy())


# ---------------------------------------------------------------- k-NN

def knn_predict(bank: FeatureBank, queries: np.ndarray, k: int = 200,
                temperature: float = 0.07) -> np.ndarray:
    """Weighted k-NN vote over cosine similarity.

    Neighbours are ranked by similarity, ties going to the lower bank index;
    each votes ``exp(sim / temperature)`` for its label.  The class with the
    largest total wins, ties going to the smaller class index.
    """
    if len(bank) == 0:
        raise ContractError("k-NN needs a non-empty bank")
    if not temperature > 0:
        raise ConfigError("vote temperature must be > 0", "knn_temperature")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != bank.dim:
        raise ContractError(f"query dim {queries.shape[1]} != bank dim {bank.dim}")
    k = int(min(max(k, 1), len(bank)))
    n_classes = int(bank.labels.max()) + 1
    sims = _safe_normalize(queries) @ _safe_normalize(bank.features).T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    preds = np.empty(len(queries), dtype=np.int64)
    for i in range(len(queries)):
        nb = order[i]
        votes = np.bincount(bank.labels[nb], weights=np.exp(sims[i, nb] / temperature),
                            minlength=n_classes)
        preds[i] = int(np.argmax(votes))
    return preds


def default_k(n: int, full_scale: int = 200) -> int:
    return max(1, min(full_scale, n // 2))


# ---------------------------------------------------------------- metrics

def metrics(predictions: Sequence[int], labels: Sequence[int], n_classes: int | None = None) -> dict:
    """Top-1 accuracy and macro F1 over the classes present in ``labels``."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape or p.ndim != 1:
        raise ContractError("predictions and labels must be equal-length 1-D sequences")
    if len(y) == 0:
        raise ContractError("metrics need at least one sample")
    f1s = []
    for c in np.unique(y):
        tp = np.sum((p == c) & (y == c))
        fp = np.sum((p == c) & (y != c))
        fn = np.sum((p != c) & (y == c))
        f1s.append(2.0 * tp / (2.0 * tp + fp + fn) if tp else 0.0)
    return {"accuracy": float(np.mean(p == y)), "macro_f1": float(np.mean(f1s))}


# ---------------------------------------------------------------- trained heads

@dataclass
class EvalConfig:
    k: int | None = None
    knn_temperature: float = 0.07
    linear_lr: float = 1.0
    backbone_lr: float = 3e-4
    head_lr: float = 1.0
    batch_size: int = 256
    max_epochs: int = 50
    linear_patience: int = 5
    finetune_patience: int = 2
    plateau_factor: float = 0.5
    early_stop: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0
    normalize_features: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1", "k")
        for name in ("linear_lr", "head_lr", "knn_temperature"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0", name)
        if self.backbone_lr < 0:
            raise ConfigError("backbone_lr must be >= 0", "backbone_lr")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0", "batch_size")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    head: LinearHead
    encoder: Encoder | None
    metrics: dict
    best_epoch: int
    history: list[dict]


def _prep(feats: np.ndarray, normalize: bool) -> np.ndarray:
    return _safe_normalize(feats) if normalize else feats


def _batch_order(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def _head_eval(head: LinearHead, feats: np.ndarray, labels: np.ndarray) -> tuple[float, dict]:
    with T.no_grad():
        logits = head(feats)
        loss = T.cross_entropy(logits, labels).item()
    return loss, metrics(logits.data.argmax(axis=1), labels)


def _n_classes(*label_sets: np.ndarray) -> int:
    return int(max(int(np.max(ls)) for ls in label_sets if len(ls))) + 1


def linear_probe(train: FeatureBank, val: FeatureBank, cfg: EvalConfig,
                 n_classes: int | None = None) -> TrainResult:
    """Train a single affine layer on frozen features with cross-entropy.

    The rate halves after ``linear_patience`` epochs without validation-loss
    improvement; training stops after ``early_stop`` such epochs or
    ``max_epochs``.  The head from the epoch with best validation accuracy is
    returned.
    """
    if train.dim != val.dim:
        raise ContractError("train and validation banks differ in feature dimension")
    C = n_classes or _n_classes(train.labels, val.labels)
    head = LinearHead(train.dim, C, np.random.default_rng([cfg.seed, 11]))
    rng = np.random.default_rng([cfg.seed, 12])
    xtr = _prep(train.features, cfg.normalize_features)
    xva = _prep(val.features, cfg.normalize_features)
    plateau = Plateau(LrSchedule("plateau", cfg.linear_lr, patience=cfg.linear_patience,
                                 factor=cfg.plateau_factor))
    loss0, m0 = _head_eval(head, xva, val.labels)
    best = (m0["accuracy"], 0, head.params.arrays(), m0)
    history = [{"epoch": 0, "val_loss": loss0, **m0}]
    best_loss, stale = loss0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = plateau.rate
        for idx in _batch_order(len(train), cfg.batch_size, rng):
            loss = T.cross_entropy(head(xtr[idx]), train.labels[idx])
            head.params.zero_grad()
            T.backward(loss)
            sgd_step(head.params, lr, cfg.momentum, cfg.weight_decay)
        vloss, m = _head_eval(head, xva, val.labels)
        history.append({"epoch": epoch, "val_loss": vloss, "lr": lr, **m})
        plateau.observe(vloss)
        if m["accuracy"] > best[0]:
            best = (m["accuracy"], epoch, head.params.arrays(), m)
        if vloss < best_loss:
            best_loss, stale = vloss, 0
        else:
            stale += 1
            if stale >= cfg.early_stop:
                break
    head.params.load_arrays(best[2])
    head.params.clear_grad()
    return TrainResult(head, None, best[3], best[1], history)


def finetune(encoder: Encoder, train: Dataset, val: Dataset, cfg: EvalConfig,
             policy: AugmentationPolicy | None = None, n_classes: int | None = None) -> TrainResult:
    """End-to-end training of a copy of ``encoder`` plus a fresh linear head.

    Backbone and head have separate rates (``backbone_lr``/``head_lr``), each
    halved after ``finetune_patience`` epochs without validation-loss
    improvement.  ``policy`` augments training images; ``None`` disables
    augmentation.  The input encoder is never modified.
    """
    enc = encoder.copy(requires_grad=True)
    names = enc.backbone_names()
    C = n_classes or _n_classes(train.labels, val.labels)
    head = LinearHead(enc.config.feat_dim, C, np.random.default_rng([cfg.seed, 11]))
    rng = np.random.default_rng([cfg.seed, 12])
    aug_rng = np.random.default_rng([cfg.seed, 13])
    sched_bb = Plateau(LrSchedule("plateau", cfg.backbone_lr, patience=cfg.finetune_patience,
                                  factor=cfg.plateau_factor))
    sched_head = Plateau(LrSchedule("plateau", cfg.head_lr, patience=cfg.finetune_patience,
                                    factor=cfg.plateau_factor))

    def evaluate():
        feats = _prep(extract_features(enc, val).features, cfg.normalize_features)
        return _head_eval(head, feats, val.labels)

    def snapshot():
        return enc.params.arrays(), head.params.arrays()

    loss0, m0 = evaluate()
    best = (m0["accuracy"], 0, snapshot(), m0)
    history = [{"epoch": 0, "val_loss": loss0, **m0}]
    best_loss, stale = loss0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr_bb, lr_head = sched_bb.rate, sched_head.rate
        for idx in _batch_order(len(train), cfg.batch_size, rng):
            x = train.images[idx]
            if policy is not None:
                x = augment_batch(x, policy, aug_rng)
            feats = enc.backbone(x)
            if cfg.normalize_features:
                feats = T.l2_normalize(feats)
            loss = T.cross_entropy(head(feats), train.labels[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"finetune diverged at epoch {epoch}")
            enc.params.zero_grad()
            head.params.zero_grad()
            try:
                T.backward(loss)
            except NumericError as exc:
                raise NumericError(f"finetune diverged at epoch {epoch}: {exc}") from exc
            sgd_step(enc.params, lr_bb, cfg.momentum, cfg.weight_decay, names=names)
            sgd_step(head.params, lr_head, cfg.momentum, cfg.weight_decay)
        vloss, m = evaluate()
        history.append({"epoch": epoch, "val_loss": vloss, "lr": lr_head, **m})
        sched_bb.observe(vloss)
        sched_head.observe(vloss)
        if m["accuracy"] > best[0]:
            best = (m["accuracy"], epoch, snapshot(), m)
        if vloss < best_loss:
            best_loss, stale = vloss, 0
        else:
            stale += 1
            if stale >= cfg.early_stop:
                break
    enc.params.load_arrays(best[2][0])
    head.params.load_arrays(best[2][1])
    enc.params.clear_grad()
    head.params.clear_grad()
    return TrainResult(head, enc, best[3], best[1], history)


def head_predict(result: TrainResult, feats: np.ndarray, normalize: bool) -> np.ndarray:
    return result.head.predict(_prep(feats, normalize))
