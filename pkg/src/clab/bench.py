"""Label-efficiency benchmark: subsampling, the variant x fraction x protocol grid, aggregation.

Seeds
-----
Every random choice is derived from the master seed with :func:`derive_seed`:
``master XOR h(parts)`` where ``h`` is the first 8 bytes of SHA-256 over the
``repr`` of the parts (e.g. ``("subset", 0.1, 2)``), masked to 63 bits.  The
derivation uses no process state, so reports reproduce across machines.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from clab.contrastive import (ContrastiveConfig, PretrainConfig, load_encoder, load_pretrain,
                              pretrain)
from clab.data import (AugmentationPolicy, Dataset, SyntheticSpec, augment_batch,
                       generate_synthetic, load_folder)
from clab.errors import ConfigError, ContractError, NumericError
from clab.eval import (PROTOCOLS, EvalConfig, FeatureBank, default_k, extract_features,
                       finetune, knn_predict, linear_probe, metrics)
from clab.nn import tensor as T
from clab.nn.checkpoint import load as load_tensors, save as save_tensors
from clab.nn.layers import Encoder, EncoderConfig, LinearHead
from clab.nn.optim import LrSchedule, schedule_rate, sgd_step

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
VARIANTS = ("none", "supervised", "moco", "mocotp")
SSL_VARIANTS = ("moco", "mocotp")
METRICS = ("accuracy", "macro_f1")


def derive_seed(master: int, *parts) -> int:
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return (int(master) ^ int.from_bytes(digest[:8], "little")) & (2 ** 63 - 1)


# ---------------------------------------------------------------- configuration

@dataclass
class SupervisedConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", "supervised.epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "supervised.batch_size")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0", "supervised.lr")


# supervised and random-init backbones are finetuned with a larger step than the
# SSL ones; at desk scale the small backbone rate barely moves a random init
SUPERVISED_EVAL = {"backbone_lr": 0.03, "head_lr": 0.03, "weight_decay": 1e-4}


def _build(cls, value, name: str):
    """Instantiate dataclass ``cls`` from a dict, naming the bad field on failure."""
    if isinstance(value, cls):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be an object", name)
    known = {f.name for f in fields(cls)}
    for key in value:
        if key not in known:
            raise ConfigError(f"unknown field {name}.{key}", f"{name}.{key}")
    try:
        return cls(**value)
    except ConfigError as exc:
        field_name = f"{name}.{exc.field}" if exc.field and not exc.field.startswith(name) else exc.field
        raise ConfigError(f"{name}: {exc}", field_name) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}", name) from None


def _check_source(value, name: str) -> dict | None:
    if value is None:
        return None
    if not isinstance(value, dict) or len(value) == 0:
        raise ConfigError(f"{name} must be an object", name)
    if "synthetic" in value:
        extra = set(value) - {"synthetic"}
        if extra:
            raise ConfigError(f"unknown field {name}.{sorted(extra)[0]}", f"{name}.{sorted(extra)[0]}")
        spec = _build(SyntheticSpec, value["synthetic"], f"{name}.synthetic")
        return {"synthetic": spec.to_dict()}
    if "folder" in value:
        extra = set(value) - {"folder", "metadata"}
        if extra:
            raise ConfigError(f"unknown field {name}.{sorted(extra)[0]}", f"{name}.{sorted(extra)[0]}")
        return {"folder": str(value["folder"]), "metadata": value.get("metadata")}
    raise ConfigError(f"{name} needs a 'synthetic' or 'folder' entry", name)


@dataclass
class ExperimentConfig:
    """Everything a benchmark run needs; serialised verbatim into every artifact.

    ``train_data`` feeds pretraining and the labeled subsets; ``test_data`` is
    the held-out evaluation set (for synthetic training data it defaults to an
    independent draw, ``split=1``, with a fifth of the locations).
    ``pretrain_data`` optionally points SSL/supervised pretraining at another
    dataset (pretrain on A, benchmark on B).
    """
    train_data: dict = field(default_factory=lambda: {"synthetic": {}})
    test_data: dict | None = None
    pretrain_data: dict | None = None
    variants: list = field(default_factory=lambda: list(VARIANTS))
    fractions: list = field(default_factory=lambda: [0.01, 0.1, 1.0])
    repeats: int = 3
    protocols: list = field(default_factory=lambda: list(PROTOCOLS))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    supervised: SupervisedConfig = field(default_factory=SupervisedConfig)
    eval_ssl: EvalConfig = field(default_factory=EvalConfig)
    eval_supervised: EvalConfig = field(default_factory=lambda: EvalConfig(**SUPERVISED_EVAL))
    finetune_augmentation: AugmentationPolicy | None = None
    seed: int = 0
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config version {self.version} "
                              f"(expected {SCHEMA_VERSION})", "version")
        self.train_data = _check_source(self.train_data, "train_data")
        self.test_data = _check_source(self.test_data, "test_data")
        self.pretrain_data = _check_source(self.pretrain_data, "pretrain_data")
        if self.test_data is None and "synthetic" not in self.train_data:
            raise ConfigError("test_data is required when train_data is a folder", "test_data")
        self.variants = list(self.variants)
        if not self.variants or any(v not in VARIANTS for v in self.variants):
            raise ConfigError(f"variants must be a non-empty subset of {VARIANTS}", "variants")
        if len(set(self.variants)) != len(self.variants):
            raise ConfigError("variants must not repeat", "variants")
        self.protocols = list(self.protocols)
        if not self.protocols or any(p not in PROTOCOLS for p in self.protocols):
            raise ConfigError(f"protocols must be a non-empty subset of {PROTOCOLS}", "protocols")
        self.fractions = [float(f) for f in self.fractions]
        if not self.fractions or any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("fractions must lie in (0, 1]", "fractions")
        if len(set(self.fractions)) != len(self.fractions):
            raise ConfigError("fractions must not repeat", "fractions")
        if int(self.repeats) < 1:
            raise ConfigError("repeats must be >= 1", "repeats")
        self.repeats = int(self.repeats)
        self.encoder = _build(EncoderConfig, self.encoder, "encoder")
        if isinstance(self.pretrain, dict):
            pre = dict(self.pretrain)
            if "encoder" in pre:
                raise ConfigError("set the encoder at top level, not under pretrain",
                                  "pretrain.encoder")
            pre["contrastive"] = _build(ContrastiveConfig, pre.get("contrastive", {}),
                                        "pretrain.contrastive")
            pre["augmentation"] = _build(AugmentationPolicy, pre.get("augmentation", {}),
                                         "pretrain.augmentation")
            self.pretrain = _build(PretrainConfig, {**pre, "encoder": self.encoder}, "pretrain")
        else:
            self.pretrain = _build(PretrainConfig, self.pretrain, "pretrain")
            self.pretrain.encoder = self.encoder
        self.supervised = _build(SupervisedConfig, self.supervised, "supervised")
        self.eval_ssl = _build(EvalConfig, self.eval_ssl, "eval_ssl")
        if isinstance(self.eval_supervised, dict):
            self.eval_supervised = {**SUPERVISED_EVAL, **self.eval_supervised}
        self.eval_supervised = _build(EvalConfig, self.eval_supervised, "eval_supervised")
        if self.finetune_augmentation is not None:
            self.finetune_augmentation = _build(AugmentationPolicy, self.finetune_augmentation,
                                                "finetune_augmentation")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer", "seed")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object", "config")
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown field {key}", key)
        if "version" not in d:
            raise ConfigError("config must declare its schema version", "version")
        return cls(**d)

    def to_dict(self) -> dict:
        pre = self.pretrain.to_dict()
        pre.pop("encoder")
        return {
            "version": self.version, "seed": self.seed,
            "train_data": self.train_data, "test_data": self.test_data,
            "pretrain_data": self.pretrain_data, "variants": list(self.variants),
            "fractions": list(self.fractions), "repeats": self.repeats,
            "protocols": list(self.protocols), "encoder": self.encoder.to_dict(),
            "pretrain": pre, "supervised": asdict(self.supervised),
            "eval_ssl": self.eval_ssl.to_dict(), "eval_supervised": self.eval_supervised.to_dict(),
            "finetune_augmentation": (self.finetune_augmentation.to_dict()
                                      if self.finetune_augmentation else None),
        }

    def eval_config(self, variant: str) -> EvalConfig:
        return self.eval_ssl if variant in SSL_VARIANTS else self.eval_supervised

    def repeats_for(self, fraction: float) -> int:
        # the full labeled set has no sampling variance, so it runs once
        return 1 if fraction == 1.0 else self.repeats


def load_source(source: dict, base: Path | None = None) -> Dataset:
    if "synthetic" in source:
        return generate_synthetic(SyntheticSpec(**source["synthetic"]))
    folder = Path(source["folder"])
    if base is not None and not folder.is_absolute():
        folder = base / folder
    return load_folder(folder, source.get("metadata"))


def resolve_data(cfg: ExperimentConfig, base: Path | None = None):
    """Return (train, test, pretrain) datasets for a config."""
    train = load_source(cfg.train_data, base)
    if cfg.test_data is not None:
        test = load_source(cfg.test_data, base)
    else:
        spec = dict(cfg.train_data["synthetic"])
        spec["split"] = spec.get("split", 0) + 1
        spec["locations_per_class"] = max(1, SyntheticSpec(**cfg.train_data["synthetic"])
                                          .locations_per_class // 5)
        test = generate_synthetic(SyntheticSpec(**spec))
    pre = load_source(cfg.pretrain_data, base) if cfg.pretrain_data is not None else train
    return train, test, pre


# ---------------------------------------------------------------- subsampling

def _groups_by_class(labels: np.ndarray, locations: np.ndarray | None):
    """Per class, a list of index arrays that must be selected together."""
    out: dict[int, list[np.ndarray]] = {}
    if locations is None:
        for i, c in enumerate(labels.tolist()):
            out.setdefault(c, []).append(np.array([i]))
        return out
    seen: dict = {}
    for i, (c, loc) in enumerate(zip(labels.tolist(), locations.tolist())):
        key = (c, loc)
        if key not in seen:
            seen[key] = []
            out.setdefault(c, []).append(seen[key])
        seen[key].append(i)
    return {c: [np.asarray(g) for g in gs] for c, gs in out.items()}


def stratified_subsample(ds, fraction: float, rng: np.random.Generator,
                         by_location: bool | None = None) -> np.ndarray:
    """Indices of a class-stratified subset.

    Per class with ``n_c`` units (locations for temporal data, else samples),
    ``max(1, round(n_c * fraction))`` units are drawn without replacement and
    all their samples included.  ``fraction == 1`` returns ``arange(len(ds))``.
    """
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must lie in (0, 1]", "fraction")
    labels = np.asarray(ds.labels)
    if len(labels) == 0:
        raise ConfigError("cannot subsample an empty dataset", "fraction")
    if fraction == 1.0:
        return np.arange(len(labels))
    if by_location is None:
        by_location = len(np.unique(ds.locations)) < len(labels)
    groups = _groups_by_class(labels, np.asarray(ds.locations) if by_location else None)
    chosen = []
    for c in sorted(groups):
        units = groups[c]
        take = max(1, int(round(len(units) * fraction)))
        for j in np.sort(rng.choice(len(units), size=take, replace=False)):
            chosen.append(units[j])
    return np.sort(np.concatenate(chosen))


def train_val_split(ds, indices: np.ndarray, rng: np.random.Generator,
                    val_share: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Stratified 80/20 split of a labeled subset, by location where possible.

    A class whose subset holds a single location is split by sample instead
    (one of its views goes to validation); a class with a single sample keeps
    it in training only.
    """
    indices = np.asarray(indices)
    labels = np.asarray(ds.labels)[indices]
    locs = np.asarray(ds.locations)[indices]
    tr, va = [], []
    for c in np.unique(labels):
        members = indices[labels == c]
        groups = _groups_by_class(np.full(len(members), c), locs[labels == c])[int(c)]
        if len(groups) < 2:
            groups = [np.array([m]) for m in range(len(members))]
        if len(groups) < 2:
            tr.append(members)
            continue
        n_val = min(len(groups) - 1, max(1, int(round(len(groups) * val_share))))
        perm = rng.permutation(len(groups))
        va.append(members[np.concatenate([groups[j] for j in perm[:n_val]])])
        tr.append(members[np.concatenate([groups[j] for j in perm[n_val:]])])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(va)) if va else np.zeros(0, np.int64)


# ---------------------------------------------------------------- supervised pretraining

def supervised_pretrain(ds: Dataset, enc_cfg: EncoderConfig, cfg: SupervisedConfig, seed: int,
                        policy: AugmentationPolicy | None = None,
                        out: str | Path | None = None) -> tuple[Encoder, LinearHead, list[float]]:
    """Train encoder + linear head with cross-entropy on every label of ``ds``.

    The checkpoint keeps both under ``encoder.``/``head.`` prefixes; downstream
    protocols load only the encoder.
    """
    enc = Encoder.init(enc_cfg, np.random.default_rng([seed, 21]))
    head = LinearHead(enc_cfg.feat_dim, ds.num_classes, np.random.default_rng([seed, 22]))
    rng = np.random.default_rng([seed, 23])
    names = enc.backbone_names()
    n = len(ds)
    steps = max(1, -(-n // cfg.batch_size))
    sched = LrSchedule("cosine", cfg.lr, total_steps=max(1, cfg.epochs * steps))
    losses = []
    t = 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x = ds.images[idx]
            if cfg.augment and policy is not None:
                x = augment_batch(x, policy, rng)
            loss = T.cross_entropy(head(enc.backbone(x)), ds.labels[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"supervised pretraining diverged at epoch {epoch + 1}")
            enc.params.zero_grad()
            head.params.zero_grad()
            T.backward(loss)
            lr = schedule_rate(sched, t)
            sgd_step(enc.params, lr, cfg.momentum, cfg.weight_decay, names=names)
            sgd_step(head.params, lr, cfg.momentum, cfg.weight_decay)
            total += loss.item() * len(idx)
            count += len(idx)
            t += 1
        losses.append(total / count)
        log.info("supervised epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, losses[-1])
    enc.params.clear_grad()
    head.params.clear_grad()
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        tensors = {f"encoder.{k}": v for k, v in enc.params.arrays().items()}
        tensors.update({k: v for k, v in head.params.arrays().items()})
        save_tensors(out.with_suffix(".clab"), tensors)
        meta = {"kind": "supervised", "config": {"encoder": enc_cfg.to_dict(), **asdict(cfg)},
                "seed": seed, "epoch": cfg.epochs, "loss_history": losses}
        out.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return enc, head, losses


# ---------------------------------------------------------------- records and aggregation

@dataclass
class RunRecord:
    variant: str
    protocol: str
    fraction: float
    repeat: int
    seed: int
    metrics: dict
    wall_time: float = 0.0
    checkpoint: str | None = None
    status: str = "ok"
    error: str | None = None
    val_metrics: dict | None = None
    best_epoch: int | None = None
    n_train: int = 0

    @property
    def key(self) -> tuple:
        return (self.variant, self.protocol, self.fraction, self.repeat)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def filename(self) -> str:
        return f"{self.variant}__{self.protocol}__f{self.fraction:g}__r{self.repeat}.json"


def _mean_sd(values: Sequence[float]) -> tuple[float, float | None]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else None
    return mean, sd


def aggregate(records: Sequence[RunRecord]) -> dict:
    """Group successful records by (variant, protocol, fraction) into mean and sample sd.

    Failed records are counted per group but contribute no values.
    """
    groups: dict[tuple, list[RunRecord]] = {}
    failures: dict[tuple, int] = {}
    seen = set()
    for r in records:
        if r.key in seen:
            raise ContractError(f"duplicate run record {r.key}")
        seen.add(r.key)
        g = (r.variant, r.protocol, r.fraction)
        if r.status != "ok":
            failures[g] = failures.get(g, 0) + 1
            groups.setdefault(g, [])
            continue
        groups.setdefault(g, []).append(r)
    out = []
    for g in sorted(groups, key=lambda k: (_variant_order(k[0]), _protocol_order(k[1]), k[2])):
        recs = sorted(groups[g], key=lambda r: r.repeat)
        entry = {"variant": g[0], "protocol": g[1], "fraction": g[2], "n": len(recs),
                 "failed": failures.get(g, 0), "repeats": [r.repeat for r in recs]}
        if recs:
            keys = set(recs[0].metrics)
            if any(set(r.metrics) != keys for r in recs):
                raise ContractError(f"records of group {g} report different metrics")
            for m in sorted(keys):
                mean, sd = _mean_sd([r.metrics[m] for r in recs])
                entry[m] = {"mean": mean, "sd": sd, "values": [r.metrics[m] for r in recs]}
        out.append(entry)
    return {"groups": out}


def _variant_order(v: str) -> int:
    return VARIANTS.index(v) if v in VARIANTS else len(VARIANTS)


def _protocol_order(p: str) -> int:
    return PROTOCOLS.index(p) if p in PROTOCOLS else len(PROTOCOLS)


# ---------------------------------------------------------------- the grid

def _checkpoint_path(out: Path, variant: str) -> Path:
    return out / "checkpoints" / variant


def prepare_encoder(cfg: ExperimentConfig, variant: str, pre_ds: Dataset, out: Path) -> Encoder:
    """Pretrain (or reload) the encoder for one variant; resumable per epoch."""
    path = _checkpoint_path(out, variant)
    seed = derive_seed(cfg.seed, "pretrain", variant)
    if variant == "none":
        enc = Encoder.init(cfg.encoder, np.random.default_rng([seed, 21]))
        if not path.with_suffix(".clab").exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            save_tensors(path.with_suffix(".clab"),
                         {f"encoder.{k}": v for k, v in enc.params.arrays().items()})
            meta = {"kind": "init", "config": {"encoder": cfg.encoder.to_dict()}, "seed": seed}
            path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return enc
    if variant == "supervised":
        if path.with_suffix(".json").exists():
            return load_encoder(path)
        enc, _, _ = supervised_pretrain(pre_ds, cfg.encoder, cfg.supervised, seed,
                                        cfg.pretrain.augmentation, out=path)
        return enc
    pcfg = PretrainConfig(**{**cfg.pretrain.__dict__,
                             "contrastive": ContrastiveConfig(**{**asdict(cfg.pretrain.contrastive),
                                                                 "mode": variant})})
    state = None
    if path.with_suffix(".json").exists():
        state = load_pretrain(path)
        if state.epoch >= pcfg.epochs:
            return state.pair.query
    st = pretrain(pre_ds.unlabeled(), pcfg, seed, out=path, state=state)
    return st.pair.query


def _predict_bank(bank_train: FeatureBank, feats_test: np.ndarray, ecfg: EvalConfig) -> np.ndarray:
    k = ecfg.k if ecfg.k is not None else default_k(len(bank_train))
    return knn_predict(bank_train, feats_test, k=k, temperature=ecfg.knn_temperature)


def run_cell(cfg: ExperimentConfig, variant: str, protocol: str, fraction: float, repeat: int,
             encoder: Encoder, train: Dataset, test: Dataset,
             train_feats: np.ndarray, test_feats: np.ndarray, checkpoint: str | None) -> RunRecord:
    """Evaluate one (variant, protocol, fraction, repeat) cell; never raises."""
    seed = derive_seed(cfg.seed, "subset", fraction, repeat)
    rec = RunRecord(variant, protocol, fraction, repeat, seed, {}, checkpoint=checkpoint)
    t0 = time.perf_counter()
    try:
        rng = np.random.default_rng(seed)
        idx = stratified_subsample(train, fraction, rng)
        tr, va = train_val_split(train, idx, rng)
        rec.n_train = int(len(idx))
        ecfg = EvalConfig(**{**cfg.eval_config(variant).to_dict(),
                             "seed": derive_seed(cfg.seed, "eval", variant, protocol, fraction, repeat)})
        n_classes = max(train.num_classes, test.num_classes)
        if protocol == "knn":
            bank = FeatureBank(train_feats[idx], train.labels[idx])
            preds = _predict_bank(bank, test_feats, ecfg)
        elif protocol == "linear":
            if len(va) == 0:
                raise ContractError("labeled subset too small for a validation split")
            res = linear_probe(FeatureBank(train_feats[tr], train.labels[tr]),
                               FeatureBank(train_feats[va], train.labels[va]), ecfg, n_classes)
            preds = res.head.predict(_norm(test_feats, ecfg.normalize_features))
            rec.val_metrics, rec.best_epoch = res.metrics, res.best_epoch
        elif protocol == "finetune":
            if len(va) == 0:
                raise ContractError("labeled subset too small for a validation split")
            policy = cfg.finetune_augmentation or cfg.pretrain.augmentation
            res = finetune(encoder, train.subset(tr), train.subset(va), ecfg, policy, n_classes)
            feats = extract_features(res.encoder, test).features
            preds = res.head.predict(_norm(feats, ecfg.normalize_features))
            rec.val_metrics, rec.best_epoch = res.metrics, res.best_epoch
        else:
            raise ConfigError(f"unknown protocol {protocol!r}", "protocols")
        rec.metrics = metrics(preds, test.labels)
    except Exception as exc:  # a failed cell must not take its siblings down
        log.warning("cell %s/%s/%g/%d failed: %s", variant, protocol, fraction, repeat, exc)
        rec.status, rec.error, rec.metrics = "error", f"{type(exc).__name__}: {exc}", {}
    rec.wall_time = time.perf_counter() - t0
    return rec


def _norm(x: np.ndarray, on: bool) -> np.ndarray:
    if not on:
        return x
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def _cell_job(args):
    return run_cell(*args)


def cells(cfg: ExperimentConfig) -> list[tuple[str, str, float, int]]:
    out = []
    for v in cfg.variants:
        for f in cfg.fractions:
            for r in range(cfg.repeats_for(f)):
                for p in cfg.protocols:
                    out.append((v, p, f, r))
    return out


def load_records(out: Path) -> dict[tuple, RunRecord]:
    recs = {}
    rdir = Path(out) / "records"
    if rdir.is_dir():
        for p in sorted(rdir.glob("*.json")):
            d = json.loads(p.read_text())
            d.pop("config", None)
            r = RunRecord.from_dict(d)
            recs[r.key] = r
    return recs


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def run_benchmark(cfg: ExperimentConfig, out: str | Path, jobs: int = 1,
                  data_root: Path | None = None, retry_failed: bool = False) -> dict:
    """Run (or resume) the whole grid and write the report directory.

    Completed records under ``out/records`` are reused as-is; failed ones are
    rerun only with ``retry_failed``.
    """
    out = Path(out)
    (out / "records").mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    if cfg_path.exists():
        previous = json.loads(cfg_path.read_text())
        if previous != cfg.to_dict():
            raise ConfigError(f"{out} holds a report for a different config; "
                              "use a fresh output directory", "out")
    else:
        _write_json(cfg_path, cfg.to_dict())
    done = load_records(out)
    todo = [c for c in cells(cfg)
            if c not in done or (retry_failed and done[c].status != "ok")]
    if todo:
        train, test, pre = resolve_data(cfg, data_root)
        for variant in cfg.variants:
            vcells = [c for c in todo if c[0] == variant]
            if not vcells:
                continue
            ckpt = _checkpoint_path(out, variant)
            try:
                enc = prepare_encoder(cfg, variant, pre, out)
            except Exception as exc:
                log.warning("pretraining %s failed: %s", variant, exc)
                for c in vcells:
                    rec = RunRecord(*c, seed=derive_seed(cfg.seed, "subset", c[2], c[3]),
                                    metrics={}, status="error",
                                    error=f"pretraining failed: {type(exc).__name__}: {exc}")
                    _write_json(out / "records" / rec.filename(),
                                {**rec.to_dict(), "config": cfg.to_dict()})
                    done[c] = rec
                continue
            train_feats = extract_features(enc, train).features
            test_feats = extract_features(enc, test).features
            rel = str(ckpt.relative_to(out).with_suffix(".clab"))
            args = [(cfg, *c, enc, train, test, train_feats, test_feats, rel) for c in vcells]
            if jobs > 1 and len(args) > 1:
                with ProcessPoolExecutor(max_workers=jobs) as pool:
                    results = list(pool.map(_cell_job, args))
            else:
                results = [_cell_job(a) for a in args]
            for rec in results:
                _write_json(out / "records" / rec.filename(),
                            {**rec.to_dict(), "config": cfg.to_dict()})
                done[rec.key] = rec
                log.info("%s %s f=%g r=%d %s", rec.variant, rec.protocol, rec.fraction,
                         rec.repeat, rec.metrics or rec.error)
    wanted = set(cells(cfg))
    report = build_report(cfg, [r for k, r in done.items() if k in wanted])
    _write_json(out / "report.json", report)
    from clab.report import write_tables
    write_tables(report, out / "tables")
    return report


def build_report(cfg: ExperimentConfig, records: Sequence[RunRecord]) -> dict:
    """MetricsReport: resolved config, aggregated groups, and the timing-free records."""
    recs = sorted(records, key=lambda r: (_variant_order(r.variant), _protocol_order(r.protocol),
                                          r.fraction, r.repeat))
    body = []
    for r in recs:
        d = r.to_dict()
        d.pop("wall_time")  # timings live in records/*.json; the report stays reproducible
        body.append(d)
    return {"version": SCHEMA_VERSION, "config": cfg.to_dict(), "seed": cfg.seed,
            **aggregate(recs), "records": body}
