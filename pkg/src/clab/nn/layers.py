"""Encoder (optional conv stem + MLP backbone + projection head) and linear heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from clab.errors import ConfigError, ContractError
from clab.nn import tensor as T
from clab.nn.optim import ParamSet
from clab.nn.tensor import Tensor


@dataclass
class EncoderConfig:
    input_shape: tuple[int, int, int] = (16, 16, 3)
    hidden: tuple[int, ...] = (256,)
    feat_dim: int = 128
    proj_hidden: tuple[int, ...] = (128,)
    proj_dim: int = 64
    conv_stem: bool = True
    stem_channels: int = 16
    stem_pool: int = 4
    input_mean: float = 0.5
    input_scale: float = 4.0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.hidden = tuple(int(v) for v in self.hidden)
        self.proj_hidden = tuple(int(v) for v in self.proj_hidden)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError("input_shape must be three positive ints (H, W, C)", "input_shape")
        if self.feat_dim < 2:
            raise ConfigError("feat_dim must be >= 2", "feat_dim")
        if self.proj_dim < 2:
            raise ConfigError("proj_dim must be >= 2", "proj_dim")
        if any(w < 1 for w in self.hidden + self.proj_hidden) or self.stem_channels < 1:
            raise ConfigError("layer widths must be positive", "hidden")
        H, W, _ = self.input_shape
        if self.stem_pool < 1 or H % self.stem_pool or W % self.stem_pool:
            raise ConfigError("stem_pool must divide the image size", "stem_pool")

    @property
    def flat_dim(self) -> int:
        H, W, C = self.input_shape
        if self.conv_stem:
            return (H // self.stem_pool) * (W // self.stem_pool) * self.stem_channels
        return H * W * C

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_shape", "hidden", "proj_hidden"):
            d[k] = list(d[k])
        return d


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _mlp_params(params: ParamSet, prefix: str, widths: list[int], rng) -> None:
    for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
        params.add(f"{prefix}.{i}.weight", Tensor(uniform_init(rng, fi, (fi, fo)), requires_grad=True))
        params.add(f"{prefix}.{i}.bias", Tensor(np.zeros(fo), requires_grad=True))


def _mlp_forward(params: ParamSet, prefix: str, n_layers: int, x: Tensor) -> Tensor:
    for i in range(n_layers):
        x = T.linear(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        if i < n_layers - 1:
            x = T.relu(x)
    return x


class Encoder:
    """Backbone producing ``feat_dim`` features and a head producing unit embeddings.

    Parameters live in a single :class:`ParamSet` with ``stem.``,
    ``backbone.`` and ``projector.`` prefixes.
    """

    def __init__(self, config: EncoderConfig, params: ParamSet):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: EncoderConfig, seed: int | np.random.Generator) -> "Encoder":
        rng = np.random.default_rng(seed)
        params = ParamSet()
        if config.conv_stem:
            C = config.input_shape[2]
            params.add("stem.weight", Tensor(uniform_init(rng, 9 * C, (3, 3, C, config.stem_channels)),
                                             requires_grad=True))
            params.add("stem.bias", Tensor(np.zeros(config.stem_channels), requires_grad=True))
        _mlp_params(params, "backbone", [config.flat_dim, *config.hidden, config.feat_dim], rng)
        _mlp_params(params, "projector", [config.feat_dim, *config.proj_hidden, config.proj_dim], rng)
        return cls(config, params)

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("projector.")]

    def _check_batch(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != self.config.input_shape:
            raise ContractError(
                f"batch shape {x.shape} does not match encoder input (B, {self.config.input_shape})")
        return x

    def backbone(self, x) -> Tensor:
        x = self._check_batch(x)
        cfg = self.config
        x = T.Tensor((x.data - cfg.input_mean) * cfg.input_scale) if not x.requires_grad else \
            T.mul(T.add(x, -cfg.input_mean), cfg.input_scale)
        if cfg.conv_stem:
            x = T.relu(T.conv3x3(x, self.params["stem.weight"], self.params["stem.bias"]))
            if cfg.stem_pool > 1:
                x = T.avg_pool(x, cfg.stem_pool)
        x = T.flatten(x)
        return _mlp_forward(self.params, "backbone", len(cfg.hidden) + 1, x)

    def project(self, feats: Tensor) -> Tensor:
        z = _mlp_forward(self.params, "projector", len(self.config.proj_hidden) + 1, feats)
        return T.l2_normalize(z)

    def forward(self, x, mode: str = "backbone") -> Tensor:
        if mode == "backbone":
            return self.backbone(x)
        if mode == "projected":
            return self.project(self.backbone(x))
        raise ContractError(f"unknown forward mode {mode!r}")

    def copy(self, requires_grad: bool | None = None) -> "Encoder":
        return Encoder(self.config, self.params.clone(requires_grad))


class LinearHead:
    """Single affine layer mapping features to class logits."""

    def __init__(self, in_dim: int, n_classes: int, seed: int | np.random.Generator):
        rng = np.random.default_rng(seed)
        self.params = ParamSet({
            "head.weight": Tensor(uniform_init(rng, in_dim, (in_dim, n_classes)), requires_grad=True),
            "head.bias": Tensor(np.zeros(n_classes), requires_grad=True),
        })
        self.in_dim = in_dim
        self.n_classes = n_classes

    def __call__(self, feats) -> Tensor:
        return T.linear(T.as_tensor(feats), self.params["head.weight"], self.params["head.bias"])

    def predict(self, feats: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self(feats).data.argmax(axis=1)
