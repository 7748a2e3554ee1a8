"""Parameter containers, SGD with momentum, and learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from clab.errors import ConfigError, ContractError, UsageError
from clab.nn.tensor import Tensor


class ParamSet:
    """Ordered, uniquely named parameter tensors plus SGD state."""

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        self.momentum: dict[str, np.ndarray] = {}
        self.step = 0
        for name, t in (params or {}).items():
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def clear_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for t in self._params.values():
            t.requires_grad = flag

    def arrays(self) -> dict[str, np.ndarray]:
        """Copies of the parameter values, keyed by name."""
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                raise ContractError(f"missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ContractError(f"shape mismatch for {name!r}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()

    def clone(self, requires_grad: bool | None = None) -> "ParamSet":
        out = ParamSet()
        for name, t in self._params.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out.add(name, Tensor(t.data.copy(), requires_grad=rg))
        out.momentum = {k: v.copy() for k, v in self.momentum.items()}
        out.step = self.step
        return out


def sgd_step(params: ParamSet, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0, names: Iterable[str] | None = None) -> None:
    """One SGD update with heavy-ball momentum and L2 weight decay.

    v <- momentum * v + (grad + weight_decay * p);  p <- p - lr * v.
    Gradients are left in place; the caller clears them.
    """
    selected = list(params.names() if names is None else names)
    for name in selected:
        if params[name].grad is None:
            raise UsageError(f"parameter {name!r} has no gradient; call backward first")
    for name in selected:
        p = params[name]
        d = p.grad + weight_decay * p.data if weight_decay else p.grad
        prev = params.momentum.get(name)
        v = d.copy() if prev is None else momentum * prev + d
        params.momentum[name] = v
        p.data = p.data - lr * v
    params.step += 1


@dataclass
class LrSchedule:
    """Learning-rate policy.

    ``cosine`` is indexed by step (``total_steps`` horizon); ``plateau`` is
    indexed by epoch and reacts to a validation-loss history.
    """
    kind: str = "constant"
    base: float = 0.1
    total_steps: int = 1
    patience: int = 5
    factor: float = 0.5
    min_delta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("cosine", "plateau", "constant"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}", "kind")
        if self.base < 0:
            raise ConfigError("base rate must be non-negative", "base")
        if self.kind == "cosine" and self.total_steps < 1:
            raise ConfigError("cosine schedule needs total_steps >= 1", "total_steps")
        if self.kind == "plateau":
            if not 0.0 < self.factor < 1.0:
                raise ConfigError("plateau factor must lie in (0, 1)", "factor")
            if self.patience < 1:
                raise ConfigError("plateau patience must be >= 1", "patience")


def schedule_rate(s: LrSchedule, t: int, history: Sequence[float] = ()) -> float:
    """Learning rate at step/epoch ``t``.

    For ``plateau``, ``history`` holds validation losses of the epochs before
    ``t``; only the first ``t`` entries are consulted.
    """
    if s.kind == "cosine":
        frac = min(max(t, 0), s.total_steps) / s.total_steps
        return s.base * 0.5 * (1.0 + math.cos(math.pi * frac))
    if s.kind == "plateau":
        return plateau_replay(s, list(history)[:max(t, 0)])
    return s.base


def plateau_replay(s: LrSchedule, losses: Sequence[float]) -> float:
    """Replay a validation-loss history; return the rate for the next epoch."""
    rate = s.base
    best = math.inf
    bad = 0
    for loss in losses:
        if loss < best - s.min_delta:
            best = loss
            bad = 0
        else:
            bad += 1
            if bad >= s.patience:
                rate *= s.factor
                bad = 0
    return rate


class Plateau:
    """Incremental form of :func:`plateau_replay` for training loops."""

    def __init__(self, s: LrSchedule):
        self.schedule = s
        self.history: list[float] = []

    def observe(self, val_loss: float) -> float:
        self.history.append(float(val_loss))
        return plateau_replay(self.schedule, self.history)

    @property
    def rate(self) -> float:
        return plateau_replay(self.schedule, self.history)
