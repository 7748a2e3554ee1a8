"""Dense float64 tensors with a recorded graph for reverse-mode differentiation.

Only the handful of ops needed by the encoder, the classifier heads and the
two losses are provided.  Every op checks its output for NaN/Inf and raises
:class:`~clab.errors.NumericError` instead of silently propagating it.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from clab.errors import ContractError, NumericError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (used for the key encoder)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """A float64 array plus an optional gradient buffer.

    Leaves created with ``requires_grad=True`` accumulate into ``grad`` on
    :meth:`backward`; intermediate nodes keep their gradients private to the
    pass, so the same graph can be back-propagated more than once.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple["Tensor", ...] = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        if arr.ndim > 0 and 0 in arr.shape:
            raise ContractError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return add(self, mul(other, -1.0))
    def __neg__(self): return mul(self, -1.0)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return mul(self, 1.0 / float(other))
    def __matmul__(self, other): return matmul(self, other)

    def backward(self) -> None:
        """Back-propagate from this scalar into every reachable leaf's ``grad``."""
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss.is_leaf:
        raise UsageError("backward called on a tensor without a recorded graph")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            _check_finite(g, "gradient")
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)
    return _make(a.data + b.data, (a, b), fn, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)
    return _make(a.data * b.data, (a, b), fn, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def fn(g):
        return (g * mask,)
    return _make(np.where(mask, x.data, 0.0), (x,), fn, "relu")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb
    return _make(a.data @ b.data, (a, b), fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ---------------------------------------------------------------- shape / reductions

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape

    def fn(g):
        return (g.reshape(old),)
    return _make(x.data.reshape(shape), (x,), fn, "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return _make(np.asarray(x.data.sum(axis=axis)), (x,), fn, "sum")


def mean(x: Tensor) -> Tensor:
    return mul(tsum(x), 1.0 / x.data.size)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def fn(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, fn, "concat")


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner products of two (B, d) tensors, returned as (B, 1)."""
    return reshape(tsum(mul(a, b), axis=1), (a.shape[0], 1))


# ---------------------------------------------------------------- normalisation

def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm (rows with norm < eps are divided by eps)."""
    norms = np.sqrt((x.data ** 2).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = x.data / denom
    clipped = norms < eps

    def fn(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        gx = (g - np.where(clipped, 0.0, y * proj)) / denom
        return (gx,)
    return _make(y, (x,), fn, "l2_normalize")


# ---------------------------------------------------------------- convolution

def _pad_hw(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, zero-padded 3x3 convolution over NHWC input.

    ``weight`` has shape (3, 3, C_in, C_out).
    """
    B, H, W, C = x.shape
    if weight.shape[:3] != (3, 3, C):
        raise ContractError(f"conv weight {weight.shape} does not match input channels {C}")
    O = weight.shape[3]
    cols = np.lib.stride_tricks.sliding_window_view(_pad_hw(x.data), (3, 3), axis=(1, 2))
    # cols: (B, H, W, C, 3, 3) -> (B*H*W, 3*3*C) ordered (kh, kw, c)
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, 9 * C)
    wmat = weight.data.reshape(9 * C, O)
    out = (cols @ wmat).reshape(B, H, W, O) + bias.data

    def fn(g):
        g2 = g.reshape(B * H * W, O)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, H, W, 3, 3, C)
            gpad = np.zeros((B, H + 2, W + 2, C))
            for i in range(3):
                for j in range(3):
                    gpad[:, i:i + H, j:j + W, :] += gcols[:, :, :, i, j, :]
            gx = gpad[:, 1:-1, 1:-1, :]
        return gx, gw, gb
    return _make(out, (x, weight, bias), fn, "conv3x3")


def avg_pool(x: Tensor, size: int) -> Tensor:
    """Non-overlapping ``size`` x ``size`` average pooling over NHWC input."""
    B, H, W, C = x.shape
    if H % size or W % size:
        raise ContractError(f"pool size {size} does not divide {H}x{W}")
    h, w = H // size, W // size
    out = x.data.reshape(B, h, size, w, size, C).mean(axis=(2, 4))

    def fn(g):
        gx = np.repeat(np.repeat(g, size, axis=1), size, axis=2) / (size * size)
        return (gx,)
    return _make(out, (x,), fn, "avg_pool")


# ---------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, labels, keep: np.ndarray | None = None) -> Tensor:
    """Mean negative log-softmax of the target column.

    ``keep`` is an optional boolean (B, C) mask; columns with ``False`` are
    dropped from the softmax denominator.  The target column must be kept.
    """
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ContractError(f"expected {B} labels, got shape {labels.shape}")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= C:
        raise ContractError(f"labels must be integer class indices in [0, {C})")
    z = logits.data
    rows = np.arange(B)
    if keep is not None:
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != (B, C) or not keep[rows, labels].all():
            raise ContractError("keep mask must have logits' shape and retain every target")
        z = np.where(keep, z, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    # sequential row sums: dropped (zero) columns then leave the result bit-identical
    # to computing over the kept columns alone
    denom = np.cumsum(ez, axis=1)[:, -1:]
    logp_target = (z[rows, labels] - zmax[:, 0]) - np.log(denom[:, 0])
    loss = -logp_target.mean()
    probs = ez / denom

    def fn(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g / B),)
    return _make(np.asarray(loss), (logits,), fn, "cross_entropy")
