"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is taped lazily: an op records its backward closure only when at
least one input requires gradients, so forward passes through frozen
parameters cost nothing extra. Everything is numpy under the hood; shapes
are 2-d (rows x cols) or 3-d (batch x rows x cols).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if type(data) is np.ndarray and data.dtype == np.float64 and data.flags["C_CONTIGUOUS"]:
            self.data = data
        else:
            arr = np.asarray(data, dtype=np.float64)
            # note: ascontiguousarray would promote 0-d scalars to 1-d
            self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor division only supports scalars")


class Parameter:
    """A leaf tensor with a trainable flag and a persistent gradient buffer.

    A frozen parameter (trainable=False) never receives gradients and is
    never touched by the optimizer, so its value stays bit-identical.
    """

    __slots__ = ("value", "_trainable")

    def __init__(self, data, trainable: bool = True):
        # parameters own their buffer: the optimizer updates it in place
        self.value = Tensor(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.value.grad = np.zeros_like(self.value.data)
        self._trainable = bool(trainable)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        assert self.value.grad is not None
        return self.value.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.data.shape

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.value.requires_grad = self._trainable

    def zero_grad(self) -> None:
        self.value.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, trainable={self._trainable})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / broadcast ops

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(g * s)

    return _node(a.data * s, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(data, (a, b), backward)


def transpose_last(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    def backward(g):
        if a.requires_grad:
            a.accumulate(np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(a.data, -1, -2), (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack blocks along the row axis; gradients route back per block."""
    if not parts:
        raise DimensionError("concat_rows: need at least one part")
    cols = parts[0].shape[-1]
    lead = parts[0].shape[:-2]
    for p in parts:
        if p.shape[-1] != cols or p.shape[:-2] != lead:
            raise DimensionError(
                "concat_rows: column or batch mismatch among shapes "
                + ", ".join(str(p.shape) for p in parts)
            )
    data = np.concatenate([p.data for p in parts], axis=-2)
    offsets = np.cumsum([0] + [p.shape[-2] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate(g[..., lo:hi, :])

    return _node(data, tuple(parts), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_cols: need at least one part")
    data = np.concatenate([p.data for p in parts], axis=-1)
    offsets = np.cumsum([0] + [p.shape[-1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate(g[..., lo:hi])

    return _node(data, tuple(parts), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[..., start:stop, :] = g
            a.accumulate(buf)

    return _node(a.data[..., start:stop, :], (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[..., start:stop] = g
            a.accumulate(buf)

    return _node(a.data[..., start:stop], (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any shape index the table's rows."""
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table.accumulate(buf)

    return _node(data, (table,), backward)


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Repeat a (rows x cols) block into (reps x rows x cols)."""
    if a.ndim != 2:
        raise DimensionError(f"tile_rows: expected a 2-d tensor, got {a.shape}")
    data = np.broadcast_to(a.data, (reps,) + a.shape).copy()

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.sum(axis=0))

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU, applied elementwise."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 0.134145 * x2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a.accumulate(g * local)

    return _node(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * data * (1.0 - data))

    return _node(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(g / a.data)

    return _node(np.log(a.data), (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * ((a.data >= lo) & (a.data <= hi)))

    return _node(data, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Stable softmax over the last axis; each row sums to one."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            a.accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(s, (a,), backward)


def masked_softmax_rows(a: Tensor, allowed: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to `allowed` entries.

    Disallowed entries get exactly zero weight (they are excluded before
    normalization, not just pushed to -inf). Rows with no allowed entry
    come out all-zero.
    """
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), a.shape)
    x = np.where(allowed, a.data, -np.inf)
    m = x.max(axis=-1, keepdims=True, initial=-np.inf)
    x -= np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x, out=x)  # exp(-inf) underflows to exactly 0 for disallowed slots
    denom = e.sum(axis=-1, keepdims=True)
    s = np.divide(e, denom, out=e, where=denom > 0)

    def backward(g):
        if a.requires_grad:
            a.accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(s, (a,), backward)


# ---------------------------------------------------------------------------
# normalization and reductions

def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row (last axis) to zero mean, unit variance, then affine."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gh = g * gamma.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            a.accumulate(term * inv)

    return _node(data, (a, gamma, beta), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.data, g.reshape(-1)[0]))

    return _node(np.asarray(a.data.sum()), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def masked_mean_rows(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the row axis restricted to mask-true rows.

    a: (..., rows, d); mask: (..., rows) booleans. Every batch element must
    select at least one row.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:-1]:
        raise DimensionError(f"masked_mean_rows: mask shape {mask.shape} does not match rows of {a.shape}")
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise ContractError("masked_mean_rows: a batch element selects no rows")
    w = mask / counts[..., None]
    data = (a.data * w[..., None]).sum(axis=-2)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g[..., None, :] * w[..., None])

    return _node(data, (a,), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy between row logits and integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: got logits {logits.shape}, targets {targets.shape}")
    n = logits.shape[0]
    if n == 0:
        return Tensor(0.0)
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    picked = x[np.arange(n), targets]
    data = np.asarray((lse - picked).mean())

    def backward(g):
        if logits.requires_grad:
            p = np.exp(x - m)
            p /= p.sum(axis=-1, keepdims=True)
            p[np.arange(n), targets] -= 1.0
            logits.accumulate(p * (g.reshape(-1)[0] / n))

    return _node(data, (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass and optimizer

def backward(loss: Tensor) -> None:
    """Populate gradients of every trainable leaf reachable from `loss`.

    `loss` must hold a single value. Leaves with requires_grad=False are
    never written to, so frozen parameters keep all-zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


class Adam:
    """Adam with standard bias correction; frozen parameters are skipped."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.trainable:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adam_step(params: Sequence[Parameter], lr: float, state: Adam | None = None) -> Adam:
    """One Adam update over `params`; returns the moment state for reuse."""
    if state is None:
        state = Adam(params, lr=lr)
    state.lr = lr
    state.step()
    return state
