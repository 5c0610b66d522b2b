"""Dense float64 tensors with reverse-mode automatic differentiation.

The computation graph is recorded dynamically: every operation produces a new
Tensor holding a closure that routes the incoming gradient to its parents.
``backward()`` on a scalar loss runs the tape in reverse topological order and
then frees the graph (rollout lengths vary per scene, so tapes are one-shot).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

ArrayLike = Union[float, int, Sequence, np.ndarray]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy-backed array node in a dynamically recorded autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not _parents and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialized with non-finite values")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # ------------------------------------------------------------------
    # bookkeeping
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # graph construction helpers
    # ------------------------------------------------------------------
    @staticmethod
    def _lift(x: Union["Tensor", ArrayLike]) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _accumulate(self, g: np.ndarray, fresh: bool = False) -> None:
        """Add g into the gradient buffer. fresh=True asserts that g is a
        newly allocated array no other node holds, so it can be adopted
        without copying."""
        if self.grad is None:
            self.grad = g if fresh else np.array(g, dtype=np.float64)
        else:
            self.grad += g

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------
    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bwd(g):
            ga = _unbroadcast(g, a.shape)
            gb = _unbroadcast(g, b.shape)
            a._accumulate(ga, fresh=ga is not g)
            b._accumulate(gb, fresh=gb is not g)

        return Tensor(a.data + b.data, _parents=(a, b), _backward=bwd)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bwd(g):
            a._accumulate(-g, fresh=True)

        return Tensor(-a.data, _parents=(a,), _backward=bwd)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bwd(g):
            a._accumulate(_unbroadcast(g * b.data, a.shape), fresh=True)
            b._accumulate(_unbroadcast(g * a.data, b.shape), fresh=True)

        return Tensor(a.data * b.data, _parents=(a, b), _backward=bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return self._lift(other) * self ** -1.0

    def __pow__(self, exponent: float):
        a = self
        p = float(exponent)

        def bwd(g):
            a._accumulate(g * p * a.data ** (p - 1.0), fresh=True)

        return Tensor(a.data ** p, _parents=(a,), _backward=bwd)

    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._lift(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeMismatchError(
                f"matmul: incompatible shapes {a.shape} x {b.shape}"
            )

        def bwd(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            a._accumulate(_unbroadcast(ga, a.shape), fresh=True)
            b._accumulate(_unbroadcast(gb, b.shape), fresh=True)

        return Tensor(np.matmul(a.data, b.data), _parents=(a, b), _backward=bwd)

    __matmul__ = matmul

    # ------------------------------------------------------------------
    # elementwise nonlinearities
    # ------------------------------------------------------------------
    def relu(self):
        a = self
        mask = a.data > 0

        def bwd(g):
            a._accumulate(g * mask, fresh=True)

        return Tensor(np.maximum(a.data, 0.0), _parents=(a,), _backward=bwd)

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def bwd(g):
            a._accumulate(g * out_data, fresh=True)

        return Tensor(out_data, _parents=(a,), _backward=bwd)

    def log(self):
        a = self

        def bwd(g):
            a._accumulate(g / a.data, fresh=True)

        return Tensor(np.log(a.data), _parents=(a,), _backward=bwd)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def bwd(g):
            a._accumulate(g * 0.5 / out_data, fresh=True)

        return Tensor(out_data, _parents=(a,), _backward=bwd)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def bwd(g):
            a._accumulate(g * (1.0 - out_data * out_data), fresh=True)

        return Tensor(out_data, _parents=(a,), _backward=bwd)

    def sigmoid(self):
        a = self
        out_data = 1.0 / (1.0 + np.exp(-a.data))

        def bwd(g):
            a._accumulate(g * out_data * (1.0 - out_data), fresh=True)

        return Tensor(out_data, _parents=(a,), _backward=bwd)

    # ------------------------------------------------------------------
    # reductions and reshaping
    # ------------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bwd(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy(), fresh=True)
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.shape).copy(), fresh=True)

        return Tensor(
            a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,), _backward=bwd
        )

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.shape[ax] for ax in axis]))
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape

        def bwd(g):
            a._accumulate(g.reshape(old))

        return Tensor(a.data.reshape(shape), _parents=(a,), _backward=bwd)

    def swapaxes(self, ax1: int, ax2: int):
        a = self

        def bwd(g):
            a._accumulate(np.swapaxes(g, ax1, ax2))

        return Tensor(np.swapaxes(a.data, ax1, ax2), _parents=(a,), _backward=bwd)

    def transpose(self):
        if self.ndim != 2:
            raise ShapeMismatchError("transpose() is for 2-D tensors; use swapaxes")
        return self.swapaxes(0, 1)

    def __getitem__(self, key):
        a = self
        out_data = a.data[key]

        def bwd(g):
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a._accumulate(full, fresh=True)

        return Tensor(out_data, _parents=(a,), _backward=bwd)

    # ------------------------------------------------------------------
    # backward pass
    # ------------------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; frees the tape afterwards."""
        if self.size != 1:
            raise ShapeMismatchError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            node._parents = ()
            node._backward = None


# ----------------------------------------------------------------------
# composite ops
# ----------------------------------------------------------------------
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        _parents=tuple(tensors),
        _backward=bwd,
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]

    def bwd(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis), fresh=True)

    return Tensor(
        np.stack([t.data for t in tensors], axis=axis),
        _parents=tuple(tensors),
        _backward=bwd,
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; stable for logits up to ~1e300."""
    if x.shape[axis] == 0:
        raise ShapeMismatchError("softmax over an empty axis")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)), fresh=True)

    return Tensor(y, _parents=(x,), _backward=bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    norm = centered * inv_std

    def bwd(g):
        dn = g * gain.data
        dx = inv_std * (
            dn
            - dn.mean(axis=-1, keepdims=True)
            - norm * (dn * norm).mean(axis=-1, keepdims=True)
        )
        x._accumulate(dx, fresh=True)
        gain._accumulate(_unbroadcast(g * norm, gain.shape), fresh=True)
        gb = _unbroadcast(g, bias.shape)
        bias._accumulate(gb, fresh=gb is not g)

    return Tensor(norm * gain.data + bias.data, _parents=(x, gain, bias), _backward=bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map on the last axis: x @ weight + bias, weight is (in, out)."""
    return x.matmul(weight) + bias


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity in evaluation mode."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return x * Tensor(keep)


def parameter(data: ArrayLike) -> Tensor:
    return Tensor(data, requires_grad=True)
