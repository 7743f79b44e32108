"""Dense-tensor reverse-mode automatic differentiation on float64 numpy arrays.

Small by design: exactly the operations the graph models need, each with an
exact hand-written backward rule. Computation graphs are built eagerly and
freed after `backward`. A module-level finite check can be switched on to
assert that every intermediate value stays finite.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_FINITE_CHECKS = False


@contextmanager
def finite_checks(enabled: bool = True):
    """Assert finiteness of every tensor created inside the context."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = previous


class Tensor:
    """A float64 array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        if _FINITE_CHECKS and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite value in tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autograd ---------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor w.r.t. every tracked leaf."""
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ValueError(f"gradient shape {grad.shape} != tensor shape {self.data.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        _accumulate(self, grad)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("only division by a constant scalar is supported")
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), backward_fn)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def backward_fn(g):
        _accumulate(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), backward_fn)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def backward_fn(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _result(out_data, (a,), backward_fn)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))

    def backward_fn(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), backward_fn)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def backward_fn(g):
        _accumulate(a, g / a.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    return _result(out_data, (a,), backward_fn)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward_fn(g):
        _accumulate(a, g * out_data)

    return _result(out_data, (a,), backward_fn)


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim > 2 or b.ndim > 2:
        raise ValueError("matmul supports 1-D and 2-D operands only")

    def backward_fn(g):
        if a.ndim == 2 and b.ndim == 2:
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)
        elif a.ndim == 1 and b.ndim == 2:  # (k,) @ (k,m) -> (m,)
            _accumulate(a, b.data @ g)
            _accumulate(b, np.outer(a.data, g))
        elif a.ndim == 2 and b.ndim == 1:  # (n,k) @ (k,) -> (n,)
            _accumulate(a, np.outer(g, b.data))
            _accumulate(b, a.data.T @ g)
        else:  # (k,) @ (k,) -> scalar
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

    return _result(a.data @ b.data, (a, b), backward_fn)


# -- reductions -----------------------------------------------------------


def tensor_sum(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)

    def backward_fn(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _result(a.data.sum(axis=axis), (a,), backward_fn)


def tensor_mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis), 1.0 / count)


def column_max(a) -> Tensor:
    """Max over axis 0 of a 2-D tensor; ties route gradient to the lowest row."""
    a = _as_tensor(a)
    if a.ndim != 2 or a.data.shape[0] == 0:
        raise ValueError("column_max expects a non-empty 2-D tensor")
    arg = np.argmax(a.data, axis=0)  # first occurrence wins on ties

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        ga[arg, np.arange(a.data.shape[1])] = g
        _accumulate(a, ga)

    return _result(a.data[arg, np.arange(a.data.shape[1])], (a,), backward_fn)


def softmax(a) -> Tensor:
    """Softmax of a 1-D tensor."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max()
    e = np.exp(shifted)
    out_data = e / e.sum()

    def backward_fn(g):
        _accumulate(a, out_data * (g - np.dot(g, out_data)))

    return _result(out_data, (a,), backward_fn)


# -- shape ops ------------------------------------------------------------


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


def stack(tensors: Sequence) -> Tensor:
    """Stack equal-shape 1-D tensors into a 2-D tensor (rows)."""
    tensors = [_as_tensor(t) for t in tensors]

    def backward_fn(g):
        for i, t in enumerate(tensors):
            _accumulate(t, g[i])

    return _result(np.stack([t.data for t in tensors]), tensors, backward_fn)


# -- graph message passing ------------------------------------------------


def edge_aggregate(x, edges: np.ndarray, weights) -> Tensor:
    """Weighted sum of neighbour rows over an undirected edge list.

    out[v] = sum over edges (u, v) of w_e * x[u], counting each undirected
    edge in both directions. Differentiable w.r.t. both the node features
    and the edge weights.
    """
    x, weights = _as_tensor(x), _as_tensor(weights)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.shape[0] != weights.data.shape[0]:
        raise ValueError("one weight per edge required")
    u, v = edges[:, 0], edges[:, 1]
    w_col = weights.data[:, None]

    out_data = np.zeros_like(x.data)
    if edges.shape[0]:
        np.add.at(out_data, v, w_col * x.data[u])
        np.add.at(out_data, u, w_col * x.data[v])

    def backward_fn(g):
        if edges.shape[0] == 0:
            _accumulate(x, np.zeros_like(x.data))
            _accumulate(weights, np.zeros_like(weights.data))
            return
        gx = np.zeros_like(x.data)
        np.add.at(gx, u, w_col * g[v])
        np.add.at(gx, v, w_col * g[u])
        _accumulate(x, gx)
        gw = (g[v] * x.data[u]).sum(axis=1) + (g[u] * x.data[v]).sum(axis=1)
        _accumulate(weights, gw)

    return _result(out_data, (x, weights), backward_fn)


# -- gradient checking ----------------------------------------------------


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
) -> float:
    """Compare analytic gradients of a scalar-valued fn with central differences.

    Returns the worst relative violation max(|analytic - numeric| - atol) /
    (|numeric| + atol); a return value below rtol means the check passed.
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("gradcheck needs a scalar output")
    out.backward()

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.ravel()
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(*inputs).item()
            flat[i] = orig - eps
            lo = fn(*inputs).item()
            flat[i] = orig
            num[i] = (hi - lo) / (2 * eps)
        num = num.reshape(t.data.shape)
        denom = np.abs(num) + atol
        worst = max(worst, float((np.abs(analytic - num) / denom).max()))
    return worst
