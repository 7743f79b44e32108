"""Neural-network building blocks on top of the autodiff engine.

Layers hold their parameters as named tensors, the optimizer mutates them in
place, and nothing here knows about graphs beyond the edge aggregation the
convolution delegates to.
"""
from __future__ import annotations

from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = Tensor(glorot_uniform(rng, in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class GraphConv:
    """out_v = W_self h_v + W_neigh sum_{u ~ v} w_uv h_u + bias.

    With all edge weights at one this is the standard two-weight graph
    convolution; fractional weights scale each neighbour's message, which is
    what lets attribution methods differentiate through the edges.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.w_self = Tensor(glorot_uniform(rng, in_dim, out_dim), requires_grad=True)
        self.w_neigh = Tensor(glorot_uniform(rng, in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, h: Tensor, edges: np.ndarray, edge_weights) -> Tensor:
        neigh = ad.edge_aggregate(h, edges, edge_weights)
        return ad.matmul(h, self.w_self) + ad.matmul(neigh, self.w_neigh) + self.bias

    def parameters(self) -> dict[str, Tensor]:
        return {"w_self": self.w_self, "w_neigh": self.w_neigh, "bias": self.bias}


READOUTS = ("mean", "add", "max")


def readout(h: Tensor, kind: str) -> Tensor:
    """Collapse node rows to one vector. Max ties go to the lowest node index."""
    if h.data.shape[0] == 0:
        raise ValueError("readout of an empty node set is undefined")
    if kind == "mean":
        return ad.tensor_mean(h, axis=0)
    if kind == "add":
        return ad.tensor_sum(h, axis=0)
    if kind == "max":
        return ad.column_max(h)
    raise ValueError(f"unknown readout {kind!r}, expected one of {READOUTS}")


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: surviving entries are scaled by 1/(1-p)."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return ad.mul(x, Tensor(mask))


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray, class_weights: np.ndarray) -> Tensor:
    """Softmax cross-entropy with per-class weights, fused for stability.

    loss = sum_i w_{y_i} * nll_i / sum_i w_{y_i}, so re-balancing the classes
    does not change the scale of the loss.
    """
    labels = np.asarray(labels, dtype=np.int64)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    n, _ = logits.data.shape
    if labels.shape != (n,):
        raise ValueError("one label per logit row required")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    sample_w = class_weights[labels]
    w_total = sample_w.sum()
    loss = -(sample_w * log_p[np.arange(n), labels]).sum() / w_total

    def backward_fn(g):
        probs = np.exp(log_p)
        probs[np.arange(n), labels] -= 1.0
        ad._accumulate(logits, g * (sample_w[:, None] / w_total) * probs)

    return ad._result(np.array(loss), (logits,), backward_fn)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (for reporting, not training)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Adam:
    """Adam with decoupled-from-nothing, classic additive L2 regularisation:
    the decay term is added to the raw gradient before the moment updates."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for key, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            m = self._m[key]
            v = self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def collect_parameters(prefix: str, layer) -> dict[str, Tensor]:
    return {f"{prefix}.{name}": t for name, t in layer.parameters().items()}


def params_to_jsonable(params: dict[str, Tensor]) -> dict:
    return {k: p.data.tolist() for k, p in params.items()}


def load_params(params: dict[str, Tensor], blob: dict, expected: Iterable[str] | None = None) -> None:
    """Copy serialized arrays into existing parameter tensors, shape-checked."""
    names = set(expected) if expected is not None else set(params)
    missing = names - set(blob)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
    for key in names:
        arr = np.asarray(blob[key], dtype=np.float64)
        if arr.shape != params[key].data.shape:
            raise ValueError(
                f"parameter {key}: checkpoint shape {arr.shape} != model shape {params[key].data.shape}"
            )
        params[key].data = arr
