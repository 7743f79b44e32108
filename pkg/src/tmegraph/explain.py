"""Post-hoc attribution for tile-graph classifiers.

Two complementary views of a trained model's decision on one RoI.
Integrated gradients scores every tile-graph edge by integrating the
target logit's sensitivity along a path that scales all edge weights
from zero to one; summing incident edge scores gives per-tile scores.
The mask explainer instead learns a soft keep/drop weight for every
edge and every tile feature such that the masked graph still produces
the model's original prediction, revealing which inputs the model
relies on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .dataset import TILE_FEATURE_DIM, RoISample, tile_feature_names
from .errors import ValidationError

QUADRATURE_METHODS = ("gauss", "riemann")


@dataclass
class Attribution:
    """Edge-level integrated gradients for one RoI plus their node aggregation."""

    roi_id: str
    tile_ids: list[str]
    edges: np.ndarray  # (n_edges, 2) node index pairs, as attributed
    edge_ig: np.ndarray  # (n_edges,)
    node_ig: np.ndarray  # (n_tiles,) sum of scores over incident edges
    target_class: int
    completeness_gap: float  # |sum(edge_ig) - (F(w=1) - F(w=0))|


@dataclass
class ExplainerMasks:
    """Learned soft masks for one RoI and the objective value per iteration."""

    roi_id: str
    edge_mask: np.ndarray  # (n_edges,) in (0, 1)
    feature_mask: np.ndarray  # (TILE_FEATURE_DIM,) in (0, 1)
    objective_trace: list[float]


@dataclass
class ExplainConfig:
    """Hyperparameters for the mask explainer's gradient descent."""

    epochs: int = 200
    lr: float = 0.01
    size_penalty: float = 0.005
    entropy_penalty: float = 0.1
    init_logit: float = 0.0  # pre-sigmoid start value for both masks

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be positive, got {self.epochs}")
        if not self.lr > 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if self.size_penalty < 0 or self.entropy_penalty < 0:
            raise ValidationError("mask penalties must be non-negative")


def _quadrature(n_points: int, method: str) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for integrating over the unit interval."""
    if n_points < 1:
        raise ValidationError(f"quadrature needs at least one point, got {n_points}")
    if method == "gauss":
        x, w = np.polynomial.legendre.leggauss(n_points)
        return (x + 1.0) / 2.0, w / 2.0
    if method == "riemann":
        return (np.arange(n_points) + 0.5) / n_points, np.full(n_points, 1.0 / n_points)
    raise ValidationError(f"unknown quadrature method {method!r}; use one of {QUADRATURE_METHODS}")


def _masked_forward(model, sample: RoISample, weights: Tensor, feature_mask: Tensor | None = None) -> Tensor:
    """Forward pass with injected edge weights, rejecting models that lack them."""
    try:
        return model.forward_sample(sample, edge_weights=weights, feature_mask=feature_mask)
    except TypeError as exc:
        raise ValidationError(
            f"model {type(model).__name__} does not expose edge weights; "
            "attribution needs a tile-graph convolution model"
        ) from exc


def _target_logit(model, sample: RoISample, weights: Tensor, target_class: int) -> Tensor:
    """Scalar logit of the target class with injected edge weights."""
    logits = _masked_forward(model, sample, weights)
    pick = np.zeros(model.config.n_classes)
    pick[target_class] = 1.0
    return ad.tensor_sum(ad.mul(logits, Tensor(pick)))


def integrated_gradients(
    sample: RoISample,
    model,
    target_class: int | None = None,
    n_points: int = 50,
    method: str = "gauss",
) -> Attribution:
    """Attribute the target logit to tile-graph edges via path integration.

    The path scales every edge weight simultaneously from 0 (baseline,
    edgeless message passing) to 1 (the observed graph); the integrand
    is the gradient of the target-class logit with respect to each edge
    weight, evaluated by Gauss-Legendre quadrature by default. Because
    the displacement per edge is exactly one, the quadrature sum itself
    is the attribution.
    """
    g = sample.tile_graph
    if g.n_edges and not np.all(g.edge_weights == 1.0):
        raise ValidationError(
            f"roi {sample.roi_id}: attribution expects unit edge weights as the endpoint"
        )
    if target_class is None:
        target_class = int(np.argmax(_masked_forward(model, sample, Tensor(np.ones(g.n_edges))).data))
    elif not 0 <= target_class < model.config.n_classes:
        raise ValidationError(
            f"target class {target_class} outside 0..{model.config.n_classes - 1}"
        )

    alphas, quad_w = _quadrature(n_points, method)
    edge_ig = np.zeros(g.n_edges)
    for alpha, qw in zip(alphas, quad_w):
        w = Tensor(np.full(g.n_edges, alpha), requires_grad=True)
        _target_logit(model, sample, w, target_class).backward()
        edge_ig += qw * w.grad

    node_ig = np.zeros(g.n_nodes)
    if g.n_edges:
        np.add.at(node_ig, g.edges[:, 0], edge_ig)
        np.add.at(node_ig, g.edges[:, 1], edge_ig)

    f_one = _target_logit(model, sample, Tensor(np.ones(g.n_edges)), target_class).item()
    f_zero = _target_logit(model, sample, Tensor(np.zeros(g.n_edges)), target_class).item()
    gap = abs(float(edge_ig.sum()) - (f_one - f_zero))
    return Attribution(
        roi_id=sample.roi_id,
        tile_ids=list(sample.tile_ids),
        edges=g.edges.copy(),
        edge_ig=edge_ig,
        node_ig=node_ig,
        target_class=target_class,
        completeness_gap=gap,
    )


def rank_tiles(attr: Attribution, top_k: int) -> list[tuple[str, float]]:
    """Tiles ordered strongest-first by node attribution; ties break on tile id."""
    if top_k < 1:
        raise ValidationError(f"top_k must be at least 1, got {top_k}")
    n = len(attr.tile_ids)
    if top_k > n:
        warnings.warn(f"top_k={top_k} exceeds the {n} available tiles; returning all")
        top_k = n
    order = sorted(range(n), key=lambda i: (-attr.node_ig[i], attr.tile_ids[i]))
    return [(attr.tile_ids[i], float(attr.node_ig[i])) for i in order[:top_k]]


def _mask_penalty(mask: Tensor, config: ExplainConfig) -> Tensor:
    """Sparsity plus binariness pressure on one mask vector."""
    comp = 1.0 - mask
    entropy = -(ad.mul(mask, ad.log(mask + 1e-12)) + ad.mul(comp, ad.log(comp + 1e-12)))
    return (
        config.size_penalty * ad.tensor_mean(mask)
        + config.entropy_penalty * ad.tensor_mean(entropy)
    )


def gnn_explain(sample: RoISample, model, config: ExplainConfig | None = None) -> ExplainerMasks:
    """Learn edge and feature masks that preserve the model's prediction.

    Both masks live in (0, 1) via a sigmoid over free logits and are
    fitted by full-batch gradient descent on the cross-entropy of the
    masked forward pass against the model's own (unmasked) predicted
    label, plus size and entropy penalties that push the masks toward
    sparse near-binary solutions. Model parameters stay untouched.
    """
    if config is None:
        config = ExplainConfig()
    g = sample.tile_graph
    label = np.array([int(np.argmax(_masked_forward(model, sample, Tensor(g.edge_weights)).data))])
    no_weighting = np.ones(model.config.n_classes)

    edge_logit = Tensor(np.full(g.n_edges, config.init_logit), requires_grad=True)
    feat_logit = Tensor(np.full(TILE_FEATURE_DIM, config.init_logit), requires_grad=True)
    trace: list[float] = []
    for epoch in range(config.epochs):
        edge_logit.grad = None
        feat_logit.grad = None
        edge_mask = ad.sigmoid(edge_logit)
        feat_mask = ad.sigmoid(feat_logit)
        weights = ad.mul(edge_mask, Tensor(g.edge_weights))
        logits = _masked_forward(model, sample, weights, feat_mask)
        loss = nn.weighted_cross_entropy(ad.stack([logits]), label, no_weighting)
        loss = ad.add(loss, _mask_penalty(feat_mask, config))
        if g.n_edges:
            loss = ad.add(loss, _mask_penalty(edge_mask, config))
        value = loss.item()
        if not np.isfinite(value):
            raise ValidationError(
                f"roi {sample.roi_id}: explainer objective became non-finite "
                f"at epoch {epoch}; last finite value "
                f"{trace[-1] if trace else 'none'}"
            )
        trace.append(value)
        loss.backward()
        edge_logit.data = edge_logit.data - config.lr * edge_logit.grad
        feat_logit.data = feat_logit.data - config.lr * feat_logit.grad

    def squash(t):
        return 1.0 / (1.0 + np.exp(-t.data))

    return ExplainerMasks(
        roi_id=sample.roi_id,
        edge_mask=squash(edge_logit),
        feature_mask=squash(feat_logit),
        objective_trace=trace,
    )


def feature_importance_report(masks: list[ExplainerMasks]) -> list[dict]:
    """Mean feature mask across samples, widest-open features first.

    Returns one row per tile feature with keys feature_name, mean_mask
    and 1-based rank; ties keep catalog order.
    """
    if not masks:
        raise ValidationError("feature importance needs at least one explained sample")
    stacked = np.stack([np.asarray(m.feature_mask, dtype=np.float64) for m in masks])
    if stacked.shape[1] != TILE_FEATURE_DIM:
        raise ValidationError(
            f"feature masks must have {TILE_FEATURE_DIM} entries, got {stacked.shape[1]}"
        )
    mean_mask = stacked.mean(axis=0)
    names = tile_feature_names()
    order = sorted(range(TILE_FEATURE_DIM), key=lambda i: (-mean_mask[i], i))
    return [
        {"feature_name": names[i], "mean_mask": float(mean_mask[i]), "rank": r + 1}
        for r, i in enumerate(order)
    ]
