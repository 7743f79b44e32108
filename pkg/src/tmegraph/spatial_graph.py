"""Undirected spatial graphs built from 2-D point sets by distance thresholding.

An edge connects two points exactly when their Euclidean distance is
strictly below the threshold; self-loops are excluded. The same structure
serves cell-graphs (nodes = nuclei centroids) and tile-graphs (nodes =
tile centroids).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParseError, ValidationError
from .ingest import Phenotype

SERIAL_FORMAT = "tmegraph.spatial-graph"
SERIAL_VERSION = 1


@dataclass
class SpatialGraph:
    """Immutable-by-convention undirected graph with node coordinates."""

    coords: np.ndarray  # (n, 2) float64
    node_features: np.ndarray  # (n, D) float64
    edges: np.ndarray  # (m, 2) int64, u < v, lexicographically sorted
    edge_weights: np.ndarray  # (m,) float64 in [0, 1]
    node_labels: list[Phenotype] | None = None

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    def degrees(self) -> np.ndarray:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        if self.n_edges:
            np.add.at(d, self.edges[:, 0], 1)
            np.add.at(d, self.edges[:, 1], 1)
        return d

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency matrix."""
        a = np.zeros((self.n_nodes, self.n_nodes), dtype=np.float64)
        if self.n_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def validate(self) -> None:
        n, m = self.n_nodes, self.n_edges
        if self.coords.shape != (n, 2):
            raise ValidationError("coords must be (n, 2)")
        if self.node_features.shape[0] != n:
            raise ValidationError("feature row count must equal node count")
        if m:
            if np.any(self.edges[:, 0] >= self.edges[:, 1]):
                raise ValidationError("edges must satisfy u < v (no self-loops)")
            if np.any(self.edges >= n) or np.any(self.edges < 0):
                raise ValidationError("edge endpoint out of range")
        if self.edge_weights.shape != (m,):
            raise ValidationError("one weight per edge required")
        if m and (np.any(self.edge_weights < 0) or np.any(self.edge_weights > 1)):
            raise ValidationError("edge weights must lie in [0, 1]")
        if self.node_labels is not None and len(self.node_labels) != n:
            raise ValidationError("one label per node required")


def _empty_edges() -> tuple[np.ndarray, np.ndarray]:
    return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.float64)


def build_graph(
    points: np.ndarray | Sequence[tuple[float, float]],
    features: np.ndarray,
    k: float,
    labels: list[Phenotype] | None = None,
) -> SpatialGraph:
    """Connect every pair of points at Euclidean distance strictly below k.

    Edge weights are initialized to 1.0. Raises ValidationError on NaN
    coordinates or non-positive k.
    """
    coords = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features.reshape(-1, 1)
    if k <= 0:
        raise ValidationError("distance threshold k must be positive")
    if np.any(~np.isfinite(coords)):
        raise ValidationError("NaN or infinite coordinate")
    if features.shape[0] != coords.shape[0]:
        raise ValidationError(
            f"feature rows ({features.shape[0]}) != point count ({coords.shape[0]})"
        )

    n = coords.shape[0]
    if n < 2:
        edges, weights = _empty_edges()
    else:
        pairs = cKDTree(coords).query_pairs(r=k, output_type="ndarray")
        if pairs.size:
            pairs = np.sort(pairs.astype(np.int64), axis=1)
            d = np.linalg.norm(coords[pairs[:, 0]] - coords[pairs[:, 1]], axis=1)
            pairs = pairs[d < k]  # query_pairs includes distance == k; the rule is strict
            order = np.lexsort((pairs[:, 1], pairs[:, 0]))
            edges = pairs[order]
            weights = np.ones(edges.shape[0], dtype=np.float64)
        else:
            edges, weights = _empty_edges()

    return SpatialGraph(
        coords=coords,
        node_features=features.astype(np.float64),
        edges=edges,
        edge_weights=weights,
        node_labels=list(labels) if labels is not None else None,
    )


def induced_subgraph(
    g: SpatialGraph, selector: Callable[[int], bool] | np.ndarray | Sequence[bool]
) -> SpatialGraph:
    """Subgraph over the selected nodes, preserving node order.

    ``selector`` is either a boolean mask of length n or a predicate applied
    to each node index.
    """
    if callable(selector):
        mask = np.fromiter((bool(selector(i)) for i in range(g.n_nodes)), dtype=bool, count=g.n_nodes)
    else:
        mask = np.asarray(selector, dtype=bool)
        if mask.shape != (g.n_nodes,):
            raise ValidationError("selector mask must have one entry per node")

    new_index = np.full(g.n_nodes, -1, dtype=np.int64)
    new_index[mask] = np.arange(int(mask.sum()))
    if g.n_edges:
        keep = mask[g.edges[:, 0]] & mask[g.edges[:, 1]]
        edges = new_index[g.edges[keep]]
        weights = g.edge_weights[keep]
    else:
        edges, weights = _empty_edges()
    labels = None
    if g.node_labels is not None:
        labels = [lab for lab, m in zip(g.node_labels, mask) if m]
    return SpatialGraph(
        coords=g.coords[mask],
        node_features=g.node_features[mask],
        edges=edges,
        edge_weights=weights,
        node_labels=labels,
    )


def graph_to_jsonable(g: SpatialGraph) -> dict:
    """The graph as a plain JSON-ready document; floats round-trip bit-exactly."""
    nodes = []
    for i in range(g.n_nodes):
        nodes.append(
            {
                "id": i,
                "x": float(g.coords[i, 0]),
                "y": float(g.coords[i, 1]),
                "features": [float(v) for v in g.node_features[i]],
                "label": g.node_labels[i].value if g.node_labels is not None else None,
            }
        )
    edges = [
        {"u": int(u), "v": int(v), "w": float(w)}
        for (u, v), w in zip(g.edges, g.edge_weights)
    ]
    return {
        "format": SERIAL_FORMAT,
        "version": SERIAL_VERSION,
        "feature_dim": int(g.node_features.shape[1]),
        "labeled": g.node_labels is not None,
        "nodes": nodes,
        "edges": edges,
    }


def serialize_graph(g: SpatialGraph) -> str:
    """Serialize to a structured JSON text."""
    return json.dumps(graph_to_jsonable(g), separators=(",", ":"))


def graph_from_jsonable(doc) -> SpatialGraph:
    """Inverse of :func:`graph_to_jsonable`; raises ParseError on malformed input."""
    if not isinstance(doc, dict) or doc.get("format") != SERIAL_FORMAT:
        raise ParseError("not a spatial-graph stream (missing format marker)")
    if doc.get("version") != SERIAL_VERSION:
        raise ParseError(f"unsupported graph stream version {doc.get('version')!r}")

    try:
        nodes = doc["nodes"]
        dim = int(doc["feature_dim"])
        labeled = bool(doc.get("labeled", False))
        n = len(nodes)
        coords = np.zeros((n, 2), dtype=np.float64)
        features = np.zeros((n, dim), dtype=np.float64)
        labels: list[Phenotype] | None = [] if labeled else None
        for i, nd in enumerate(nodes):
            coords[i] = (nd["x"], nd["y"])
            feats = nd["features"]
            if len(feats) != dim:
                raise ParseError(f"node {i}: expected {dim} features, got {len(feats)}")
            features[i] = feats
            if labeled:
                labels.append(Phenotype(nd["label"]))
        m = len(doc["edges"])
        edges = np.zeros((m, 2), dtype=np.int64)
        weights = np.zeros(m, dtype=np.float64)
        for j, ed in enumerate(doc["edges"]):
            edges[j] = (ed["u"], ed["v"])
            weights[j] = ed["w"]
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"invalid graph stream: {e}") from None

    g = SpatialGraph(
        coords=coords, node_features=features, edges=edges, edge_weights=weights, node_labels=labels
    )
    g.validate()
    return g


def deserialize_graph(text: str | bytes) -> SpatialGraph:
    """Inverse of :func:`serialize_graph`."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid graph stream: {e.msg}", offset=e.pos) from None
    return graph_from_jsonable(doc)
