"""Handcrafted immune-interaction network metrics for labeled cell-graphs.

The catalog is a fixed, versioned list of 68 per-graph features:

* 7 structural metrics (mean local clustering, mean square clustering,
  degree assortativity, radius of the largest connected component, density,
  transitivity, mean component-scaled closeness) for the whole graph and
  for each of the 5 per-phenotype induced subgraphs -> 42
* 12 ordered pairwise density ratios among the 4 immune phenotypes
* 1 immune-tumour over immune-immune interaction ratio
* 5 per-phenotype node fractions
* 5 per-phenotype mean degrees measured in the whole graph
* 3 globals: connected components per node, isolated-node fraction,
  mean degree

Degenerate cases (empty graphs, n < 2, zero-variance degrees, zero
denominators) map to 0 so every entry is always finite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from .errors import ValidationError
from .ingest import ALL_PHENOTYPES, IMMUNE_PHENOTYPES, Phenotype
from .spatial_graph import SpatialGraph, induced_subgraph

CATALOG_VERSION = "tme68-v1"

STRUCTURAL_METRIC_NAMES = (
    "clustering",
    "square_clustering",
    "assortativity",
    "radius",
    "density",
    "transitivity",
    "closeness",
)

_SCOPE_KEYS = ("all",) + tuple(p.value.lower() for p in ALL_PHENOTYPES)
_IMMUNE_KEYS = tuple(p.value.lower() for p in IMMUNE_PHENOTYPES)
_TYPE_KEYS = tuple(p.value.lower() for p in ALL_PHENOTYPES)


def metric_names() -> list[str]:
    """The documented 68-entry catalog ordering."""
    names = [
        f"{metric}__{scope}" for scope in _SCOPE_KEYS for metric in STRUCTURAL_METRIC_NAMES
    ]
    names += [
        f"density_ratio__{a}_{b}" for a in _IMMUNE_KEYS for b in _IMMUNE_KEYS if a != b
    ]
    names.append("interaction_ratio")
    names += [f"fraction__{t}" for t in _TYPE_KEYS]
    names += [f"mean_degree__{t}" for t in _TYPE_KEYS]
    names += ["components_per_node", "isolated_fraction", "mean_degree"]
    return names


METRIC_NAMES = metric_names()
N_METRICS = len(METRIC_NAMES)
assert N_METRICS == 68


@dataclass
class MetricVector:
    """The 68 catalog values for one cell-graph, in catalog order."""

    values: np.ndarray
    catalog_version: str = CATALOG_VERSION

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_METRICS,):
            raise ValidationError(f"metric vector must have length {N_METRICS}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("metric vector contains non-finite entries")

    def as_dict(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(METRIC_NAMES, self.values)}


def _mean_local_clustering(a: np.ndarray, deg: np.ndarray) -> float:
    n = a.shape[0]
    if n == 0:
        return 0.0
    tri = ((a @ a) * a).sum(axis=1) / 2.0  # triangles through each node
    possible = deg * (deg - 1) / 2.0
    coef = np.divide(tri, possible, out=np.zeros(n), where=possible > 0)
    return float(coef.mean())


def _mean_square_clustering(a: np.ndarray, deg: np.ndarray) -> float:
    """Mean of the Zhang/Lind square-clustering coefficient over all nodes."""
    n = a.shape[0]
    if n == 0:
        return 0.0
    common = a @ a
    total = 0.0
    for v in range(n):
        nv = np.flatnonzero(a[v])
        if nv.size < 2:
            continue
        squares = 0.0
        potential = 0.0
        for ai in range(nv.size):
            u = nv[ai]
            for bi in range(ai + 1, nv.size):
                w = nv[bi]
                q = common[u, w] - 1.0  # v itself is always a shared neighbour
                degm = q + 1.0 + a[u, w]
                potential += (deg[u] - degm) + (deg[w] - degm) + q
                squares += q
        if potential > 0:
            total += squares / potential
    return total / n


def _degree_assortativity(edges: np.ndarray, deg: np.ndarray) -> float:
    if edges.shape[0] == 0:
        return 0.0
    x = deg[edges[:, 0]].astype(np.float64)
    y = deg[edges[:, 1]].astype(np.float64)
    xs = np.concatenate([x, y])
    ys = np.concatenate([y, x])
    sx = xs.std()
    if sx < 1e-12:
        return 0.0  # zero degree variance: correlation undefined
    cov = ((xs - xs.mean()) * (ys - ys.mean())).mean()
    return float(cov / (sx * sx))


def _transitivity(a: np.ndarray, deg: np.ndarray) -> float:
    triangles3 = float(((a @ a) * a).sum()) / 2.0  # 3 * number of triangles
    triads = float((deg * (deg - 1)).sum()) / 2.0
    if triads <= 0:
        return 0.0
    return triangles3 / triads


def structural_metrics(g: SpatialGraph) -> np.ndarray:
    """The 7 structural metrics of one graph, degenerate cases mapped to 0."""
    n = g.n_nodes
    if n == 0:
        return np.zeros(len(STRUCTURAL_METRIC_NAMES))
    a = g.adjacency()
    deg = g.degrees().astype(np.float64)

    clustering = _mean_local_clustering(a, deg)
    square = _mean_square_clustering(a, deg)
    assort = _degree_assortativity(g.edges, deg)
    density = 2.0 * g.n_edges / (n * (n - 1)) if n >= 2 else 0.0
    transitivity = _transitivity(a, deg)

    labels, dist = _components_and_distances(a)
    sizes = np.bincount(labels)
    largest = int(np.argmax(sizes))  # first maximum = component of the lowest node index
    members = np.flatnonzero(labels == largest)
    if members.size >= 2:
        sub = dist[np.ix_(members, members)]
        radius = float(sub.max(axis=1).min())
    else:
        radius = 0.0

    closeness = 0.0
    if n >= 2:
        comp_size = sizes[labels].astype(np.float64)
        finite = np.where(np.isfinite(dist), dist, 0.0)
        totals = finite.sum(axis=1)
        reachable = comp_size - 1.0
        per_node = np.divide(
            reachable * reachable, totals * (n - 1), out=np.zeros(n), where=totals > 0
        )
        closeness = float(per_node.mean())

    return np.array(
        [clustering, square, assort, radius, density, transitivity, closeness], dtype=np.float64
    )


def _components_and_distances(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sparse = csr_matrix(a)
    _, labels = connected_components(sparse, directed=False)
    dist = shortest_path(sparse, method="D", directed=False, unweighted=True)
    return labels, dist


def interaction_ratio(g: SpatialGraph) -> float:
    """Immune-tumour edges over immune-immune edges; 0 when the latter is 0."""
    if g.node_labels is None:
        raise ValidationError("interaction_ratio requires node phenotype labels")
    if g.n_edges == 0:
        return 0.0
    immune = np.array([lab in IMMUNE_PHENOTYPES for lab in g.node_labels], dtype=bool)
    iu = immune[g.edges[:, 0]]
    iv = immune[g.edges[:, 1]]
    immune_tumour = int(np.sum(iu ^ iv))
    immune_immune = int(np.sum(iu & iv))
    if immune_immune == 0:
        return 0.0
    return immune_tumour / immune_immune


def metric_vector(g: SpatialGraph) -> MetricVector:
    """Compute the full 68-entry catalog for a phenotype-labeled graph."""
    if g.node_labels is None:
        raise ValidationError("metric_vector requires node phenotype labels")
    n = g.n_nodes
    values: list[float] = []

    label_arr = np.array([ALL_PHENOTYPES.index(lab) for lab in g.node_labels], dtype=np.int64)
    type_masks = {p: label_arr == i for i, p in enumerate(ALL_PHENOTYPES)}

    values.extend(structural_metrics(g))
    for p in ALL_PHENOTYPES:
        values.extend(structural_metrics(induced_subgraph(g, type_masks[p])))

    counts = {p: int(type_masks[p].sum()) for p in ALL_PHENOTYPES}
    fractions = {p: (counts[p] / n if n else 0.0) for p in ALL_PHENOTYPES}
    for a_ in IMMUNE_PHENOTYPES:
        for b_ in IMMUNE_PHENOTYPES:
            if a_ is b_:
                continue
            values.append(fractions[a_] / fractions[b_] if fractions[b_] > 0 else 0.0)

    values.append(interaction_ratio(g))
    values.extend(fractions[p] for p in ALL_PHENOTYPES)

    deg = g.degrees().astype(np.float64)
    for p in ALL_PHENOTYPES:
        values.append(float(deg[type_masks[p]].mean()) if counts[p] else 0.0)

    if n:
        _, comp_labels = connected_components(csr_matrix(g.adjacency()), directed=False)
        values.append(float(comp_labels.max() + 1) / n)
        values.append(float((deg == 0).mean()))
        values.append(float(deg.mean()))
    else:
        values.extend([0.0, 0.0, 0.0])

    return MetricVector(values=np.array(values, dtype=np.float64))
