"""RoI samples: tile decomposition, per-tile cell-graphs, and splits.

An RoI becomes a two-layer object: each sampled 256 px tile gets a
cell-graph over the nuclei it contains, and the tile centroids form a
second graph whose node features are the 68 catalog metrics plus room for
a 16-dim learned embedding (filled in by the classifier at forward time).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParseError, ValidationError
from .ingest import MARKERS, Region, RoIRecord, Stage, TileSpec, sample_tiles
from .metrics import N_METRICS, MetricVector, metric_names, metric_vector
from .spatial_graph import SpatialGraph, build_graph, graph_from_jsonable, graph_to_jsonable

N_CELL_FEATURES = 7  # cd4, cd8, cd20, foxp3, ck, area, solidity
EMBED_DIM = 16
TILE_FEATURE_DIM = N_METRICS + EMBED_DIM  # 84


def tile_feature_names() -> list[str]:
    """Column names for the 84-wide tile feature block: metric catalog then embedding slots."""
    return list(metric_names()) + [f"embed_{i:02d}" for i in range(EMBED_DIM)]


def assemble_tile_features(embedding: np.ndarray, metrics: MetricVector) -> np.ndarray:
    """One 84-wide tile row: the metric catalog first, embedding slots after."""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape != (EMBED_DIM,):
        raise ValidationError(f"embedding must have length {EMBED_DIM}")
    return np.concatenate([metrics.values, embedding])


def cell_feature_matrix(roi_cells) -> np.ndarray:
    """Per-cell 7-vector: the 5 marker expressions then area and solidity."""
    out = np.zeros((len(roi_cells), N_CELL_FEATURES))
    for i, c in enumerate(roi_cells):
        out[i, : len(MARKERS)] = c.expr
        out[i, 5] = c.area
        out[i, 6] = c.solidity
    return out


@dataclass
class RoISample:
    """One RoI ready for the hierarchical classifier."""

    roi_id: str
    patient_id: str
    region: Region
    stage: Stage
    tile_ids: list[str]
    cell_graphs: list[SpatialGraph]  # one per tile, 7-dim node features
    tile_graph: SpatialGraph  # nodes = tile centroids, 84-dim features
    tile_k: float  # threshold the tile_graph was built with
    mean_cell_features: np.ndarray = field(default_factory=lambda: np.zeros(N_CELL_FEATURES))

    @property
    def n_tiles(self) -> int:
        return len(self.tile_ids)

    @property
    def label_index(self) -> int:
        return list(Stage).index(self.stage)

    def validate(self) -> None:
        if self.tile_graph.n_nodes != len(self.cell_graphs):
            raise ValidationError("one cell-graph per tile node required")
        if len(self.tile_ids) != len(self.cell_graphs):
            raise ValidationError("one tile id per tile required")
        if self.tile_graph.feature_dim != TILE_FEATURE_DIM:
            raise ValidationError(f"tile features must be {TILE_FEATURE_DIM}-dim")


def _tile_cell_graph(roi: RoIRecord, tile: TileSpec, cell_k: float) -> SpatialGraph:
    members = [c for c in roi.cells if tile.contains(c.x, c.y)]
    for c in members:
        if c.phenotype is None:
            raise ValidationError(
                f"roi {roi.roi_id}: cell {c.cell_id} has no phenotype; run phenotyping first"
            )
    coords = np.array([(c.x, c.y) for c in members], dtype=np.float64).reshape(-1, 2)
    feats = cell_feature_matrix(members)
    labels = [c.phenotype for c in members]
    return build_graph(coords, feats, k=cell_k, labels=labels)


def build_sample(
    roi: RoIRecord,
    rng_seed,
    n_tiles: int = 200,
    tile_size: int = 256,
    cell_k: float = 30.0,
    tile_k: float = 200.0,
) -> RoISample:
    """Decompose one RoI into tiles, cell-graphs, metrics, and a tile-graph."""
    tiles = sample_tiles(roi, n=n_tiles, tile_size=tile_size, rng_seed=rng_seed)
    cell_graphs = [_tile_cell_graph(roi, t, cell_k) for t in tiles]
    metrics = np.stack([metric_vector(g).values for g in cell_graphs])
    centroids = np.array([t.centroid for t in tiles], dtype=np.float64)
    features = np.concatenate([metrics, np.zeros((n_tiles, EMBED_DIM))], axis=1)
    tile_graph = build_graph(centroids, features, k=tile_k)
    all_feats = cell_feature_matrix(roi.cells)
    mean_feats = all_feats.mean(axis=0) if len(roi.cells) else np.zeros(N_CELL_FEATURES)
    return RoISample(
        roi_id=roi.roi_id,
        patient_id=roi.patient_id,
        region=roi.region,
        stage=roi.stage,
        tile_ids=[t.tile_id for t in tiles],
        cell_graphs=cell_graphs,
        tile_graph=tile_graph,
        tile_k=tile_k,
        mean_cell_features=mean_feats,
    )


def build_samples(rois, seed: int, **kwargs) -> list[RoISample]:
    """One sample per RoI; tile placement gets an RoI-specific child seed."""
    rois = list(rois)
    children = np.random.SeedSequence(seed).spawn(len(rois))
    return [build_sample(roi, child, **kwargs) for roi, child in zip(rois, children)]


SAMPLE_FORMAT = "tmegraph.roi-sample"
SAMPLE_VERSION = 1


def sample_to_jsonable(sample: RoISample) -> dict:
    """One built sample as a JSON-ready bundle embedding all its graphs."""
    return {
        "format": SAMPLE_FORMAT,
        "version": SAMPLE_VERSION,
        "roi_id": sample.roi_id,
        "patient_id": sample.patient_id,
        "region": sample.region.value,
        "stage": sample.stage.value,
        "tile_k": float(sample.tile_k),
        "tile_ids": list(sample.tile_ids),
        "mean_cell_features": [float(v) for v in sample.mean_cell_features],
        "tile_graph": graph_to_jsonable(sample.tile_graph),
        "cell_graphs": [graph_to_jsonable(g) for g in sample.cell_graphs],
    }


def sample_from_jsonable(doc: dict) -> RoISample:
    """Inverse of :func:`sample_to_jsonable`; validates the rebuilt sample."""
    if not isinstance(doc, dict) or doc.get("format") != SAMPLE_FORMAT:
        raise ParseError("not an RoI sample bundle (missing format marker)")
    if doc.get("version") != SAMPLE_VERSION:
        raise ParseError(f"unsupported RoI sample version {doc.get('version')!r}")
    try:
        sample = RoISample(
            roi_id=doc["roi_id"],
            patient_id=doc["patient_id"],
            region=Region(doc["region"]),
            stage=Stage(doc["stage"]),
            tile_ids=list(doc["tile_ids"]),
            cell_graphs=[graph_from_jsonable(g) for g in doc["cell_graphs"]],
            tile_graph=graph_from_jsonable(doc["tile_graph"]),
            tile_k=float(doc["tile_k"]),
            mean_cell_features=np.asarray(doc["mean_cell_features"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"invalid RoI sample bundle: {e}") from None
    sample.validate()
    return sample


AUGMENT_THRESHOLDS = (150.0, 175.0, 200.0, 225.0, 250.0)
AUGMENT_KEEP_FRACTION = 0.8


def augment(sample: RoISample, rng: np.random.Generator) -> RoISample:
    """Random 80% tile subset with a re-drawn tile-graph threshold.

    Retained tiles keep their cell-graphs and metric features untouched;
    only the tile-graph adjacency changes.
    """
    n = sample.n_tiles
    n_keep = max(1, round(AUGMENT_KEEP_FRACTION * n))
    keep = np.sort(rng.choice(n, size=n_keep, replace=False))
    k = float(rng.choice(AUGMENT_THRESHOLDS))
    tile_graph = build_graph(
        sample.tile_graph.coords[keep], sample.tile_graph.node_features[keep], k=k
    )
    return replace(
        sample,
        tile_ids=[sample.tile_ids[i] for i in keep],
        cell_graphs=[sample.cell_graphs[i] for i in keep],
        tile_graph=tile_graph,
        tile_k=k,
    )


def make_test_graph(sample: RoISample, tile_k: float = 200.0) -> RoISample:
    """The deterministic evaluation form: every tile, fixed threshold."""
    tile_graph = build_graph(sample.tile_graph.coords, sample.tile_graph.node_features, k=tile_k)
    return replace(sample, tile_graph=tile_graph, tile_k=tile_k)


@dataclass
class SplitPlan:
    """Patient-disjoint train/test RoI ids plus a stratified pseudo-val subset."""

    train_rois: list[str]
    test_rois: list[str]
    pseudo_val_rois: list[str] = field(default_factory=list)

    def validate(self, samples) -> None:
        by_id = {s.roi_id: s for s in samples}
        missing = [r for r in self.train_rois + self.test_rois if r not in by_id]
        if missing:
            raise ValidationError(f"split references unknown RoIs: {missing[:5]}")
        if set(self.train_rois) & set(self.test_rois):
            raise ValidationError("train and test RoI sets overlap")
        train_patients = {by_id[r].patient_id for r in self.train_rois}
        test_patients = {by_id[r].patient_id for r in self.test_rois}
        shared = train_patients & test_patients
        if shared:
            raise ValidationError(f"patients in both train and test: {sorted(shared)[:5]}")
        stray = set(self.pseudo_val_rois) - set(self.train_rois)
        if stray:
            raise ValidationError("pseudo-validation RoIs must come from the training set")

    def to_dict(self) -> dict:
        return {
            "train_rois": list(self.train_rois),
            "test_rois": list(self.test_rois),
            "pseudo_val_rois": list(self.pseudo_val_rois),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SplitPlan":
        return cls(
            train_rois=list(doc["train_rois"]),
            test_rois=list(doc["test_rois"]),
            pseudo_val_rois=list(doc.get("pseudo_val_rois", [])),
        )


def make_split(
    samples,
    rng: np.random.Generator,
    test_fraction: float = 0.3,
    val_fraction: float = 0.1,
) -> SplitPlan:
    """Patient-level split filling the test side to the requested fraction.

    Whole patients move together, so the realized test fraction matches the
    target only as closely as patient sizes allow. The pseudo-validation
    subset is sampled from the training RoIs stratified by stage, at least
    one per represented class; val_fraction 0 disables it, in which case
    early stopping falls back to the training loss.
    """
    samples = list(samples)
    if not samples:
        raise ValidationError("cannot split an empty sample list")
    patients: dict[str, list[str]] = {}
    for s in samples:
        patients.setdefault(s.patient_id, []).append(s.roi_id)

    order = sorted(patients)
    rng.shuffle(order)
    target_test = round(test_fraction * len(samples))
    test_rois: list[str] = []
    train_rois: list[str] = []
    for pid in order:
        if len(test_rois) < target_test:
            test_rois.extend(patients[pid])
        else:
            train_rois.extend(patients[pid])
    if not train_rois or not test_rois:
        raise ValidationError("split produced an empty side; need more patients")

    stage_of = {s.roi_id: s.stage for s in samples}
    pseudo_val: list[str] = []
    if val_fraction > 0:
        for stage in Stage:
            group = [r for r in train_rois if stage_of[r] is stage]
            if not group:
                continue
            n_take = max(1, round(val_fraction * len(group)))
            picked = rng.choice(len(group), size=n_take, replace=False)
            pseudo_val.extend(group[i] for i in sorted(picked))

    plan = SplitPlan(train_rois=train_rois, test_rois=test_rois, pseudo_val_rois=pseudo_val)
    plan.validate(samples)
    return plan


def check_augmentation_diversity(sample: RoISample, seeds, min_distinct: int = 2) -> None:
    """Warn unless repeated augmentation varies both subset and threshold."""
    subsets = set()
    thresholds = set()
    for seed in seeds:
        aug = augment(sample, np.random.default_rng(seed))
        subsets.add(tuple(aug.tile_ids))
        thresholds.add(aug.tile_k)
    if len(subsets) < min_distinct or len(thresholds) < min_distinct:
        warnings.warn(
            "augmentation produced little variety; check rng seeding", stacklevel=2
        )
