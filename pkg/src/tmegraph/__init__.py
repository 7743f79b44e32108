"""Two-level spatial graph toolkit for multiplexed immunofluorescence RoIs.

Cell tables become per-tile cell-graphs and an RoI-level tile-graph; a
68-entry catalog of immune-interaction network metrics plus a learned
cell-graph embedding feed a hierarchical graph classifier for tumour
stage, with integrated-gradients and mask-based attribution on top. A
synthetic tissue generator with plantable class signals supports
controlled experiments, and the ``tmegraph`` command line drives the
full pipeline.
"""

__version__ = "0.1.0"

from .dataset import (
    AUGMENT_KEEP_FRACTION,
    AUGMENT_THRESHOLDS,
    EMBED_DIM,
    N_CELL_FEATURES,
    TILE_FEATURE_DIM,
    RoISample,
    SplitPlan,
    assemble_tile_features,
    augment,
    build_sample,
    build_samples,
    make_split,
    make_test_graph,
    sample_from_jsonable,
    sample_to_jsonable,
    tile_feature_names,
)
from .errors import ParseError, SchemaError, TmegraphError, ValidationError
from .explain import (
    Attribution,
    ExplainConfig,
    ExplainerMasks,
    feature_importance_report,
    gnn_explain,
    integrated_gradients,
    rank_tiles,
)
from .ingest import (
    MARKERS,
    CellRecord,
    Phenotype,
    Region,
    RoIRecord,
    Stage,
    TileSpec,
    parse_cell_table,
    parse_roi_table,
    phenotype_cells,
    phenotype_cohort,
    sample_tiles,
)
from .metrics import (
    CATALOG_VERSION,
    METRIC_NAMES,
    N_METRICS,
    MetricVector,
    interaction_ratio,
    metric_names,
    metric_vector,
    structural_metrics,
)
from .model import (
    MODEL_NAMES,
    HierGCN,
    HierModelConfig,
    MILBaseline,
    MLPBaseline,
    build_model,
    classify_roi,
    load_checkpoint,
    model_name,
    save_checkpoint,
)
from .spatial_graph import (
    SpatialGraph,
    build_graph,
    deserialize_graph,
    induced_subgraph,
    serialize_graph,
)
from .synth import (
    ClassProfile,
    SynthConfig,
    generate_cohort,
    planted_signal_cohort,
    write_cells_csv,
    write_rois_csv,
    write_truth_json,
)
from .training import (
    TrainResult,
    class_weights,
    evaluate,
    predict,
    train,
    weighted_f1,
)

__all__ = [
    "__version__",
    "AUGMENT_KEEP_FRACTION",
    "AUGMENT_THRESHOLDS",
    "Attribution",
    "CATALOG_VERSION",
    "CellRecord",
    "ClassProfile",
    "EMBED_DIM",
    "ExplainConfig",
    "ExplainerMasks",
    "HierGCN",
    "HierModelConfig",
    "MARKERS",
    "METRIC_NAMES",
    "MILBaseline",
    "MLPBaseline",
    "MODEL_NAMES",
    "MetricVector",
    "N_CELL_FEATURES",
    "N_METRICS",
    "ParseError",
    "Phenotype",
    "Region",
    "RoIRecord",
    "RoISample",
    "SchemaError",
    "SpatialGraph",
    "SplitPlan",
    "Stage",
    "SynthConfig",
    "TILE_FEATURE_DIM",
    "TileSpec",
    "TmegraphError",
    "TrainResult",
    "ValidationError",
    "assemble_tile_features",
    "augment",
    "build_graph",
    "build_model",
    "build_sample",
    "build_samples",
    "class_weights",
    "classify_roi",
    "deserialize_graph",
    "evaluate",
    "feature_importance_report",
    "generate_cohort",
    "gnn_explain",
    "induced_subgraph",
    "integrated_gradients",
    "interaction_ratio",
    "load_checkpoint",
    "make_split",
    "make_test_graph",
    "metric_names",
    "metric_vector",
    "model_name",
    "parse_cell_table",
    "parse_roi_table",
    "phenotype_cells",
    "phenotype_cohort",
    "planted_signal_cohort",
    "predict",
    "rank_tiles",
    "sample_from_jsonable",
    "sample_tiles",
    "sample_to_jsonable",
    "save_checkpoint",
    "serialize_graph",
    "structural_metrics",
    "tile_feature_names",
    "train",
    "weighted_f1",
    "write_cells_csv",
    "write_rois_csv",
    "write_truth_json",
]
