"""The hierarchical tile-graph classifier and its two baselines.

Forward passes run on the autodiff engine so the same code serves training
and attribution. Edge weights and an optional per-feature mask can be
injected as tracked tensors, which is how the attribution methods get
gradients with respect to them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .dataset import EMBED_DIM, N_CELL_FEATURES, N_METRICS, TILE_FEATURE_DIM, RoISample
from .errors import ValidationError
from .ingest import Stage
from .spatial_graph import SpatialGraph

CHECKPOINT_FORMAT = "tmegraph.checkpoint"
CHECKPOINT_VERSION = 1

MODEL_NAMES = ("gcn-mean", "gcn-add", "gcn-max", "mlp", "mil-att", "mil-mean")


@dataclass
class HierModelConfig:
    """Hyperparameters of the classifier stack and its training harness."""

    cell_mp_steps: int = 3
    cell_embed_dim: int = EMBED_DIM
    tile_layers: int = 3
    hidden_dim: int = 32
    readout_mode: str = "mean"
    dropout: float = 0.5
    lr: float = 1e-5
    weight_decay: float = 1e-5
    batch_size: int = 64
    n_classes: int = 3
    cell_k: float = 30.0
    tile_k_default: float = 200.0
    tiles_per_roi: int = 200
    tile_size: int = 256
    encoder_mode: str = "joint"  # or "frozen": embeddings from fixed init weights
    mil_att_dim: int = 16
    patience: int = 20
    max_epochs: int = 500
    augment_copies: int = 5
    class_merge: tuple[tuple[str, ...], ...] | None = None

    def __post_init__(self):
        if self.readout_mode not in nn.READOUTS:
            raise ValidationError(f"readout_mode must be one of {nn.READOUTS}")
        if self.encoder_mode not in ("joint", "frozen"):
            raise ValidationError("encoder_mode must be 'joint' or 'frozen'")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")
        if self.class_merge is not None:
            self.class_merge = tuple(tuple(g) for g in self.class_merge)
            flat = [s for grp in self.class_merge for s in grp]
            if sorted(flat) != sorted(s.value for s in Stage):
                raise ValidationError("class_merge must cover each stage exactly once")
            self.n_classes = len(self.class_merge)
        if self.class_merge is None and self.n_classes != len(Stage):
            raise ValidationError(f"n_classes must be {len(Stage)} unless classes are merged")

    def class_names(self) -> list[str]:
        if self.class_merge is None:
            return [s.value for s in Stage]
        return ["+".join(grp) for grp in self.class_merge]

    def stage_to_class(self, stage: Stage) -> int:
        if self.class_merge is None:
            return list(Stage).index(stage)
        for i, grp in enumerate(self.class_merge):
            if stage.value in grp:
                return i
        raise ValidationError(f"stage {stage.value} missing from class_merge")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(map(list, v)) if f.name == "class_merge" and v else v
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "HierModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(doc)
        if kwargs.get("class_merge"):
            kwargs["class_merge"] = tuple(tuple(g) for g in kwargs["class_merge"])
        return cls(**kwargs)


class Standardizer:
    """Per-column zero-mean unit-variance transform fitted on training data."""

    def __init__(self, mean: np.ndarray | None = None, std: np.ndarray | None = None):
        self.mean = mean
        self.std = std

    def fit(self, rows: np.ndarray) -> "Standardizer":
        self.mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        self.std = np.where(std > 1e-12, std, 1.0)
        return self

    def transform(self, rows: np.ndarray) -> np.ndarray:
        if self.mean is None:
            raise ValidationError("standardizer not fitted")
        return (rows - self.mean) / self.std

    def to_jsonable(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_jsonable(cls, doc: dict) -> "Standardizer":
        return cls(np.asarray(doc["mean"], dtype=np.float64), np.asarray(doc["std"], dtype=np.float64))


class CellEncoder:
    """Cell-graph to 16-vector: 3 GraphConv+ReLU steps, mean pool, linear."""

    def __init__(self, config: HierModelConfig, rng: np.random.Generator):
        dim = config.cell_embed_dim
        self.convs = []
        d_in = N_CELL_FEATURES
        for _ in range(config.cell_mp_steps):
            self.convs.append(nn.GraphConv(d_in, dim, rng))
            d_in = dim
        self.out = nn.Linear(dim, dim, rng)

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, conv in enumerate(self.convs):
            params.update(nn.collect_parameters(f"enc.conv{i}", conv))
        params.update(nn.collect_parameters("enc.out", self.out))
        return params

    def encode(self, g: SpatialGraph, frozen: bool) -> Tensor:
        """Embed one cell-graph; an empty tile embeds to the zero vector.

        With ``frozen`` the parameters enter as untracked constants, so the
        result carries no computation graph; the arithmetic is identical.
        """
        if g.n_nodes == 0:
            return Tensor(np.zeros(self.out.bias.data.shape[0]))

        def const(t: Tensor) -> Tensor:
            return Tensor(t.data) if frozen else t

        h: Tensor = Tensor(g.node_features)
        w = Tensor(g.edge_weights)
        for conv in self.convs:
            neigh = ad.edge_aggregate(h, g.edges, w)
            h = ad.relu(
                ad.matmul(h, const(conv.w_self))
                + ad.matmul(neigh, const(conv.w_neigh))
                + const(conv.bias)
            )
        pooled = nn.readout(h, "mean")
        return ad.matmul(pooled, const(self.out.weight)) + const(self.out.bias)


class _ModelBase:
    kind: str = ""

    def __init__(self, config: HierModelConfig):
        self.config = config
        self.metric_standardizer = Standardizer()
        self.embed_standardizer = Standardizer()
        self._embed_cache: dict[int, tuple[SpatialGraph, np.ndarray]] = {}

    # -- shared plumbing --------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:  # pragma: no cover - overridden
        raise NotImplementedError

    def trainable_parameters(self) -> dict[str, Tensor]:
        return self.parameters()

    def fit_standardizers(self, samples) -> None:
        """Fit per-column transforms for both halves of the tile features.

        Raw cell features (areas near 100, marker levels near 2) passed
        through sum-aggregating convolutions give embeddings orders of
        magnitude larger than the unit-variance metrics, so the embedding
        block gets its own standardizer. It is fitted against the encoder
        as currently initialized; under joint training the encoder drifts
        afterwards, but the gross scale correction is what matters.
        """
        rows = np.vstack([s.tile_graph.node_features[:, :N_METRICS] for s in samples])
        self.metric_standardizer.fit(rows)
        frozen = self.config.encoder_mode == "frozen"
        embeds = []
        for s in samples:
            for g in s.cell_graphs:
                vec = self.encoder.encode(g, frozen=True).data
                if frozen:
                    self._embed_cache[id(g)] = (g, vec)
                embeds.append(vec)
        self.embed_standardizer.fit(np.stack(embeds))

    def forward_sample(self, sample: RoISample, rng=None, training: bool = False) -> Tensor:
        raise NotImplementedError

    def predict_logits(self, samples) -> np.ndarray:
        return np.stack([self.forward_sample(s).data for s in samples])

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model": model_name(self),
            "config": self.config.to_dict(),
            "params": nn.params_to_jsonable(self.parameters()),
            "standardizers": self._standardizer_state(),
        }

    def _standardizer_state(self) -> dict:
        return {
            "metrics": self.metric_standardizer.to_jsonable(),
            "embeddings": self.embed_standardizer.to_jsonable(),
        }

    def _load_standardizer_state(self, doc: dict) -> None:
        self.metric_standardizer = Standardizer.from_jsonable(doc["metrics"])
        self.embed_standardizer = Standardizer.from_jsonable(doc["embeddings"])

    def load_state(self, doc: dict) -> None:
        nn.load_params(self.parameters(), doc["params"])
        self._load_standardizer_state(doc["standardizers"])
        self._embed_cache.clear()  # frozen embeddings depend on encoder weights

    # -- tile features ----------------------------------------------------

    def _tile_features(self, sample: RoISample, feature_mask: Tensor | None) -> Tensor:
        """Stack per-tile [standardized metrics | embedding] rows."""
        frozen = self.config.encoder_mode == "frozen"
        rows = []
        for g in sample.cell_graphs:
            if frozen:
                key = id(g)
                hit = self._embed_cache.get(key)
                if hit is None or hit[0] is not g:
                    vec = self.encoder.encode(g, frozen=True).data
                    self._embed_cache[key] = (g, vec)
                else:
                    vec = hit[1]
                rows.append(Tensor(vec))
            else:
                rows.append(self.encoder.encode(g, frozen=False))
        es = self.embed_standardizer
        if es.mean is None:
            raise ValidationError("standardizer not fitted")
        emb = ad.mul(ad.stack(rows) + Tensor(-es.mean), Tensor(1.0 / es.std))
        metrics = Tensor(
            self.metric_standardizer.transform(sample.tile_graph.node_features[:, :N_METRICS])
        )
        feats = ad.concat([metrics, emb], axis=1)
        if feature_mask is not None:
            feats = ad.mul(feats, feature_mask)
        return feats


class HierGCN(_ModelBase):
    """Two-layer pipeline: cell encoder then 3 GraphConvs over the tile-graph."""

    kind = "gcn"

    def __init__(self, config: HierModelConfig, rng: np.random.Generator):
        super().__init__(config)
        self.encoder = CellEncoder(config, rng)
        self.tile_convs = []
        d_in = TILE_FEATURE_DIM
        for _ in range(config.tile_layers):
            self.tile_convs.append(nn.GraphConv(d_in, config.hidden_dim, rng))
            d_in = config.hidden_dim
        self.head = nn.Linear(config.hidden_dim, config.n_classes, rng)

    def parameters(self) -> dict[str, Tensor]:
        params = self.encoder.parameters()
        for i, conv in enumerate(self.tile_convs):
            params.update(nn.collect_parameters(f"tile.conv{i}", conv))
        params.update(nn.collect_parameters("head", self.head))
        return params

    def trainable_parameters(self) -> dict[str, Tensor]:
        params = self.parameters()
        if self.config.encoder_mode == "frozen":
            params = {k: v for k, v in params.items() if not k.startswith("enc.")}
        return params

    def forward_sample(
        self,
        sample: RoISample,
        rng: np.random.Generator | None = None,
        training: bool = False,
        edge_weights: Tensor | None = None,
        feature_mask: Tensor | None = None,
    ) -> Tensor:
        if sample.tile_graph.n_nodes == 0:
            raise ValidationError(f"roi {sample.roi_id}: empty tile-graph cannot be classified")
        h = self._tile_features(sample, feature_mask)
        w = edge_weights if edge_weights is not None else Tensor(sample.tile_graph.edge_weights)
        for conv in self.tile_convs:
            h = ad.relu(conv(h, sample.tile_graph.edges, w))
        z = nn.readout(h, self.config.readout_mode)
        z = nn.dropout(z, self.config.dropout, rng, training)
        return self.head(z)


class MLPBaseline(_ModelBase):
    """Topology-blind control: RoI-mean nuclei features through a small MLP."""

    kind = "mlp"

    def __init__(self, config: HierModelConfig, rng: np.random.Generator):
        super().__init__(config)
        self.fc1 = nn.Linear(N_CELL_FEATURES, config.hidden_dim, rng)
        self.fc2 = nn.Linear(config.hidden_dim, config.hidden_dim, rng)
        self.head = nn.Linear(config.hidden_dim, config.n_classes, rng)
        self.feature_standardizer = Standardizer()

    def parameters(self) -> dict[str, Tensor]:
        params = nn.collect_parameters("fc1", self.fc1)
        params.update(nn.collect_parameters("fc2", self.fc2))
        params.update(nn.collect_parameters("head", self.head))
        return params

    def fit_standardizers(self, samples) -> None:
        self.feature_standardizer.fit(np.stack([s.mean_cell_features for s in samples]))

    def _standardizer_state(self) -> dict:
        return {"features": self.feature_standardizer.to_jsonable()}

    def _load_standardizer_state(self, doc: dict) -> None:
        self.feature_standardizer = Standardizer.from_jsonable(doc["features"])

    def forward_sample(self, sample: RoISample, rng=None, training: bool = False) -> Tensor:
        x = Tensor(self.feature_standardizer.transform(sample.mean_cell_features))
        h = ad.relu(self.fc1(x))
        h = nn.dropout(h, self.config.dropout, rng, training)
        h = ad.relu(self.fc2(h))
        h = nn.dropout(h, self.config.dropout, rng, training)
        return self.head(h)


class MILBaseline(_ModelBase):
    """Bag classifier over per-tile 84-dim instances; no tile-graph edges."""

    kind = "mil"

    def __init__(self, config: HierModelConfig, rng: np.random.Generator, pool: str = "attention"):
        super().__init__(config)
        if pool not in ("attention", "mean"):
            raise ValidationError("pool must be 'attention' or 'mean'")
        self.pool = pool
        self.encoder = CellEncoder(config, rng)
        self.att_U = Tensor(
            nn.glorot_uniform(rng, TILE_FEATURE_DIM, config.mil_att_dim), requires_grad=True
        )
        self.att_v = Tensor(
            nn.glorot_uniform(rng, config.mil_att_dim, 1)[:, 0], requires_grad=True
        )
        self.fc = nn.Linear(TILE_FEATURE_DIM, config.hidden_dim, rng)
        self.head = nn.Linear(config.hidden_dim, config.n_classes, rng)

    def parameters(self) -> dict[str, Tensor]:
        params = self.encoder.parameters()
        params.update({"att.U": self.att_U, "att.v": self.att_v})
        params.update(nn.collect_parameters("fc", self.fc))
        params.update(nn.collect_parameters("head", self.head))
        return params

    def trainable_parameters(self) -> dict[str, Tensor]:
        params = self.parameters()
        if self.config.encoder_mode == "frozen":
            params = {k: v for k, v in params.items() if not k.startswith("enc.")}
        return params

    def attention_weights(self, sample: RoISample) -> np.ndarray:
        """Evaluation-time per-tile pooling weights (uniform for mean pooling)."""
        if self.pool == "mean":
            return np.full(sample.n_tiles, 1.0 / sample.n_tiles)
        h = self._tile_features(sample, None)
        scores = ad.matmul(ad.tanh(ad.matmul(h, self.att_U)), self.att_v)
        return ad.softmax(scores).data

    def forward_sample(self, sample: RoISample, rng=None, training: bool = False) -> Tensor:
        if sample.n_tiles == 0:
            raise ValidationError(f"roi {sample.roi_id}: empty bag cannot be classified")
        h = self._tile_features(sample, None)  # (n, 84)
        if self.pool == "attention":
            scores = ad.matmul(ad.tanh(ad.matmul(h, self.att_U)), self.att_v)  # (n,)
            weights = ad.softmax(scores)
        else:
            weights = Tensor(np.full(sample.n_tiles, 1.0 / sample.n_tiles))
        bag = ad.matmul(weights, h)  # (84,)
        z = ad.relu(self.fc(bag))
        z = nn.dropout(z, self.config.dropout, rng, training)
        return self.head(z)


def build_model(name: str, config: HierModelConfig, seed: int):
    """Instantiate one of the named model variants with a derived init seed."""
    if name not in MODEL_NAMES:
        raise ValidationError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if name.startswith("gcn-"):
        mode = name.split("-", 1)[1]
        cfg = HierModelConfig.from_dict({**config.to_dict(), "readout_mode": mode})
        return HierGCN(cfg, rng)
    if name == "mlp":
        return MLPBaseline(config, rng)
    pool = "attention" if name == "mil-att" else "mean"
    return MILBaseline(config, rng, pool=pool)


def classify_roi(sample: RoISample, model) -> np.ndarray:
    """Class logits for one RoI under a fitted model; inference mode, no dropout."""
    return model.forward_sample(sample).data


def model_name(model) -> str:
    if isinstance(model, HierGCN):
        return f"gcn-{model.config.readout_mode}"
    if isinstance(model, MLPBaseline):
        return "mlp"
    return "mil-att" if model.pool == "attention" else "mil-mean"


def save_checkpoint(model, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.state()))


def load_checkpoint(path: str | Path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    config = HierModelConfig.from_dict(doc["config"])
    model = build_model(doc["model"], config, seed=0)
    try:
        model.load_state(doc)
    except ValueError as e:
        raise ValidationError(f"{path}: {e}") from None
    return model
