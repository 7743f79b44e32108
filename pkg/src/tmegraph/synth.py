"""Synthetic multiplexed-tissue cohorts with plantable class signals.

Each RoI is a two-stage point pattern: epithelial cells fall as offspring
of a handful of uniformly placed nest centres, immune cells either join
those nests or gather in separate aggregates of their own, controlled by
a per-class mixing knob. Regulatory T-cells can additionally condense
into tight clumps. Marker expressions are high on the own marker and low
elsewhere, plus clipped Gaussian noise, so the rank-based phenotyper can
re-derive the planted types.

Two special cohorts support controlled experiments: ``topology_only``
varies nothing but the spatial arrangement between classes, keeping every
per-cell feature distribution identical; ``feature_only`` holds the
arrangement fixed and shifts the helper/cytotoxic split of a constant
combined T-cell budget, which moves the helper-to-cytotoxic density
ratio more than any other catalog statistic.

Determinism: every RoI draws from its own generator seeded by
``SeedSequence(rng_seed).spawn(...)`` with child 0 reserved for the
patient stage assignment and child ``1 + patient_index * rois_per_patient
+ roi_index`` for each RoI, so cohorts reproduce exactly for a given seed
and RoIs could be generated in parallel.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .ingest import MARKERS, ALL_PHENOTYPES, CellRecord, Phenotype, Region, RoIRecord, Stage

#: Marker column carrying the high signal for each phenotype.
OWN_MARKER_INDEX = {
    Phenotype.THelper: MARKERS.index("cd4"),
    Phenotype.TCytotoxic: MARKERS.index("cd8"),
    Phenotype.BCell: MARKERS.index("cd20"),
    Phenotype.TReg: MARKERS.index("foxp3"),
    Phenotype.Epithelial: MARKERS.index("ck"),
}

EXPR_HIGH = 2.0
EXPR_LOW = 0.2

#: Largest marker noise sigma at which the rank phenotyper still recovers
#: at least 95 percent of planted types on the default profiles
#: (calibrated; verified by the recovery test).
RECOVERY_NOISE_CEILING = 0.5

# Point-process shape constants. Nest and aggregate spreads are equal on
# purpose: an immune cell then lives in the same local geometry whether it
# sits inside a tumour nest or in an immune aggregate, so the mixing knob
# changes who its neighbours are without changing how many it has.
NEST_COUNT_MEAN = 4.0
NEST_SPREAD = 60.0
IMMUNE_AGGREGATE_COUNT_MEAN = 3.0
TREG_CLUMP_SPREAD = 25.0
#: Share of the Treg budget that condenses into clumps when any are drawn;
#: clumps reuse the budget rather than adding cells on top of it, keeping
#: the expected total equal to the sum of the intensities.
TREG_CLUMP_FRACTION = 0.7

#: Equal type budgets keep the positive fraction of every marker column
#: comparable, which the percentile-rank phenotyper needs: a column whose
#: positives are much rarer than another's would let background values
#: outrank genuine positives of the commoner type.
DEFAULT_LAMBDA = {p.value: 96.0 for p in ALL_PHENOTYPES}

STAGES = (Stage.pT1, Stage.pT2, Stage.pT3)


@dataclass
class ClassProfile:
    """Generation knobs for one tumour stage."""

    mixing: float = 0.5  # 0 = immune apart from nests, 1 = immune inside them
    treg_cluster_rate: float = 1.0  # Poisson mean of tight Treg clumps per RoI
    cd4_cd8_ratio: float = 1.0  # redistributes the combined T-cell budget
    lam: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LAMBDA))

    def __post_init__(self):
        if not 0.0 <= self.mixing <= 1.0:
            raise ValidationError(f"mixing must lie in [0, 1], got {self.mixing}")
        if self.treg_cluster_rate < 0:
            raise ValidationError(f"treg_cluster_rate must be >= 0, got {self.treg_cluster_rate}")
        if not self.cd4_cd8_ratio > 0:
            raise ValidationError(f"cd4_cd8_ratio must be positive, got {self.cd4_cd8_ratio}")
        known = {p.value for p in ALL_PHENOTYPES}
        for key, value in self.lam.items():
            if key not in known:
                raise ValidationError(f"unknown phenotype {key!r} in cell intensities")
            if value < 0:
                raise ValidationError(f"cell intensity for {key} must be >= 0, got {value}")
        if sum(self.lam.get(k, 0.0) for k in known) <= 0:
            raise ValidationError("cell intensities sum to zero; cohort would be empty")

    def type_intensities(self) -> dict[Phenotype, float]:
        """Expected cells per RoI and type after applying the CD4:CD8 ratio."""
        lam = {p: float(self.lam.get(p.value, 0.0)) for p in ALL_PHENOTYPES}
        t_total = lam[Phenotype.THelper] + lam[Phenotype.TCytotoxic]
        r = self.cd4_cd8_ratio
        lam[Phenotype.THelper] = t_total * r / (1.0 + r)
        lam[Phenotype.TCytotoxic] = t_total / (1.0 + r)
        return lam

    def to_dict(self) -> dict:
        return {
            "mixing": self.mixing,
            "treg_cluster_rate": self.treg_cluster_rate,
            "cd4_cd8_ratio": self.cd4_cd8_ratio,
            "lam": dict(self.lam),
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "ClassProfile":
        unknown = set(blob) - {"mixing", "treg_cluster_rate", "cd4_cd8_ratio", "lam"}
        if unknown:
            raise ValidationError(f"unknown class profile fields: {sorted(unknown)}")
        return cls(**blob)


def default_profiles() -> dict[str, ClassProfile]:
    """Stage profiles with a mild blend of topological differences."""
    return {
        Stage.pT1.value: ClassProfile(mixing=0.15, treg_cluster_rate=0.5, cd4_cd8_ratio=1.2),
        Stage.pT2.value: ClassProfile(mixing=0.5, treg_cluster_rate=1.5, cd4_cd8_ratio=1.0),
        Stage.pT3.value: ClassProfile(mixing=0.85, treg_cluster_rate=3.0, cd4_cd8_ratio=0.8),
    }


@dataclass
class SynthConfig:
    """Cohort-level generation settings."""

    n_patients: int = 10
    rois_per_patient: int = 3
    roi_size: int = 2048
    class_priors: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    profiles: dict[str, ClassProfile] = field(default_factory=default_profiles)
    marker_noise: float = 0.3
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1 or self.rois_per_patient < 1:
            raise ValidationError("cohort needs at least one patient and one RoI per patient")
        if self.roi_size <= 0:
            raise ValidationError(f"roi_size must be positive, got {self.roi_size}")
        priors = np.asarray(self.class_priors, dtype=np.float64)
        if priors.shape != (3,) or np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
            raise ValidationError("class_priors must be three non-negative values summing to 1")
        if self.marker_noise < 0:
            raise ValidationError(f"marker_noise must be >= 0, got {self.marker_noise}")
        missing = {s.value for s in STAGES} - set(self.profiles)
        if missing:
            raise ValidationError(f"profiles missing for stages: {sorted(missing)}")
        for key, profile in self.profiles.items():
            if not isinstance(profile, ClassProfile):
                raise ValidationError(f"profile for {key} must be a ClassProfile")

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "rois_per_patient": self.rois_per_patient,
            "roi_size": self.roi_size,
            "class_priors": list(self.class_priors),
            "profiles": {k: p.to_dict() for k, p in self.profiles.items()},
            "marker_noise": self.marker_noise,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "SynthConfig":
        known = {
            "n_patients", "rois_per_patient", "roi_size", "class_priors",
            "profiles", "marker_noise", "rng_seed",
        }
        unknown = set(blob) - known
        if unknown:
            raise ValidationError(f"unknown cohort config fields: {sorted(unknown)}")
        kwargs = dict(blob)
        if "class_priors" in kwargs:
            kwargs["class_priors"] = tuple(kwargs["class_priors"])
        if "profiles" in kwargs:
            kwargs["profiles"] = {
                k: p if isinstance(p, ClassProfile) else ClassProfile.from_dict(p)
                for k, p in kwargs["profiles"].items()
            }
        return cls(**kwargs)


def expected_cells(profile: ClassProfile) -> float:
    """Mean total cell count per RoI under a profile."""
    return float(sum(profile.type_intensities().values()))


def _scatter(centres: np.ndarray, picks: np.ndarray, spread: float, rng) -> np.ndarray:
    return centres[picks] + rng.normal(0.0, spread, size=(picks.size, 2))


def _nest_placement(profile, cfg, rng) -> tuple[list[np.ndarray], list[Phenotype], dict]:
    """Tumour nests plus immune aggregates; the mixing knob moves immune cells
    between the two kinds of centre and Tregs may condense into clumps."""
    size = float(cfg.roi_size)
    inner_lo, inner_hi = 0.1 * size, 0.9 * size

    n_nests = max(1, int(rng.poisson(NEST_COUNT_MEAN)))
    nests = rng.uniform(inner_lo, inner_hi, size=(n_nests, 2))
    n_aggr = max(1, int(rng.poisson(IMMUNE_AGGREGATE_COUNT_MEAN)))
    aggregates = rng.uniform(inner_lo, inner_hi, size=(n_aggr, 2))

    lam = profile.type_intensities()
    counts = {p: int(rng.poisson(lam[p])) for p in ALL_PHENOTYPES}

    coords: list[np.ndarray] = []
    types: list[Phenotype] = []
    for p in ALL_PHENOTYPES:
        n = counts[p]
        if n == 0:
            continue
        if p is Phenotype.Epithelial:
            picks = rng.integers(0, n_nests, size=n)
            pos = _scatter(nests, picks, NEST_SPREAD, rng)
        elif p is Phenotype.TReg and profile.treg_cluster_rate > 0:
            n_clumps = int(rng.poisson(profile.treg_cluster_rate))
            clumped = (
                rng.random(n) < TREG_CLUMP_FRACTION if n_clumps else np.zeros(n, dtype=bool)
            )
            pos = np.empty((n, 2))
            if clumped.any():
                clump_centres = rng.uniform(inner_lo, inner_hi, size=(n_clumps, 2))
                picks = rng.integers(0, n_clumps, size=int(clumped.sum()))
                pos[clumped] = _scatter(clump_centres, picks, TREG_CLUMP_SPREAD, rng)
            pos[~clumped] = _mixed_positions(
                int((~clumped).sum()), profile.mixing, nests, aggregates, rng
            )
        else:
            pos = _mixed_positions(n, profile.mixing, nests, aggregates, rng)
        coords.append(pos)
        types.extend([p] * n)
    return coords, types, counts


def _generate_roi(
    roi_id: str,
    patient_id: str,
    region: Region,
    stage: Stage,
    profile: ClassProfile,
    cfg: SynthConfig,
    rng: np.random.Generator,
) -> tuple[RoIRecord, dict]:
    coords, types, counts = _nest_placement(profile, cfg, rng)
    total = sum(counts.values())
    xy = np.clip(
        np.concatenate(coords) if coords else np.empty((0, 2)),
        0.0,
        np.nextafter(float(cfg.roi_size), 0.0),
    )

    expr = np.full((total, len(MARKERS)), EXPR_LOW)
    for i, p in enumerate(types):
        expr[i, OWN_MARKER_INDEX[p]] = EXPR_HIGH
    expr = np.clip(expr + rng.normal(0.0, cfg.marker_noise, size=expr.shape), 0.0, None)
    area = rng.uniform(40.0, 120.0, size=total)
    solidity = rng.uniform(0.75, 0.98, size=total)

    cells = [
        CellRecord(
            cell_id=f"{roi_id}_c{i:05d}",
            x=float(xy[i, 0]),
            y=float(xy[i, 1]),
            area=float(area[i]),
            solidity=float(solidity[i]),
            expr=expr[i].copy(),
            phenotype=types[i],
        )
        for i in range(total)
    ]
    roi = RoIRecord(
        roi_id=roi_id,
        patient_id=patient_id,
        region=region,
        stage=stage,
        width=cfg.roi_size,
        height=cfg.roi_size,
        cells=cells,
    )
    roi.validate()
    planted = {
        "stage": stage.value,
        "profile": profile.to_dict(),
        "n_cells": {p.value: counts[p] for p in ALL_PHENOTYPES},
    }
    return roi, planted


def _mixed_positions(n, mixing, nests, aggregates, rng) -> np.ndarray:
    """Immune placement: with probability ``mixing`` join a tumour nest."""
    pos = np.empty((n, 2))
    join = rng.random(n) < mixing
    n_join = int(join.sum())
    if n_join:
        picks = rng.integers(0, nests.shape[0], size=n_join)
        pos[join] = _scatter(nests, picks, NEST_SPREAD, rng)
    if n - n_join:
        picks = rng.integers(0, aggregates.shape[0], size=n - n_join)
        pos[~join] = _scatter(aggregates, picks, NEST_SPREAD, rng)
    return pos


def generate_cohort(cfg: SynthConfig) -> tuple[list[RoIRecord], dict]:
    """Draw a full cohort; stages are assigned per patient from the priors.

    Returns the RoI records (cells carry their planted phenotype) and a
    ground-truth dictionary mirroring everything the generator decided.
    """
    children = np.random.SeedSequence(cfg.rng_seed).spawn(
        cfg.n_patients * cfg.rois_per_patient + 1
    )
    stage_rng = np.random.default_rng(children[0])
    stage_idx = stage_rng.choice(3, size=cfg.n_patients, p=np.asarray(cfg.class_priors))

    regions = tuple(Region)
    rois: list[RoIRecord] = []
    truth_rois: dict[str, dict] = {}
    for p in range(cfg.n_patients):
        stage = STAGES[int(stage_idx[p])]
        profile = cfg.profiles[stage.value]
        patient_id = f"s{p:03d}"
        for r in range(cfg.rois_per_patient):
            roi_id = f"{patient_id}_r{r}"
            rng = np.random.default_rng(children[1 + p * cfg.rois_per_patient + r])
            roi, planted = _generate_roi(
                roi_id, patient_id, regions[r % len(regions)], stage, profile, cfg, rng
            )
            rois.append(roi)
            truth_rois[roi_id] = planted

    truth = {
        "kind": "default",
        "planted_feature": None,
        "config": cfg.to_dict(),
        "rois": truth_rois,
    }
    return rois, truth


PLANTED_KINDS = ("topology_only", "feature_only")

#: Mixing levels for the topology cohort, one per stage.
PLANTED_MIXING = (0.05, 0.5, 0.95)
#: Treg clump rates for the topology cohort, one per stage.
PLANTED_TREG_RATES = (0.0, 2.0, 5.0)
#: CD4:CD8 budget ratios for the feature cohort, one per stage; with the
#: default combined T budget these give (helper, cytotoxic) counts of
#: (16, 176), (48, 144) and (96, 96).
PLANTED_T_RATIOS = (1.0 / 11.0, 1.0 / 3.0, 1.0)


def planted_signal_cohort(kind: str, cfg: SynthConfig) -> tuple[list[RoIRecord], dict]:
    """A cohort whose class signal lives in a controlled subspace.

    ``topology_only`` varies the spatial arrangement (immune mixing and
    Treg clumping) while cell counts, expression levels and noise stay
    identical across classes, so per-cell feature marginals match and a
    topology-blind model is at chance. ``feature_only`` keeps the
    arrangement fixed and starves the helper budget while the cytotoxic
    budget absorbs the difference, leaving the combined T budget and all
    placement rules untouched. The helper-to-cytotoxic density ratio
    feels the contrast on both sides (numerator falling, denominator
    rising) and is recorded as the planted feature; single-sided
    relatives such as the helper fraction shift less, and the inverse
    ratio is muted because helper cells are absent from most tiles of
    the starved classes, where its divide-by-zero guard returns zero
    regardless of class.
    """
    if kind not in PLANTED_KINDS:
        raise ValidationError(f"unknown planted cohort kind {kind!r}; use one of {PLANTED_KINDS}")
    lam = dict(DEFAULT_LAMBDA)
    if kind == "topology_only":
        knobs = [
            {"mixing": PLANTED_MIXING[i], "treg_cluster_rate": PLANTED_TREG_RATES[i],
             "cd4_cd8_ratio": 1.0}
            for i in range(len(STAGES))
        ]
        planted_feature = None
    else:
        knobs = [
            {"mixing": 0.5, "treg_cluster_rate": 0.0, "cd4_cd8_ratio": PLANTED_T_RATIOS[i]}
            for i in range(len(STAGES))
        ]
        planted_feature = "density_ratio__thelper_tcytotoxic"
    profiles = {
        stage.value: ClassProfile(lam=dict(lam), **knobs[i])
        for i, stage in enumerate(STAGES)
    }

    cfg = SynthConfig.from_dict({**cfg.to_dict(), "profiles": profiles})
    rois, truth = generate_cohort(cfg)
    truth["kind"] = kind
    truth["planted_feature"] = planted_feature
    return rois, truth


def write_cells_csv(rois: list[RoIRecord], path: str | Path) -> None:
    """Cell table in the layout the ingest parser consumes; labels live in the RoI table."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi_id", "cell_id", "x", "y", "area", "solidity", *MARKERS])
        for roi in rois:
            for c in roi.cells:
                writer.writerow(
                    [roi.roi_id, c.cell_id, repr(c.x), repr(c.y), repr(c.area),
                     repr(c.solidity), *[repr(float(v)) for v in c.expr]]
                )


def write_rois_csv(rois: list[RoIRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi_id", "patient_id", "region", "stage", "width", "height"])
        for roi in rois:
            writer.writerow(
                [roi.roi_id, roi.patient_id, roi.region.value, roi.stage.value,
                 roi.width, roi.height]
            )


def write_truth_json(truth: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(truth, indent=2) + "\n")
