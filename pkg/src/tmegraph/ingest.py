"""Cell-table ingestion, marker-rank phenotyping, and tile sampling.

The package boundary is a delimited cell table (one row per segmented
nucleus) plus an optional region-of-interest label table. Upstream image
processing (shading correction, segmentation) is out of scope.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ParseError, SchemaError, ValidationError

# Marker order used everywhere an expression vector appears.
MARKERS = ("cd4", "cd8", "cd20", "foxp3", "ck")


class Phenotype(enum.Enum):
    THelper = "THelper"
    TCytotoxic = "TCytotoxic"
    BCell = "BCell"
    TReg = "TReg"
    Epithelial = "Epithelial"


#: Phenotype assigned when the corresponding marker wins the rank vote.
PHENOTYPE_FOR_MARKER = {
    "cd4": Phenotype.THelper,
    "cd8": Phenotype.TCytotoxic,
    "cd20": Phenotype.BCell,
    "foxp3": Phenotype.TReg,
    "ck": Phenotype.Epithelial,
}

#: Fixed precedence for breaking rank ties: CK > CD8 > CD4 > CD20 > FoxP3.
TIE_PRECEDENCE = ("ck", "cd8", "cd4", "cd20", "foxp3")

IMMUNE_PHENOTYPES = (
    Phenotype.THelper,
    Phenotype.TCytotoxic,
    Phenotype.BCell,
    Phenotype.TReg,
)

ALL_PHENOTYPES = IMMUNE_PHENOTYPES + (Phenotype.Epithelial,)


class Region(enum.Enum):
    Centre = "Centre"
    Front = "Front"
    Mucosa = "Mucosa"
    Stroma = "Stroma"


class Stage(enum.Enum):
    pT1 = "pT1"
    pT2 = "pT2"
    pT3 = "pT3"


STAGE_INDEX = {s: i for i, s in enumerate(Stage)}


@dataclass
class CellRecord:
    """One segmented nucleus with position, morphology, and marker means."""

    cell_id: str
    x: float
    y: float
    area: float
    solidity: float
    expr: np.ndarray  # length-5 mean nuclear expression, MARKERS order
    phenotype: Phenotype | None = None

    def validate(self) -> None:
        if not (self.area > 0):
            raise ValidationError(f"cell {self.cell_id}: area must be > 0")
        if not (0.0 <= self.solidity <= 1.0):
            raise ValidationError(f"cell {self.cell_id}: solidity outside [0, 1]")
        if len(self.expr) != len(MARKERS):
            raise ValidationError(f"cell {self.cell_id}: expected {len(MARKERS)} expressions")
        if np.any(np.asarray(self.expr) < 0):
            raise ValidationError(f"cell {self.cell_id}: negative expression")


@dataclass
class RoIRecord:
    """A labeled region of interest and the cells segmented inside it."""

    roi_id: str
    patient_id: str
    region: Region
    stage: Stage
    width: int = 2048
    height: int = 2048
    cells: list[CellRecord] = field(default_factory=list)

    def validate(self) -> None:
        for c in self.cells:
            c.validate()
            if not (0 <= c.x < self.width and 0 <= c.y < self.height):
                raise ValidationError(
                    f"roi {self.roi_id}: cell {c.cell_id} at ({c.x}, {c.y}) "
                    f"outside [0, {self.width}) x [0, {self.height})"
                )


@dataclass
class TileSpec:
    """A square tile placed inside a region of interest."""

    tile_id: str
    origin_x: int
    origin_y: int
    size: int

    @property
    def centroid(self) -> tuple[float, float]:
        return (self.origin_x + self.size / 2.0, self.origin_y + self.size / 2.0)

    def contains(self, x: float, y: float) -> bool:
        return (
            self.origin_x <= x < self.origin_x + self.size
            and self.origin_y <= y < self.origin_y + self.size
        )


REQUIRED_COLUMNS = (
    "roi_id", "patient_id", "region", "stage",
    "x", "y", "area", "solidity", "cd4", "cd8", "cd20", "foxp3", "ck",
)

#: Columns that may instead be supplied through a separate RoI label table.
LABEL_COLUMNS = ("patient_id", "region", "stage")


def _float_field(raw: str, column: str, row_number: int) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ParseError(f"non-numeric value {raw!r} in column {column!r}", row=row_number) from None


def parse_roi_table(path: str | Path) -> dict[str, dict]:
    """Read an RoI label table: roi_id, patient_id, region, stage[, width, height]."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(f"{path}: empty file, expected a header row")
        for col in ("roi_id", "patient_id", "region", "stage"):
            if col not in reader.fieldnames:
                raise SchemaError(f"{path}: missing required column {col!r}")
        info: dict[str, dict] = {}
        for i, row in enumerate(reader, start=2):
            entry = {
                "patient_id": row["patient_id"],
                "region": _parse_enum(Region, row["region"], i),
                "stage": _parse_enum(Stage, row["stage"], i),
            }
            for dim in ("width", "height"):
                if dim in row and row[dim] not in (None, ""):
                    entry[dim] = int(_float_field(row[dim], dim, i))
            info[row["roi_id"]] = entry
    return info


def _parse_enum(kind, raw: str, row_number: int):
    try:
        return kind(raw)
    except ValueError:
        valid = ", ".join(m.value for m in kind)
        raise ValidationError(
            f"row {row_number}: {raw!r} is not one of {valid}"
        ) from None


def parse_cell_table(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    roi_table: Mapping[str, dict] | None = None,
    default_width: int = 2048,
    default_height: int = 2048,
) -> list[RoIRecord]:
    """Parse a delimited cell table into one RoIRecord per distinct roi_id.

    Parameters
    ----------
    path
        CSV file with a named-column header. Required columns are listed in
        ``REQUIRED_COLUMNS``; ``patient_id``/``region``/``stage`` may be
        omitted when ``roi_table`` supplies them.
    schema
        Optional map from required logical names to the actual column names
        in the file.
    roi_table
        Output of :func:`parse_roi_table`; provides labels and per-RoI sizes.

    Rows are grouped by roi_id in order of first appearance; row order is
    preserved within each RoI. Raises SchemaError for missing columns,
    ParseError (with row number) for non-numeric cells, and ValidationError
    for out-of-bounds coordinates or bad label values.
    """
    path = Path(path)
    schema = dict(schema or {})
    colname = {logical: schema.get(logical, logical) for logical in REQUIRED_COLUMNS}

    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(f"{path}: empty file, expected a header row")
        header = set(reader.fieldnames)
        for logical in REQUIRED_COLUMNS:
            if colname[logical] in header:
                continue
            if logical in LABEL_COLUMNS and roi_table is not None:
                continue  # label comes from the RoI table instead
            raise SchemaError(f"{path}: missing required column {colname[logical]!r}")

        rois: dict[str, RoIRecord] = {}
        counter: dict[str, int] = {}
        for i, row in enumerate(reader, start=2):
            roi_id = row[colname["roi_id"]]
            if roi_id not in rois:
                rois[roi_id] = _new_roi(
                    roi_id, row, colname, header, roi_table, default_width, default_height, i
                )
                counter[roi_id] = 0
            roi = rois[roi_id]

            idx = counter[roi_id]
            counter[roi_id] += 1
            cell_col = schema.get("cell_id", "cell_id")
            cell_id = row[cell_col] if cell_col in header else f"{roi_id}_c{idx:05d}"
            expr = np.array(
                [_float_field(row[colname[m]], colname[m], i) for m in MARKERS], dtype=np.float64
            )
            cell = CellRecord(
                cell_id=cell_id,
                x=_float_field(row[colname["x"]], colname["x"], i),
                y=_float_field(row[colname["y"]], colname["y"], i),
                area=_float_field(row[colname["area"]], colname["area"], i),
                solidity=_float_field(row[colname["solidity"]], colname["solidity"], i),
                expr=expr,
            )
            cell.validate()
            if not (0 <= cell.x < roi.width and 0 <= cell.y < roi.height):
                raise ValidationError(
                    f"row {i}: coordinate ({cell.x}, {cell.y}) outside "
                    f"[0, {roi.width}) x [0, {roi.height}) for roi {roi_id}"
                )
            roi.cells.append(cell)

    return list(rois.values())


def _new_roi(roi_id, row, colname, header, roi_table, default_width, default_height, row_number):
    info = (roi_table or {}).get(roi_id, {})
    if colname["patient_id"] in header:
        patient_id = row[colname["patient_id"]]
    else:
        patient_id = info["patient_id"]
    if colname["region"] in header:
        region = _parse_enum(Region, row[colname["region"]], row_number)
    else:
        region = info["region"]
    if colname["stage"] in header:
        stage = _parse_enum(Stage, row[colname["stage"]], row_number)
    else:
        stage = info["stage"]
    return RoIRecord(
        roi_id=roi_id,
        patient_id=patient_id,
        region=region,
        stage=stage,
        width=int(info.get("width", default_width)),
        height=int(info.get("height", default_height)),
    )


def percentile_ranks(values: np.ndarray) -> np.ndarray:
    """Fractional percentile rank in (0, 1], mean rank for ties."""
    values = np.asarray(values, dtype=np.float64)
    return rankdata(values, method="average") / values.size


def phenotype_cells(cells: Sequence[CellRecord]) -> list[CellRecord]:
    """Assign each cell the phenotype of its highest-percentile-rank marker.

    Ranks are computed per marker over the full scope given here (pass the
    whole cohort's cells for cohort-level normalization). Rank ties between
    markers are broken by the fixed precedence CK > CD8 > CD4 > CD20 > FoxP3.
    Returns new records in input order; does not mutate the inputs.
    """
    if len(cells) == 0:
        raise ValidationError("phenotype_cells: empty input")
    expr = np.stack([np.asarray(c.expr, dtype=np.float64) for c in cells])
    ranks = np.column_stack([percentile_ranks(expr[:, j]) for j in range(len(MARKERS))])

    # argmax over markers in precedence order so the first maximal entry wins
    prec_idx = [MARKERS.index(m) for m in TIE_PRECEDENCE]
    winner_in_prec = np.argmax(ranks[:, prec_idx], axis=1)
    winners = [TIE_PRECEDENCE[w] for w in winner_in_prec]
    return [replace(c, phenotype=PHENOTYPE_FOR_MARKER[m]) for c, m in zip(cells, winners)]


def phenotype_cohort(rois: Iterable[RoIRecord]) -> list[RoIRecord]:
    """Phenotype every cell across the given RoIs in one cohort-wide scope."""
    rois = list(rois)
    flat = [c for roi in rois for c in roi.cells]
    if not flat:
        return rois
    typed = phenotype_cells(flat)
    out = []
    pos = 0
    for roi in rois:
        n = len(roi.cells)
        out.append(replace(roi, cells=list(typed[pos : pos + n])))
        pos += n
    return out


def sample_tiles(
    roi: RoIRecord, n: int, tile_size: int, rng_seed: int | np.random.Generator
) -> list[TileSpec]:
    """Sample n square tiles with uniform random integer origins inside the RoI.

    Tiles may overlap (positions are drawn with replacement); the draw is
    deterministic for a given seed.
    """
    if tile_size > min(roi.width, roi.height):
        raise ValidationError(
            f"tile_size {tile_size} exceeds RoI side {min(roi.width, roi.height)}"
        )
    if n < 1:
        raise ValidationError("need at least one tile")
    rng = np.random.default_rng(rng_seed)
    ox = rng.integers(0, roi.width - tile_size + 1, size=n)
    oy = rng.integers(0, roi.height - tile_size + 1, size=n)
    return [
        TileSpec(tile_id=f"t{i:03d}", origin_x=int(x), origin_y=int(y), size=tile_size)
        for i, (x, y) in enumerate(zip(ox, oy))
    ]
