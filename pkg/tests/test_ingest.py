import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmegraph.errors import ParseError, SchemaError, ValidationError
from tmegraph.ingest import (
    MARKERS,
    Phenotype,
    Region,
    RoIRecord,
    Stage,
    CellRecord,
    parse_cell_table,
    parse_roi_table,
    percentile_ranks,
    phenotype_cells,
    phenotype_cohort,
    sample_tiles,
)
from oracles import brute_percentile_ranks

HEADER = "roi_id,patient_id,region,stage,x,y,area,solidity,cd4,cd8,cd20,foxp3,ck\n"


def write_cells(tmp_path, rows, header=HEADER, name="cells.csv"):
    path = tmp_path / name
    path.write_text(header + "".join(rows))
    return path


def test_parse_groups_by_roi_in_first_appearance_order(tmp_path):
    rows = [
        "r2,p1,Centre,pT1,10,20,55,0.9,1,2,3,4,5\n",
        "r1,p2,Front,pT3,1,2,60,0.8,5,4,3,2,1\n",
        "r2,p1,Centre,pT1,30,40,45,0.7,2,2,2,2,2\n",
    ]
    rois = parse_cell_table(write_cells(tmp_path, rows))
    assert [r.roi_id for r in rois] == ["r2", "r1"]
    assert [len(r.cells) for r in rois] == [2, 1]
    first = rois[0]
    assert first.patient_id == "p1"
    assert first.region is Region.Centre
    assert first.stage is Stage.pT1
    assert first.cells[0].x == 10 and first.cells[1].x == 30
    np.testing.assert_array_equal(first.cells[0].expr, [1, 2, 3, 4, 5])


def test_parse_missing_column_raises_schema_error(tmp_path):
    path = write_cells(
        tmp_path,
        ["r1,p1,Centre,pT1,1,2,50,0.9,1,1,1,1\n"],
        header="roi_id,patient_id,region,stage,x,y,area,solidity,cd4,cd8,cd20,foxp3\n",
    )
    with pytest.raises(SchemaError, match="ck"):
        parse_cell_table(path)


def test_parse_non_numeric_cell_reports_row_number(tmp_path):
    rows = [
        "r1,p1,Centre,pT1,1,2,50,0.9,1,1,1,1,1\n",
        "r1,p1,Centre,pT1,1,oops,50,0.9,1,1,1,1,1\n",
    ]
    with pytest.raises(ParseError, match="row 3"):
        parse_cell_table(write_cells(tmp_path, rows))


def test_parse_out_of_bounds_coordinate(tmp_path):
    rows = ["r1,p1,Centre,pT1,2048,0,50,0.9,1,1,1,1,1\n"]
    with pytest.raises(ValidationError, match="2048"):
        parse_cell_table(write_cells(tmp_path, rows))


def test_parse_bad_stage_value(tmp_path):
    rows = ["r1,p1,Centre,pT9,1,2,50,0.9,1,1,1,1,1\n"]
    with pytest.raises(ValidationError, match="pT9"):
        parse_cell_table(write_cells(tmp_path, rows))


def test_schema_mapping_renames_columns(tmp_path):
    header = "roi,pat,reg,st,cx,cy,area,solidity,cd4,cd8,cd20,foxp3,ck\n"
    rows = ["r1,p1,Stroma,pT2,5,6,50,0.9,1,1,1,1,1\n"]
    schema = {"roi_id": "roi", "patient_id": "pat", "region": "reg", "stage": "st", "x": "cx", "y": "cy"}
    rois = parse_cell_table(write_cells(tmp_path, rows, header=header), schema=schema)
    assert rois[0].region is Region.Stroma
    assert rois[0].cells[0].y == 6


def test_labels_from_roi_table(tmp_path):
    roi_csv = tmp_path / "rois.csv"
    roi_csv.write_text(
        "roi_id,patient_id,region,stage,width,height\n"
        "r1,p7,Mucosa,pT2,1024,1024\n"
    )
    table = parse_roi_table(roi_csv)
    assert table["r1"]["width"] == 1024

    path = write_cells(
        tmp_path,
        ["r1,3,4,50,0.9,1,1,1,1,1\n"],
        header="roi_id,x,y,area,solidity,cd4,cd8,cd20,foxp3,ck\n",
    )
    rois = parse_cell_table(path, roi_table=table)
    assert rois[0].patient_id == "p7"
    assert rois[0].stage is Stage.pT2
    assert rois[0].width == 1024

    # without the table the label columns are genuinely required
    with pytest.raises(SchemaError):
        parse_cell_table(path)


@given(
    st.lists(
        st.floats(min_value=-100, max_value=100, allow_nan=False) | st.integers(-5, 5),
        min_size=1,
        max_size=40,
    )
)
@settings(max_examples=100, deadline=None)
def test_percentile_ranks_match_counting_oracle(values):
    got = percentile_ranks(np.array(values, dtype=np.float64))
    want = brute_percentile_ranks([float(v) for v in values])
    np.testing.assert_allclose(got, want, atol=1e-12)
    assert got.max() <= 1.0 and got.min() > 0.0


def make_cell(i, expr):
    return CellRecord(cell_id=f"c{i}", x=1.0, y=1.0, area=50.0, solidity=0.9,
                      expr=np.array(expr, dtype=np.float64))


def test_phenotype_dominant_marker_wins():
    # cell i is loud on marker i only; every cell should get marker i's type
    cells = [make_cell(i, [5.0 if j == i else 0.1 for j in range(5)]) for i in range(5)]
    typed = phenotype_cells(cells)
    expected = [Phenotype.THelper, Phenotype.TCytotoxic, Phenotype.BCell,
                Phenotype.TReg, Phenotype.Epithelial]
    assert [c.phenotype for c in typed] == expected
    assert all(c.phenotype is None for c in cells)  # inputs untouched


def test_phenotype_full_tie_resolves_to_epithelial():
    # identical expression in every marker column: all ranks tie, CK wins
    cells = [make_cell(i, [1.0] * 5) for i in range(4)]
    assert all(c.phenotype is Phenotype.Epithelial for c in phenotype_cells(cells))


def test_phenotype_partial_tie_follows_precedence():
    # two cells, cd4 and cd20 columns identical across cells (rank ties),
    # ck/cd8/foxp3 strictly lower rank for cell 0: cd4 beats cd20
    cells = [
        make_cell(0, [2.0, 0.1, 2.0, 0.1, 0.1]),
        make_cell(1, [2.0, 5.0, 2.0, 5.0, 5.0]),
    ]
    typed = phenotype_cells(cells)
    assert typed[0].phenotype is Phenotype.THelper


def test_phenotype_uses_rank_not_raw_magnitude():
    # cd4 values are tiny in absolute terms but cell 0 tops the cd4 ranking;
    # ck is huge everywhere so its ranks split the cohort evenly
    cells = [
        make_cell(0, [0.9, 0.0, 0.0, 0.0, 100.0]),
        make_cell(1, [0.1, 0.0, 0.0, 0.0, 200.0]),
    ]
    typed = phenotype_cells(cells)
    # cell 0: cd4 rank 1.0 beats ck rank 0.5
    assert typed[0].phenotype is Phenotype.THelper
    assert typed[1].phenotype is Phenotype.Epithelial


def test_phenotype_cohort_spans_rois():
    roi_a = RoIRecord(roi_id="a", patient_id="p1", region=Region.Centre, stage=Stage.pT1,
                      cells=[make_cell(0, [1, 0, 0, 0, 0.5])])
    roi_b = RoIRecord(roi_id="b", patient_id="p2", region=Region.Front, stage=Stage.pT2,
                      cells=[make_cell(1, [2, 0, 0, 0, 0.4])])
    out = phenotype_cohort([roi_a, roi_b])
    assert [r.roi_id for r in out] == ["a", "b"]
    assert out[0].cells[0].phenotype is not None
    assert len(out[0].cells) == 1 and len(out[1].cells) == 1


def test_empty_phenotype_input_rejected():
    with pytest.raises(ValidationError):
        phenotype_cells([])


def test_sample_tiles_bounds_and_determinism():
    roi = RoIRecord(roi_id="r", patient_id="p", region=Region.Centre, stage=Stage.pT1)
    tiles = sample_tiles(roi, n=200, tile_size=256, rng_seed=7)
    assert len(tiles) == 200
    assert len({t.tile_id for t in tiles}) == 200
    for t in tiles:
        assert 0 <= t.origin_x <= 2048 - 256
        assert 0 <= t.origin_y <= 2048 - 256
    again = sample_tiles(roi, n=200, tile_size=256, rng_seed=7)
    assert [(t.origin_x, t.origin_y) for t in tiles] == [(t.origin_x, t.origin_y) for t in again]
    other = sample_tiles(roi, n=200, tile_size=256, rng_seed=8)
    assert [(t.origin_x, t.origin_y) for t in tiles] != [(t.origin_x, t.origin_y) for t in other]


def test_sample_tiles_rejects_oversize_tile():
    roi = RoIRecord(roi_id="r", patient_id="p", region=Region.Centre, stage=Stage.pT1,
                    width=200, height=200)
    with pytest.raises(ValidationError):
        sample_tiles(roi, n=1, tile_size=256, rng_seed=0)


def test_tile_contains_half_open():
    tiles = sample_tiles(
        RoIRecord(roi_id="r", patient_id="p", region=Region.Centre, stage=Stage.pT1),
        n=1, tile_size=256, rng_seed=3,
    )
    t = tiles[0]
    assert t.contains(t.origin_x, t.origin_y)
    assert not t.contains(t.origin_x + 256, t.origin_y)
    cx, cy = t.centroid
    assert cx == t.origin_x + 128 and cy == t.origin_y + 128


def test_cell_record_validation():
    with pytest.raises(ValidationError):
        make_cell(0, [1, 1, 1, 1, 1]).__class__(
            cell_id="bad", x=0, y=0, area=-1.0, solidity=0.5,
            expr=np.ones(5),
        ).validate()
    with pytest.raises(ValidationError):
        CellRecord(cell_id="bad", x=0, y=0, area=10.0, solidity=1.5, expr=np.ones(5)).validate()
    with pytest.raises(ValidationError):
        CellRecord(cell_id="bad", x=0, y=0, area=10.0, solidity=0.5, expr=-np.ones(5)).validate()
