import csv
import json

import numpy as np
import pytest

from tmegraph.cli import main
from tmegraph.dataset import TILE_FEATURE_DIM, sample_from_jsonable
from tmegraph.metrics import N_METRICS


def run(*argv) -> int:
    return main([str(a) for a in argv])


LAM = {"THelper": 48.0, "TCytotoxic": 48.0, "BCell": 48.0, "TReg": 48.0, "Epithelial": 48.0}

SYNTH_CFG = {
    "n_patients": 6,
    "rois_per_patient": 1,
    "rng_seed": 11,
    "profiles": {
        "pT1": {"mixing": 0.1, "treg_cluster_rate": 0.5, "cd4_cd8_ratio": 1.0, "lam": LAM},
        "pT2": {"mixing": 0.5, "treg_cluster_rate": 1.0, "cd4_cd8_ratio": 1.0, "lam": LAM},
        "pT3": {"mixing": 0.9, "treg_cluster_rate": 2.0, "cd4_cd8_ratio": 1.0, "lam": LAM},
    },
}
BUILD_CFG = {"n_tiles": 12}
TRAIN_CFG = {
    "model": {
        "max_epochs": 2, "augment_copies": 1, "batch_size": 8, "patience": 2,
        "dropout": 0.1, "lr": 0.01, "encoder_mode": "frozen",
    },
    "split": {"test_fraction": 0.34, "val_fraction": 0},
}
EXPLAIN_CFG = {"ig": {"n_points": 4}, "mask": {"epochs": 8}}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """The full command chain run twice into sibling trees."""
    root = tmp_path_factory.mktemp("cli")
    configs = {
        "synth.json": SYNTH_CFG,
        "build.json": BUILD_CFG,
        "train.json": TRAIN_CFG,
        "explain.json": EXPLAIN_CFG,
    }
    for name, doc in configs.items():
        (root / name).write_text(json.dumps(doc))
    for leg in ("a", "b"):
        base = root / leg
        assert run("synth", "--config", root / "synth.json", "--out", base / "cohort") == 0
        assert run(
            "build", base / "cohort" / "cells.csv", "--config", root / "build.json",
            "--seed", 1, "--out", base / "built",
        ) == 0
        assert run(
            "train", base / "built", "--config", root / "train.json",
            "--model", "gcn-mean", "--seed", 3, "--out", base / "train",
        ) == 0
        assert run(
            "evaluate", base / "train" / "checkpoint.json", base / "built",
            "--split", base / "train" / "split.json", "--out", base / "eval",
        ) == 0
        assert run(
            "explain", base / "train" / "checkpoint.json", base / "built",
            "--split", base / "train" / "split.json", "--config", root / "explain.json",
            "--top-k", 3, "--out", base / "explain",
        ) == 0
    return root


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- synth -----------------------------------------------------------------


def test_synth_outputs_match_manifest(pipeline):
    out = pipeline / "a" / "cohort"
    manifest = json.loads((out / "manifest_synth.json").read_text())
    cells = read_rows(out / "cells.csv")
    rois = read_rows(out / "rois.csv")
    assert len(cells) - 1 == manifest["outputs"]["cells.csv"]["rows"]
    assert len(rois) - 1 == manifest["outputs"]["rois.csv"]["rows"] == 6
    truth = json.loads((out / "truth.json").read_text())
    assert len(truth["rois"]) == 6
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 11


def test_synth_rejects_invalid_priors(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"class_priors": [0.5, 0.5, 0.5]}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "out") == 1
    assert "priors" in capsys.readouterr().err


def test_synth_rejects_malformed_config(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text("not json at all")
    assert run("synth", "--config", cfg, "--out", tmp_path / "out") == 1
    assert "invalid JSON" in capsys.readouterr().err


# -- build -----------------------------------------------------------------


def test_build_bundle_per_roi(pipeline):
    built = pipeline / "a" / "built"
    bundles = sorted((built / "graphs").glob("*.json"))
    assert len(bundles) == 6
    sample = sample_from_jsonable(json.loads(bundles[0].read_text()))
    sample.validate()
    assert sample.n_tiles == 12
    assert sample.tile_graph.feature_dim == TILE_FEATURE_DIM


def test_build_metrics_csv_shape(pipeline):
    rows = read_rows(pipeline / "a" / "built" / "metrics.csv")
    assert rows[0][:2] == ["roi_id", "tile_id"]
    assert len(rows[0]) == 2 + N_METRICS
    assert len(rows) - 1 == 6 * 12
    values = np.array([r[2:] for r in rows[1:]], dtype=np.float64)
    assert np.all(np.isfinite(values))


def test_build_missing_cells_file(tmp_path, capsys):
    assert run("build", tmp_path / "ghost.csv", "--out", tmp_path / "out") == 1
    assert "not found" in capsys.readouterr().err


def test_build_rejects_unknown_config_key(pipeline, tmp_path, capsys):
    cfg = tmp_path / "build.json"
    cfg.write_text(json.dumps({"n_tiles": 4, "bogus": 1}))
    cells = pipeline / "a" / "cohort" / "cells.csv"
    assert run("build", cells, "--config", cfg, "--out", tmp_path / "out") == 1
    assert "bogus" in capsys.readouterr().err


# -- train -----------------------------------------------------------------


def test_train_outputs(pipeline):
    out = pipeline / "a" / "train"
    for name in ("checkpoint.json", "split.json", "training_log.json",
                 "report.json", "predictions.csv", "manifest_train.json"):
        assert (out / name).is_file()
    report = json.loads((out / "report.json").read_text())
    assert "All" in report
    assert report["All"]["n"] == 2
    assert 0.0 <= report["All"]["weighted_f1"] <= 1.0
    log = json.loads((out / "training_log.json").read_text())
    assert log["model"] == "gcn-mean"
    assert len(log["epochs"]) >= 1
    split = json.loads((out / "split.json").read_text())
    assert len(split["test_rois"]) == 2
    assert not set(split["test_rois"]) & set(split["train_rois"])


def test_train_rejects_unknown_config_section(tmp_path, capsys):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"bogus": {}}))
    assert run("train", tmp_path / "nowhere", "--config", cfg, "--out", tmp_path / "out") == 1
    assert "bogus" in capsys.readouterr().err


def test_train_rejects_unknown_model():
    with pytest.raises(SystemExit) as exc:
        run("train", "somewhere", "--model", "resnet", "--out", "out")
    assert exc.value.code == 2


# -- evaluate --------------------------------------------------------------


def test_evaluate_report(pipeline):
    out = pipeline / "a" / "eval"
    report = json.loads((out / "report.json").read_text())
    train_report = json.loads((pipeline / "a" / "train" / "report.json").read_text())
    assert report == train_report
    rows = read_rows(out / "predictions.csv")
    assert rows[0][:4] == ["roi_id", "region", "true_stage", "predicted_stage"]
    assert len(rows) - 1 == 2


def test_evaluate_region_filter(pipeline, tmp_path):
    base = pipeline / "a"
    rc = run(
        "evaluate", base / "train" / "checkpoint.json", base / "built",
        "--split", base / "train" / "split.json", "--region", "Centre",
        "--out", tmp_path / "centre",
    )
    assert rc == 0
    report = json.loads((tmp_path / "centre" / "report.json").read_text())
    assert set(report) == {"All", "Centre"}


def test_evaluate_unknown_region(pipeline, tmp_path, capsys):
    base = pipeline / "a"
    rc = run(
        "evaluate", base / "train" / "checkpoint.json", base / "built",
        "--region", "Edge", "--out", tmp_path / "out",
    )
    assert rc == 1
    assert "unknown region" in capsys.readouterr().err


def test_evaluate_rejects_tampered_checkpoint(pipeline, tmp_path, capsys):
    base = pipeline / "a"
    doc = json.loads((base / "train" / "checkpoint.json").read_text())
    doc["model"] = "mlp"  # parameters no longer match the declared variant
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert run("evaluate", bad, base / "built", "--out", tmp_path / "out") == 1
    assert capsys.readouterr().err


# -- explain ---------------------------------------------------------------


def test_explain_covers_every_test_roi(pipeline):
    base = pipeline / "a"
    split = json.loads((base / "train" / "split.json").read_text())
    rows = read_rows(base / "explain" / "attributions.csv")
    assert rows[0] == ["roi_id", "tile_id", "node_ig", "rank", "completeness_gap"]
    seen = {r[0] for r in rows[1:]}
    assert seen == set(split["test_rois"])
    gaps = np.array([r[4] for r in rows[1:]], dtype=np.float64)
    assert np.all(np.isfinite(gaps))
    for roi in seen:
        ranks = [int(r[3]) for r in rows[1:] if r[0] == roi]
        assert sorted(ranks) == list(range(1, 13))


def test_explain_feature_importance_shape(pipeline):
    rows = read_rows(pipeline / "a" / "explain" / "feature_importance.csv")
    assert rows[0] == ["feature_name", "mean_mask", "rank"]
    assert len(rows) - 1 == TILE_FEATURE_DIM
    assert [int(r[2]) for r in rows[1:]] == list(range(1, TILE_FEATURE_DIM + 1))
    masks = np.array([r[1] for r in rows[1:]], dtype=np.float64)
    assert np.all((masks >= 0.0) & (masks <= 1.0))


def test_explain_top_k_listing(pipeline):
    rows = read_rows(pipeline / "a" / "explain" / "top_tiles.csv")
    by_roi = {}
    for r in rows[1:]:
        by_roi.setdefault(r[0], []).append(int(r[3]))
    assert all(ranks == [1, 2, 3] for ranks in by_roi.values())


def test_explain_edge_attributions_reference_tiles(pipeline):
    base = pipeline / "a"
    rows = read_rows(base / "explain" / "edge_attributions.csv")
    assert rows[0] == ["roi_id", "u", "v", "edge_ig"]
    bundle = json.loads(next((base / "built" / "graphs").glob("*.json")).read_text())
    tile_ids = set(bundle["tile_ids"])
    for r in rows[1:]:
        assert r[1] in tile_ids and r[2] in tile_ids
        float(r[3])


def test_explain_rejects_unknown_mask_key(pipeline, tmp_path, capsys):
    base = pipeline / "a"
    cfg = tmp_path / "explain.json"
    cfg.write_text(json.dumps({"mask": {"momentum": 0.9}}))
    rc = run(
        "explain", base / "train" / "checkpoint.json", base / "built",
        "--config", cfg, "--out", tmp_path / "out",
    )
    assert rc == 1
    assert "momentum" in capsys.readouterr().err


# -- reproducibility -------------------------------------------------------


def test_pipeline_outputs_byte_identical(pipeline):
    a_files = sorted(
        p.relative_to(pipeline / "a")
        for p in (pipeline / "a").rglob("*")
        if p.is_file() and not p.name.startswith("manifest_")
    )
    b_files = sorted(
        p.relative_to(pipeline / "b")
        for p in (pipeline / "b").rglob("*")
        if p.is_file() and not p.name.startswith("manifest_")
    )
    assert a_files == b_files
    for rel in a_files:
        assert (pipeline / "a" / rel).read_bytes() == (pipeline / "b" / rel).read_bytes(), rel


def test_manifest_embeds_resolved_config(pipeline):
    manifest = json.loads((pipeline / "a" / "train" / "manifest_train.json").read_text())
    assert manifest["config"]["model_name"] == "gcn-mean"
    assert manifest["config"]["model"]["max_epochs"] == 2
    assert manifest["config"]["split"]["val_fraction"] == 0
    assert manifest["versions"]["metric_catalog"] == "tme68-v1"
    assert manifest["wall_time_s"] >= 0.0


def test_parallel_build_matches_serial(pipeline, tmp_path, monkeypatch):
    cells = pipeline / "a" / "cohort" / "cells.csv"
    cfg = tmp_path / "build.json"
    cfg.write_text(json.dumps({"n_tiles": 4}))
    monkeypatch.delenv("TMEGRAPH_WORKERS", raising=False)
    assert run("build", cells, "--config", cfg, "--seed", 2, "--out", tmp_path / "serial") == 0
    monkeypatch.setenv("TMEGRAPH_WORKERS", "2")
    assert run("build", cells, "--config", cfg, "--seed", 2, "--out", tmp_path / "par") == 0
    serial = (tmp_path / "serial" / "metrics.csv").read_bytes()
    par = (tmp_path / "par" / "metrics.csv").read_bytes()
    assert serial == par
    for f in sorted((tmp_path / "serial" / "graphs").glob("*.json")):
        assert f.read_bytes() == (tmp_path / "par" / "graphs" / f.name).read_bytes()
