"""Command-line pipeline: synth | build | train | evaluate | explain.

Each command reads an optional JSON config, derives all randomness from a
single seed, and writes its primary outputs plus a run manifest
(``manifest_<command>.json``) into the output directory. Primary outputs
are byte-stable: rerunning with the same inputs, config and seed
reproduces them exactly. Manifests record wall time and are the one
exception.

Exit codes: 0 success, 1 invalid input or config, 2 runtime failure.
``TMEGRAPH_WORKERS`` sets the process count for ``build``, which works
RoI by RoI; per-RoI child seeds keep the output independent of the
worker count.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    SAMPLE_FORMAT,
    SAMPLE_VERSION,
    RoISample,
    SplitPlan,
    build_sample,
    make_split,
    make_test_graph,
    sample_from_jsonable,
    sample_to_jsonable,
)
from .errors import ParseError, SchemaError, TmegraphError, ValidationError
from .explain import (
    ExplainConfig,
    QUADRATURE_METHODS,
    feature_importance_report,
    gnn_explain,
    integrated_gradients,
    rank_tiles,
)
from .ingest import Region, parse_cell_table, parse_roi_table, phenotype_cohort
from .metrics import CATALOG_VERSION, metric_names
from .model import (
    CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
    MODEL_NAMES,
    HierModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .spatial_graph import SERIAL_FORMAT, SERIAL_VERSION
from .synth import SynthConfig, generate_cohort, planted_signal_cohort, write_cells_csv, write_rois_csv, write_truth_json
from .training import evaluate, train

BUILD_DEFAULTS = {"n_tiles": 200, "tile_size": 256, "cell_k": 30.0, "tile_k": 200.0}
SPLIT_DEFAULTS = {"test_fraction": 0.3, "val_fraction": 0.1}
IG_DEFAULTS = {"n_points": 50, "method": "gauss"}


def _canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _ensure_dir(path: str | Path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = _require_file(path, "config file")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{p}: invalid JSON: {e.msg}", offset=e.pos) from None
    if not isinstance(doc, dict):
        raise ValidationError(f"{p}: config must be a JSON object")
    return doc


def _check_keys(doc: dict, allowed, what: str) -> None:
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ValidationError(f"unknown {what} fields: {sorted(unknown)}")


def _load_split(path: str | Path) -> SplitPlan:
    p = _require_file(path, "split file")
    try:
        return SplitPlan.from_dict(json.loads(p.read_text()))
    except json.JSONDecodeError as e:
        raise ParseError(f"{p}: invalid JSON: {e.msg}", offset=e.pos) from None
    except KeyError as e:
        raise SchemaError(f"{p}: missing split field {e}") from None


def _write_manifest(out: Path, command: str, config: dict, seed, inputs: dict,
                    outputs: dict, started: float) -> None:
    doc = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(_canonical_json(config).encode()).hexdigest(),
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "versions": {
            "package": __version__,
            "metric_catalog": CATALOG_VERSION,
            "graph_format": f"{SERIAL_FORMAT}/v{SERIAL_VERSION}",
            "sample_format": f"{SAMPLE_FORMAT}/v{SAMPLE_VERSION}",
            "checkpoint_format": f"{CHECKPOINT_FORMAT}/v{CHECKPOINT_VERSION}",
        },
        "wall_time_s": round(time.time() - started, 3),
    }
    (out / f"manifest_{command}.json").write_text(json.dumps(doc, indent=2) + "\n")


# -- synth -----------------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.time()
    doc = _load_config(args.config)
    kind = doc.pop("kind", "default")
    cfg = SynthConfig.from_dict(doc) if doc else SynthConfig()
    if args.seed is not None:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "rng_seed": args.seed})
    if kind == "default":
        rois, truth = generate_cohort(cfg)
    else:
        rois, truth = planted_signal_cohort(kind, cfg)

    out = _ensure_dir(args.out)
    write_cells_csv(rois, out / "cells.csv")
    write_rois_csv(rois, out / "rois.csv")
    write_truth_json(truth, out / "truth.json")

    n_cells = sum(len(r.cells) for r in rois)
    outputs = {
        "cells.csv": {"rows": n_cells},
        "rois.csv": {"rows": len(rois)},
        "truth.json": {"rois": len(rois)},
    }
    _write_manifest(out, "synth", {"kind": kind, **cfg.to_dict()}, cfg.rng_seed, {}, outputs, started)
    print(f"wrote {len(rois)} RoIs ({n_cells} cells) to {out}")
    return 0


# -- build -----------------------------------------------------------------


def _build_one(payload):
    roi, child_seed, opts = payload
    return build_sample(
        roi, child_seed, n_tiles=opts["n_tiles"], tile_size=opts["tile_size"],
        cell_k=opts["cell_k"], tile_k=opts["tile_k"],
    )


def cmd_build(args) -> int:
    started = time.time()
    doc = _load_config(args.config)
    _check_keys(doc, BUILD_DEFAULTS, "build config")
    opts = {**BUILD_DEFAULTS, **doc}
    seed = args.seed if args.seed is not None else 0

    cells_path = _require_file(args.cells, "cell table")
    if args.rois:
        roi_table = parse_roi_table(_require_file(args.rois, "RoI table"))
    else:
        sibling = cells_path.with_name("rois.csv")
        roi_table = parse_roi_table(sibling) if sibling.is_file() else None
    rois = phenotype_cohort(parse_cell_table(cells_path, roi_table=roi_table))

    children = np.random.SeedSequence(seed).spawn(len(rois))
    payloads = [(roi, child, opts) for roi, child in zip(rois, children)]
    workers = int(os.environ.get("TMEGRAPH_WORKERS", "1"))
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(_build_one, payloads))
    else:
        samples = [_build_one(p) for p in payloads]

    out = _ensure_dir(args.out)
    graphs_dir = _ensure_dir(out / "graphs")
    for s in samples:
        (graphs_dir / f"{s.roi_id}.json").write_text(
            json.dumps(sample_to_jsonable(s), separators=(",", ":"))
        )
    names = metric_names()
    with (out / "metrics.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi_id", "tile_id", *names])
        for s in samples:
            block = s.tile_graph.node_features[:, : len(names)]
            for tile_id, row in zip(s.tile_ids, block):
                writer.writerow([s.roi_id, tile_id, *[repr(float(v)) for v in row]])

    outputs = {
        "graphs": {"bundles": len(samples)},
        "metrics.csv": {"rows": sum(s.n_tiles for s in samples)},
    }
    inputs = {"cells": str(cells_path)}
    if args.rois:
        inputs["rois"] = str(args.rois)
    _write_manifest(out, "build", opts, seed, inputs, outputs, started)
    print(f"built {len(samples)} RoI bundles in {out}")
    return 0


def _load_built(built: str | Path) -> list[RoISample]:
    graphs_dir = Path(built) / "graphs"
    if not graphs_dir.is_dir():
        raise ValidationError(f"{built}: no graphs/ directory; run `build` first")
    files = sorted(graphs_dir.glob("*.json"))
    if not files:
        raise ValidationError(f"{graphs_dir}: no RoI bundles found")
    samples = []
    for f in files:
        try:
            doc = json.loads(f.read_text())
        except json.JSONDecodeError as e:
            raise ParseError(f"{f}: invalid JSON: {e.msg}", offset=e.pos) from None
        samples.append(sample_from_jsonable(doc))
    return samples


# -- train -----------------------------------------------------------------


def cmd_train(args) -> int:
    started = time.time()
    doc = _load_config(args.config)
    _check_keys(doc, ("model", "split"), "train config")
    model_cfg = HierModelConfig.from_dict(doc.get("model", {}))
    split_doc = {**SPLIT_DEFAULTS, **doc.get("split", {})}
    _check_keys(split_doc, SPLIT_DEFAULTS, "split config")
    seed = args.seed if args.seed is not None else 0

    samples = _load_built(args.built)
    if args.split:
        split = _load_split(args.split)
    else:
        split = make_split(
            samples, rng=np.random.default_rng(seed),
            test_fraction=split_doc["test_fraction"], val_fraction=split_doc["val_fraction"],
        )
    split.validate(samples)

    model = build_model(args.model, model_cfg, seed=seed)
    result = train(model, samples, split, seed=seed)

    out = _ensure_dir(args.out)
    save_checkpoint(model, out / "checkpoint.json")
    (out / "split.json").write_text(json.dumps(split.to_dict(), indent=2) + "\n")
    log_doc = {
        "model": args.model,
        "best_epoch": result.best_epoch,
        "best_score": result.best_score,
        "stopped_early": result.stopped_early,
        "class_weights": [float(w) for w in result.class_weights],
        "epochs": result.log,
    }
    (out / "training_log.json").write_text(json.dumps(log_doc, indent=2) + "\n")

    by_id = {s.roi_id: s for s in samples}
    report, predictions = evaluate(model, [by_id[r] for r in split.test_rois])
    _write_report(out, report, predictions, model.config.class_names())

    config = {"model_name": args.model, "model": model.config.to_dict(), "split": split_doc}
    outputs = {
        "checkpoint.json": {},
        "split.json": {"train": len(split.train_rois), "test": len(split.test_rois)},
        "training_log.json": {"epochs": len(result.log)},
        "report.json": {},
        "predictions.csv": {"rows": len(predictions)},
    }
    _write_manifest(out, "train", config, seed, {"built": str(args.built)}, outputs, started)
    print(
        f"{args.model}: best epoch {result.best_epoch}, "
        f"test weighted F1 {report['All']['weighted_f1']:.3f} ({report['All']['n']} RoIs)"
    )
    return 0


def _write_report(out: Path, report: dict, predictions: list[dict], class_names) -> None:
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with (out / "predictions.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["roi_id", "region", "true_stage", "predicted_stage",
             *[f"prob_{n}" for n in class_names]]
        )
        for p in predictions:
            writer.writerow(
                [p["roi_id"], p["region"], p["true_stage"], p["predicted_stage"],
                 *[repr(p[f"prob_{n}"]) for n in class_names]]
            )


# -- evaluate --------------------------------------------------------------


def cmd_evaluate(args) -> int:
    started = time.time()
    model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    samples = _load_built(args.built)
    if args.split:
        split = _load_split(args.split)
        split.validate(samples)
        by_id = {s.roi_id: s for s in samples}
        samples = [by_id[r] for r in split.test_rois]
    if args.region:
        try:
            region = Region(args.region)
        except ValueError:
            valid = ", ".join(r.value for r in Region)
            raise ValidationError(f"unknown region {args.region!r}; use one of {valid}") from None
        samples = [s for s in samples if s.region is region]
        if not samples:
            raise ValidationError(f"no RoIs in region {region.value}")

    report, predictions = evaluate(model, samples)
    out = _ensure_dir(args.out)
    _write_report(out, report, predictions, model.config.class_names())

    inputs = {"checkpoint": str(args.checkpoint), "built": str(args.built)}
    if args.split:
        inputs["split"] = str(args.split)
    config = {"region": args.region}
    outputs = {"report.json": {}, "predictions.csv": {"rows": len(predictions)}}
    _write_manifest(out, "evaluate", config, None, inputs, outputs, started)
    print(f"weighted F1 (All): {report['All']['weighted_f1']:.3f} over {report['All']['n']} RoIs")
    return 0


# -- explain ---------------------------------------------------------------


def cmd_explain(args) -> int:
    started = time.time()
    doc = _load_config(args.config)
    _check_keys(doc, ("ig", "mask"), "explain config")
    ig_doc = {**IG_DEFAULTS, **doc.get("ig", {})}
    _check_keys(ig_doc, IG_DEFAULTS, "integrated-gradients config")
    if ig_doc["method"] not in QUADRATURE_METHODS:
        raise ValidationError(f"quadrature method must be one of {QUADRATURE_METHODS}")
    mask_doc = doc.get("mask", {})
    _check_keys(mask_doc, [f.name for f in dataclass_fields(ExplainConfig)], "mask config")
    mask_cfg = ExplainConfig(**mask_doc)

    model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    samples = _load_built(args.built)
    if args.split:
        split = _load_split(args.split)
        split.validate(samples)
        by_id = {s.roi_id: s for s in samples}
        samples = [by_id[r] for r in split.test_rois]
    samples = [make_test_graph(s, model.config.tile_k_default) for s in samples]

    out = _ensure_dir(args.out)
    attributions = []
    masks = []
    for s in samples:
        attributions.append(
            integrated_gradients(s, model, n_points=ig_doc["n_points"], method=ig_doc["method"])
        )
        masks.append(gnn_explain(s, model, mask_cfg))

    with (out / "attributions.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi_id", "tile_id", "node_ig", "rank", "completeness_gap"])
        for attr in attributions:
            ranked = rank_tiles(attr, top_k=len(attr.tile_ids))
            for rank, (tile_id, score) in enumerate(ranked, start=1):
                writer.writerow(
                    [attr.roi_id, tile_id, repr(score), rank, repr(attr.completeness_gap)]
                )
    with (out / "edge_attributions.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi_id", "u", "v", "edge_ig"])
        for attr in attributions:
            for (u, v), score in zip(attr.edges, attr.edge_ig):
                writer.writerow(
                    [attr.roi_id, attr.tile_ids[u], attr.tile_ids[v], repr(float(score))]
                )
    report = feature_importance_report(masks)
    with (out / "feature_importance.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature_name", "mean_mask", "rank"])
        for row in report:
            writer.writerow([row["feature_name"], repr(row["mean_mask"]), row["rank"]])
    if args.top_k is not None:
        with (out / "top_tiles.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["roi_id", "tile_id", "node_ig", "rank"])
            for attr in attributions:
                for rank, (tile_id, score) in enumerate(rank_tiles(attr, args.top_k), start=1):
                    writer.writerow([attr.roi_id, tile_id, repr(score), rank])

    inputs = {"checkpoint": str(args.checkpoint), "built": str(args.built)}
    if args.split:
        inputs["split"] = str(args.split)
    config = {"ig": ig_doc, "mask": mask_doc, "top_k": args.top_k}
    outputs = {
        "attributions.csv": {"rows": sum(len(a.tile_ids) for a in attributions)},
        "edge_attributions.csv": {"rows": sum(len(a.edge_ig) for a in attributions)},
        "feature_importance.csv": {"rows": len(report)},
    }
    _write_manifest(out, "explain", config, None, inputs, outputs, started)
    gaps = [a.completeness_gap for a in attributions]
    print(
        f"explained {len(samples)} RoIs; completeness gap "
        f"mean {np.mean(gaps):.2e}, max {np.max(gaps):.2e}"
    )
    return 0


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tmegraph",
        description="Two-level spatial graph pipeline for multiplexed immunofluorescence RoIs.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled cohort")
    p.add_argument("--config", help="JSON cohort config; 'kind' may name a planted cohort")
    p.add_argument("--seed", type=int, help="override the config rng seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build", help="cell table to graphs and metrics")
    p.add_argument("cells", help="cell table CSV")
    p.add_argument("--rois", help="RoI label table (default: rois.csv next to the cell table)")
    p.add_argument("--config", help="JSON with n_tiles, tile_size, cell_k, tile_k")
    p.add_argument("--seed", type=int, help="tile sampling seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", help="fit a stage classifier on built RoIs")
    p.add_argument("built", help="directory produced by build")
    p.add_argument("--model", default="gcn-mean", choices=list(MODEL_NAMES))
    p.add_argument("--config", help="JSON with 'model' and 'split' sections")
    p.add_argument("--split", help="JSON split plan; omit to draw one from the seed")
    p.add_argument("--seed", type=int, help="training seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on built RoIs")
    p.add_argument("checkpoint", help="checkpoint.json from train")
    p.add_argument("built", help="directory produced by build")
    p.add_argument("--split", help="JSON split plan; scores its test side")
    p.add_argument("--region", help="restrict scoring to one region")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="attribute predictions on built RoIs")
    p.add_argument("checkpoint", help="checkpoint.json from train")
    p.add_argument("built", help="directory produced by build")
    p.add_argument("--split", help="JSON split plan; explains its test side")
    p.add_argument("--config", help="JSON with 'ig' and 'mask' sections")
    p.add_argument("--top-k", type=int, dest="top_k",
                   help="also write the strongest K tiles per RoI")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TmegraphError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # exit-code contract: anything unexpected is a runtime failure
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
