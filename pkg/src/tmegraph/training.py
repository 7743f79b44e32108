"""Training loop and evaluation harness for the stage classifiers."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .dataset import RoISample, SplitPlan, augment, make_test_graph
from .errors import ValidationError
from .ingest import Region


def class_weights(class_indices, n_classes: int) -> np.ndarray:
    """Inverse-frequency weights: weight_c * frequency_c is constant."""
    counts = np.bincount(np.asarray(class_indices, dtype=np.int64), minlength=n_classes)
    n = counts.sum()
    weights = np.zeros(n_classes)
    present = counts > 0
    weights[present] = n / (n_classes * counts[present])
    return weights


def weighted_f1(y_true, y_pred, n_classes: int) -> float:
    """Support-weighted mean of per-class F1; empty denominators score 0."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ValidationError("need equally many true and predicted labels")
    weighted = 0.0
    for c in range(n_classes):
        tp = int(np.sum((y_true == c) & (y_pred == c)))
        fp = int(np.sum((y_true != c) & (y_pred == c)))
        fn = int(np.sum((y_true == c) & (y_pred != c)))
        support = tp + fn
        if support == 0:
            continue
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / support
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        weighted += support * f1
    return weighted / y_true.size


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = float("-inf")
    class_weights: np.ndarray | None = None
    stopped_early: bool = False


def _snapshot(params: dict) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params: dict, snap: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data = snap[k].copy()


def train(model, samples, split: SplitPlan, seed: int) -> TrainResult:
    """Fit the model on the split's training side with early stopping.

    Each epoch regenerates `augment_copies` augmented variants of every
    training RoI (pseudo-validation RoIs are held out of the gradient set
    and scored in their deterministic test form). The best parameters by
    pseudo-validation weighted F1 are restored before returning.
    """
    cfg = model.config
    split.validate(samples)
    by_id = {s.roi_id: s for s in samples}
    val_ids = list(split.pseudo_val_rois)
    grad_ids = [r for r in split.train_rois if r not in set(val_ids)]
    if not grad_ids:
        raise ValidationError("no training RoIs left after holding out pseudo-validation")

    train_labels = [cfg.stage_to_class(by_id[r].stage) for r in split.train_rois]
    weights = class_weights(train_labels, cfg.n_classes)

    grad_samples = [by_id[r] for r in grad_ids]
    val_samples = [make_test_graph(by_id[r], cfg.tile_k_default) for r in val_ids]
    val_labels = np.array([cfg.stage_to_class(s.stage) for s in val_samples], dtype=np.int64)

    root = np.random.SeedSequence(seed)
    rng_augment, rng_shuffle, rng_dropout = (np.random.default_rng(c) for c in root.spawn(3))

    model.fit_standardizers(grad_samples)
    params = model.trainable_parameters()
    opt = nn.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    result = TrainResult(class_weights=weights)
    best_snap = _snapshot(params)
    stall = 0

    for epoch in range(cfg.max_epochs):
        pool: list[RoISample] = []
        for s in grad_samples:
            pool.extend(augment(s, rng_augment) for _ in range(cfg.augment_copies))
        order = rng_shuffle.permutation(len(pool))

        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [pool[i] for i in order[start : start + cfg.batch_size]]
            labels = np.array([cfg.stage_to_class(s.stage) for s in batch], dtype=np.int64)
            logits = ad.stack(
                [model.forward_sample(s, rng_dropout, training=True) for s in batch]
            )
            loss = nn.weighted_cross_entropy(logits, labels, weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(batch)
        train_loss = loss_sum / len(pool)

        if val_samples:
            preds = np.argmax(model.predict_logits(val_samples), axis=1)
            score = weighted_f1(val_labels, preds, cfg.n_classes)
            entry = {"epoch": epoch, "train_loss": train_loss, "val_weighted_f1": score}
        else:
            score = -train_loss
            entry = {"epoch": epoch, "train_loss": train_loss}
        result.log.append(entry)

        if score > result.best_score + 1e-12:
            result.best_score = score
            result.best_epoch = epoch
            best_snap = _snapshot(params)
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                result.stopped_early = True
                break

    _restore(params, best_snap)
    return result


def predict(model, samples) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic class predictions and softmax probabilities."""
    logits = model.predict_logits(samples)
    return np.argmax(logits, axis=1), nn.softmax_probs(logits)


REPORT_GROUPS = ("All",) + tuple(r.value for r in Region)


def evaluate(model, samples) -> tuple[dict, list[dict]]:
    """Class-weighted F1 overall and per region, plus per-RoI predictions.

    Samples are first normalized to their deterministic test-graph form.
    Region groups with no samples are omitted with a warning.
    """
    cfg = model.config
    if not samples:
        raise ValidationError("cannot evaluate an empty sample set")
    samples = [make_test_graph(s, cfg.tile_k_default) for s in samples]
    y_true = np.array([cfg.stage_to_class(s.stage) for s in samples], dtype=np.int64)
    y_pred, probs = predict(model, samples)

    names = cfg.class_names()
    predictions = []
    for s, t, p, pr in zip(samples, y_true, y_pred, probs):
        predictions.append(
            {
                "roi_id": s.roi_id,
                "region": s.region.value,
                "true_stage": names[t],
                "predicted_stage": names[p],
                **{f"prob_{name}": float(v) for name, v in zip(names, pr)},
            }
        )

    report: dict[str, dict] = {}
    report["All"] = {
        "weighted_f1": weighted_f1(y_true, y_pred, cfg.n_classes),
        "n": int(len(samples)),
    }
    for region in Region:
        mask = np.array([s.region is region for s in samples])
        if not mask.any():
            warnings.warn(f"no test RoIs in region {region.value}; row omitted", stacklevel=2)
            continue
        report[region.value] = {
            "weighted_f1": weighted_f1(y_true[mask], y_pred[mask], cfg.n_classes),
            "n": int(mask.sum()),
        }
    return report, predictions
