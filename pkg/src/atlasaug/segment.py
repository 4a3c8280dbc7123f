"""Supervised segmenter and Dice evaluation.

The segmenter works on 2-D slices; 3-D volumes are segmented one slice at a
time along axis 0 and reassembled. Training draws examples from a stream
(synthesized, pseudo-labeled or real), forms batches of slices, and early-
stops on mean foreground validation Dice.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from . import engine
from .engine import Adam, Graph, NumericError, ShapeError, Tensor
from .models import UNet


@dataclass
class SegModel:
    net: UNet
    label_count: int
    loss_history: list = dc_field(default_factory=list)
    val_history: list = dc_field(default_factory=list)
    best_epoch: int = -1

    @staticmethod
    def create(label_count: int, widths=(16, 32, 32), seed: int = 0) -> "SegModel":
        return SegModel(UNet(1, label_count, spatial_ndim=2, widths=widths, seed=seed),
                        label_count)


def dice(pred: np.ndarray, truth: np.ndarray, label: int) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when the label is absent from both maps."""
    if pred.shape != truth.shape:
        raise ShapeError(f"grid mismatch: {pred.shape} vs {truth.shape}")
    a = pred == label
    b = truth == label
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def mean_foreground_dice(pred: np.ndarray, truth: np.ndarray, label_count: int) -> float:
    return float(np.mean([dice(pred, truth, l) for l in range(1, label_count)]))


def predict_labels(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Argmax labels per slice; ties break toward the smaller label id."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        logits = model.net.forward(Tensor(image[None]))
        return np.argmax(logits.data, axis=0).astype(np.int32)
    if image.ndim == 3:
        return np.stack([predict_labels(model, sl) for sl in image])
    raise ShapeError(f"expected a 2-D slice or 3-D volume, got shape {image.shape}")


ExampleStream = Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]]


def _random_slice(rng: np.random.Generator, image: np.ndarray,
                  labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if image.ndim == 2:
        return image, labels
    k = int(rng.integers(image.shape[0]))
    return image[k], labels[k]


def train_segmenter(model: SegModel, example_stream: ExampleStream,
                    val_images: list[np.ndarray], val_labels: list[np.ndarray],
                    max_epochs: int, patience: int, seed: int,
                    iters_per_epoch: int = 10, batch_size: int = 16,
                    learning_rate: float = 5e-4) -> SegModel:
    """Cross-entropy training with early stopping on mean validation Dice.

    Returns the model restored to its best-validation checkpoint.
    """
    if not val_images:
        raise ValueError("validation set is empty")
    rng = np.random.default_rng(seed)
    opt = Adam(model.net.parameters(), learning_rate)
    best_dice = -1.0
    best_state = model.net.clone_state()
    model.best_epoch = -1
    since_best = 0
    for epoch in range(max_epochs):
        for _ in range(iters_per_epoch):
            imgs, labs = [], []
            while len(imgs) < batch_size:
                image, labels = example_stream(rng)
                sl_img, sl_lab = _random_slice(rng, image, labels)
                imgs.append(sl_img)
                labs.append(sl_lab)
            batch = np.stack(imgs).astype(np.float32)[:, None]  # (N, 1, H, W)
            target = np.stack(labs).astype(np.int64)
            with Graph() as g:
                logits = model.net.forward(Tensor(batch))
                loss = engine.softmax_cross_entropy(logits, target, class_axis=1)
            val = loss.item()
            if not np.isfinite(val):
                raise NumericError(f"non-finite segmentation loss in epoch {epoch}")
            grads = engine.backprop(g, loss, model.net.parameters())
            opt.step(grads)
            model.loss_history.append(val)
        scores = [mean_foreground_dice(predict_labels(model, im), lb, model.label_count)
                  for im, lb in zip(val_images, val_labels)]
        vd = float(np.mean(scores))
        model.val_history.append(vd)
        if vd > best_dice:
            best_dice = vd
            best_state = model.net.clone_state()
            model.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    model.net.load_state(best_state)
    return model


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    """Per-method, per-subject, per-label Dice plus summary statistics.

    Standard deviations use the population convention (ddof=0). Foreground
    labels are ordered by the volume they occupy in the reference labels,
    largest first; background (label 0) is excluded from all means.
    """
    rows: list[tuple[str, int, int, float]]          # (method, subject, label, dice)
    label_order: list[int]
    methods: list[str]
    baseline: str
    summary: dict

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "subject", "label", "dice"])
            for row in self.rows:
                w.writerow([row[0], row[1], row[2], f"{row[3]:.6f}"])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate_suite(methods: dict[str, list[np.ndarray]], truths: list[np.ndarray],
                   baseline_name: str, label_count: int,
                   reference_labels: Optional[np.ndarray] = None) -> EvalReport:
    """Dice table over methods x subjects x foreground labels, with pairwise
    improvement of every method over the named baseline."""
    if baseline_name not in methods:
        raise ValueError(f"baseline {baseline_name!r} not among methods")
    n_subjects = len(truths)
    for name, preds in methods.items():
        for s in range(n_subjects):
            if s >= len(preds) or preds[s] is None:
                raise ValueError(f"missing prediction: method {name!r}, subject {s}")
    fg = list(range(1, label_count))
    if reference_labels is not None:
        vol = {l: int((reference_labels == l).sum()) for l in fg}
        fg.sort(key=lambda l: (-vol[l], l))

    rows = []
    per_subject_mean: dict[str, np.ndarray] = {}
    per_label: dict[str, dict[int, float]] = {}
    for name, preds in methods.items():
        table = np.zeros((n_subjects, len(fg)))
        for s in range(n_subjects):
            for li, l in enumerate(fg):
                d = dice(preds[s], truths[s], l)
                table[s, li] = d
                rows.append((name, s, l, d))
        per_subject_mean[name] = table.mean(axis=1)
        per_label[name] = {l: float(table[:, li].mean()) for li, l in enumerate(fg)}

    summary = {"std_convention": "population (ddof=0)",
               "baseline": baseline_name, "label_order": fg, "methods": {}}
    base = per_subject_mean[baseline_name]
    for name in methods:
        ms = per_subject_mean[name]
        all_dice = np.array([r[3] for r in rows if r[0] == name])
        improvement = ms - base
        summary["methods"][name] = {
            "mean_dice": float(all_dice.mean()),
            "std_dice": float(all_dice.std(ddof=0)),
            "improvement_vs_baseline": float(improvement.mean()),
            "improvement_std": float(improvement.std(ddof=0)),
            "per_subject_mean_dice": [float(v) for v in ms],
            "per_label_mean_dice": {str(l): per_label[name][l] for l in fg},
        }
    return EvalReport(rows=rows, label_order=fg, methods=sorted(methods),
                      baseline=baseline_name, summary=summary)
