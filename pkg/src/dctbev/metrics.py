"""Confusion bookkeeping, IoU and pixel-ranking average precision."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, n_classes: int) -> "ConfusionCounts":
        z = lambda: np.zeros(n_classes, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z())

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    def total(self) -> np.ndarray:
        return self.tp + self.fp + self.fn + self.tn

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge counts over different class counts")
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("tp", "fp", "fn", "tn")}

    @classmethod
    def from_dict(cls, doc) -> "ConfusionCounts":
        return cls(*(np.asarray(doc[k], dtype=np.int64) for k in ("tp", "fp", "fn", "tn")))


def accumulate(pred: np.ndarray, gt: np.ndarray, counts: ConfusionCounts) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    n = counts.n_classes
    for arr, what in ((pred, "prediction"), (gt, "ground truth")):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ValueError(f"{what} has class ids outside [0, {n})")
    joint = np.bincount(gt.ravel().astype(np.int64) * n + pred.ravel().astype(np.int64),
                        minlength=n * n).reshape(n, n)
    tp = np.diag(joint).copy()
    fp = joint.sum(axis=0) - tp
    fn = joint.sum(axis=1) - tp
    tn = joint.sum() - tp - fp - fn
    return counts.merge(ConfusionCounts(tp, fp, fn, tn))


def iou(counts: ConfusionCounts, cls: int, empty_value: float = 1.0) -> float:
    denom = counts.tp[cls] + counts.fp[cls] + counts.fn[cls]
    if denom == 0:
        return empty_value
    return float(counts.tp[cls] / denom)


def miou(counts: ConfusionCounts, classes: Sequence[int], empty_value: float = 1.0) -> float:
    return float(np.mean([iou(counts, c, empty_value) for c in classes]))


def average_precision(scores, gt_mask, empty_threshold: float = 0.5) -> float:
    """Area under the step-interpolated precision/recall curve obtained by
    ranking pixels by descending score (ties broken by pixel index).

    With no positive pixels recall is undefined; AP is then 1.0 if no pixel
    scores at or above ``empty_threshold`` and 0.0 otherwise.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    gt = np.asarray(gt_mask).ravel()
    if scores.shape != gt.shape:
        raise ValueError("scores and gt_mask differ in size")
    if np.isnan(scores).any():
        raise ValueError("NaN in scores")
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("gt_mask must be binary")
    n_pos = int(gt.sum())
    if n_pos == 0:
        return 1.0 if not (scores >= empty_threshold).any() else 0.0
    order = np.argsort(-scores, kind="stable")
    hits = gt[order].astype(np.float64)
    tp_cum = np.cumsum(hits)
    precision = tp_cum / np.arange(1, len(hits) + 1)
    # recall only moves at positives, by 1/n_pos
    return float((precision * hits).sum() / n_pos)


def ties_change_ap(scores, gt_mask, tol: float = 1e-6) -> bool:
    """Whether reversing the tie-break direction moves AP by more than ``tol``."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    gt = np.asarray(gt_mask).ravel()
    if gt.sum() == 0 or len(np.unique(scores)) == len(scores):
        return False
    fwd = average_precision(scores, gt)
    rev = average_precision(scores[::-1], gt[::-1])
    return abs(fwd - rev) > tol


@dataclass
class MetricsReport:
    class_set: tuple[str, ...]
    foreground: tuple[int, ...]
    iou: dict[str, float]
    ap: dict[str, float]
    miou: float
    map: float
    n_samples: int
    counts: Optional[ConfusionCounts] = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "class_set": list(self.class_set),
            "foreground": list(self.foreground),
            "iou": self.iou,
            "ap": self.ap,
            "miou": self.miou,
            "map": self.map,
            "n_samples": self.n_samples,
            "counts": self.counts.to_dict() if self.counts is not None else None,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        counts = ConfusionCounts.from_dict(d["counts"]) if d.get("counts") else None
        return cls(tuple(d["class_set"]), tuple(d["foreground"]), d["iou"], d["ap"], d["miou"],
                   d["map"], d["n_samples"], counts, d.get("notes", []))

    def table(self) -> str:
        """Fixed-layout text table; percentages with two decimals."""
        lines = [f"{'class':<12}{'IoU (%)':>10}{'AP (%)':>10}", "-" * 32]
        for name in self.iou:
            lines.append(f"{name:<12}{100 * self.iou[name]:>10.2f}{100 * self.ap[name]:>10.2f}")
        lines.append("-" * 32)
        lines.append(f"{'mean':<12}{100 * self.miou:>10.2f}{100 * self.map:>10.2f}")
        lines.append(f"samples: {self.n_samples}")
        return "\n".join(lines)


def foreground_classes(class_set: Sequence[str]) -> tuple[int, ...]:
    return tuple(i for i, name in enumerate(class_set) if name != "background")


def report_from(counts: ConfusionCounts, scores: dict[int, np.ndarray], gts: dict[int, np.ndarray],
                class_set: Sequence[str], n_samples: int, empty_value: float = 1.0) -> MetricsReport:
    fg = foreground_classes(class_set)
    ious, aps, notes = {}, {}, []
    for c in fg:
        name = class_set[c]
        ious[name] = iou(counts, c, empty_value)
        aps[name] = average_precision(scores[c], gts[c])
        if ties_change_ap(scores[c], gts[c]):
            notes.append(f"AP for {name} depends on tie-breaking order")
    return MetricsReport(tuple(class_set), fg, ious, aps,
                         float(np.mean(list(ious.values()))), float(np.mean(list(aps.values()))),
                         n_samples, counts, notes)


def evaluate_arrays(samples: Iterable[tuple[np.ndarray, np.ndarray]], class_set: Sequence[str],
                    empty_value: float = 1.0) -> MetricsReport:
    """``samples`` yields ``(probs, gt)`` with ``probs`` of shape (N, H, W)
    (softmax over classes) and ``gt`` of shape (H, W). Predictions are the
    per-pixel argmax of ``probs``."""
    n = len(class_set)
    fg = foreground_classes(class_set)
    counts = ConfusionCounts.zeros(n)
    score_chunks = {c: [] for c in fg}
    gt_chunks = {c: [] for c in fg}
    n_samples = 0
    for probs, gt in samples:
        probs = np.asarray(probs)
        if probs.shape[0] != n:
            raise ValueError(f"probabilities have {probs.shape[0]} classes, class_set has {n}")
        counts = accumulate(probs.argmax(axis=0), gt, counts)
        for c in fg:
            score_chunks[c].append(probs[c].ravel())
            gt_chunks[c].append((np.asarray(gt) == c).ravel())
        n_samples += 1
    if n_samples == 0:
        raise ValueError("no samples to evaluate")
    scores = {c: np.concatenate(score_chunks[c]) for c in fg}
    gts = {c: np.concatenate(gt_chunks[c]).astype(np.int64) for c in fg}
    return report_from(counts, scores, gts, class_set, n_samples, empty_value)


def evaluate(model, dataset, class_set: Optional[Sequence[str]] = None, batch_size: int = 8,
             empty_value: float = 1.0) -> MetricsReport:
    """Run ``model`` in inference mode over every sample of ``dataset`` (a
    :class:`~dctbev.data.LayoutDataset`) and score the main decoder output."""
    import torch

    ds_classes = tuple(dataset.class_set)
    if class_set is not None and tuple(class_set) != ds_classes:
        raise ValueError(f"model class_set {list(class_set)} does not match dataset {list(ds_classes)}")
    if model.cfg.n_classes != len(ds_classes):
        raise ValueError(f"model predicts {model.cfg.n_classes} classes, dataset has {len(ds_classes)}")
    if len(dataset) == 0:
        raise ValueError("no samples to evaluate")

    def samples():
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                for start in range(0, len(dataset), batch_size):
                    idx = range(start, min(start + batch_size, len(dataset)))
                    images, _, ids = dataset.batch(idx)
                    probs = torch.softmax(model.forward_infer(torch.from_numpy(images)).main_logits, dim=1)
                    for p, g in zip(probs.numpy(), ids):
                        yield p, g
        finally:
            model.train(was_training)

    return evaluate_arrays(samples(), ds_classes, empty_value)
