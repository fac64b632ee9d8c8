"""Detection-quality scoring: IoU, greedy matching, 11-point AP, difficulty buckets.

Detections are plain ``(class_id, score, (x1, y1, x2, y2))`` tuples; ground
truth is :class:`GtBox`. Everything is deterministic: equal scores are broken
by insertion order, so identical inputs give bit-identical AP values.

Two protocols are packaged as configs: a uniform-threshold mode
(:func:`voc_config`, IoU 0.5, no difficulty filtering) and a KITTI-style mode
(:func:`kitti_config`, per-class thresholds, Easy/Moderate/Hard buckets).
Ground truth that qualifies for no bucket is ignored rather than counted:
it neither rewards a hit nor penalizes one, and detections overlapping it
are dropped from scoring instead of becoming false positives. ``DontCare``
regions get the same treatment for every class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "GtBox",
    "EvalConfig",
    "APResult",
    "EvalResult",
    "DONT_CARE",
    "DIFFICULTY_RULES",
    "iou",
    "difficulty_of",
    "match_detections",
    "average_precision",
    "evaluate",
    "kitti_config",
    "voc_config",
    "format_ap_table",
    "pr_csv",
]

Box = tuple[float, float, float, float]
Det = tuple[object, float, Box]  # (class_id, score, bbox)

DONT_CARE = "DontCare"

# name -> (min box height px, max occlusion level, max truncation fraction)
DIFFICULTY_RULES: dict[str, tuple[float, int, float]] = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}


@dataclass(frozen=True)
class GtBox:
    class_id: object
    bbox: Box
    truncation: float = 0.0
    occlusion: int = 0

    @property
    def height(self) -> float:
        return self.bbox[3] - self.bbox[1]


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two pixel rectangles; degenerate input gives 0."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return inter / union


def difficulty_of(gt: GtBox, rules: Mapping[str, tuple[float, int, float]] = DIFFICULTY_RULES) -> frozenset[str]:
    """All difficulty buckets a ground-truth box qualifies for (may be empty)."""
    out = set()
    for name, (min_h, max_occ, max_trunc) in rules.items():
        if gt.height >= min_h and gt.occlusion <= max_occ and gt.truncation <= max_trunc:
            out.add(name)
    return frozenset(out)


def _sorted_order(dets: Sequence[Det]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))


def _match(
    dets: Sequence[Det],
    gts: Sequence[GtBox],
    ignored: Sequence[Box],
    iou_thresh: float,
) -> tuple[list[str], list[bool]]:
    """Greedy matching. Returns per-det status ('tp'|'fp'|'ign') in input order
    and per-gt matched flags. All inputs are assumed to be one class already.
    """
    status = ["fp"] * len(dets)
    taken = [False] * len(gts)
    for i in _sorted_order(dets):
        _, _, box = dets[i]
        best, best_iou = -1, iou_thresh
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            v = iou(box, gt.bbox)
            if v > best_iou or (v == best_iou and v >= iou_thresh and best < 0):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            status[i] = "tp"
        elif any(iou(box, ign) >= iou_thresh for ign in ignored):
            status[i] = "ign"
    return status, taken


def match_detections(
    dets: Sequence[Det], gts: Sequence[GtBox], iou_thresh: float
) -> tuple[list[bool], list[bool]]:
    """TP/FP flags per detection (input order) and matched flags per gt.

    Detections are ranked by descending score (ties by input order) and each
    claims the highest-IoU still-unmatched ground truth at or above the
    threshold. Inputs are treated as a single class.
    """
    status, taken = _match(dets, gts, (), iou_thresh)
    return [s == "tp" for s in status], taken


def average_precision(
    scores: Sequence[float], tp_flags: Sequence[bool], num_gt: int
) -> tuple[float, np.ndarray, np.ndarray]:
    """11-point interpolated AP plus the raw precision/recall arrays.

    AP is the mean over recall targets {0.0, 0.1, ..., 1.0} of the maximum
    precision among ranked prefixes whose recall reaches the target. With no
    ground truth the AP is defined as 0 (callers flag that case).
    """
    if len(scores) != len(tp_flags):
        raise ValueError(f"{len(scores)} scores vs {len(tp_flags)} flags")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = np.cumsum([1.0 if tp_flags[i] else 0.0 for i in order])
    fp = np.cumsum([0.0 if tp_flags[i] else 1.0 for i in order])
    if num_gt <= 0:
        return 0.0, np.zeros(0), np.zeros(0)
    recall = tp / num_gt
    denom = tp + fp
    precision = np.divide(tp, denom, out=np.zeros_like(tp), where=denom > 0)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / 11.0, recall, precision


@dataclass(frozen=True)
class EvalConfig:
    """Which classes to score, at which IoU thresholds, in which difficulty bucket."""

    classes: tuple = ()
    iou_thresholds: Mapping[object, float] = field(default_factory=dict)
    default_iou: float = 0.5
    difficulty: str = "all"  # easy | moderate | hard | all
    rules: Mapping[str, tuple[float, int, float]] = field(default_factory=lambda: dict(DIFFICULTY_RULES))

    def __post_init__(self):
        if self.difficulty not in ("easy", "moderate", "hard", "all"):
            raise ValueError(f"difficulty must be easy/moderate/hard/all, got {self.difficulty!r}")

    def threshold_for(self, class_id) -> float:
        return float(self.iou_thresholds.get(class_id, self.default_iou))


def kitti_config(difficulty: str = "moderate") -> EvalConfig:
    return EvalConfig(
        classes=("Car", "Pedestrian", "Cyclist"),
        iou_thresholds={"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5},
        difficulty=difficulty,
    )


def voc_config(classes: tuple = (), iou_thresh: float = 0.5) -> EvalConfig:
    return EvalConfig(classes=classes, default_iou=iou_thresh, difficulty="all")


@dataclass(frozen=True)
class APResult:
    class_id: object
    ap: float
    num_gt: int
    recall: np.ndarray
    precision: np.ndarray

    @property
    def valid(self) -> bool:
        return self.num_gt > 0


@dataclass(frozen=True)
class EvalResult:
    per_class: tuple[APResult, ...]
    mean_ap: float
    difficulty: str


def evaluate(
    dets_by_image: Mapping[object, Sequence[Det]],
    gts_by_image: Mapping[object, Sequence[GtBox]],
    cfg: EvalConfig,
) -> EvalResult:
    """Score a whole image set. mAP averages the classes that have ground truth."""
    classes = tuple(cfg.classes)
    if not classes:
        seen = {g.class_id for gts in gts_by_image.values() for g in gts if g.class_id != DONT_CARE}
        classes = tuple(sorted(seen, key=repr))
    image_ids = sorted(set(dets_by_image) | set(gts_by_image), key=repr)
    results = []
    for cls in classes:
        thresh = cfg.threshold_for(cls)
        scores: list[float] = []
        flags: list[bool] = []
        num_gt = 0
        for img in image_ids:
            dets = [d for d in dets_by_image.get(img, ()) if d[0] == cls]
            gts_all = list(gts_by_image.get(img, ()))
            counted = []
            ignored = [g.bbox for g in gts_all if g.class_id == DONT_CARE]
            for g in gts_all:
                if g.class_id != cls:
                    continue
                if cfg.difficulty == "all" or cfg.difficulty in difficulty_of(g, cfg.rules):
                    counted.append(g)
                else:
                    ignored.append(g.bbox)
            status, _ = _match(dets, counted, ignored, thresh)
            num_gt += len(counted)
            for d, s in zip(dets, status):
                if s != "ign":
                    scores.append(d[1])
                    flags.append(s == "tp")
        ap, recall, precision = average_precision(scores, flags, num_gt)
        results.append(APResult(cls, ap, num_gt, recall, precision))
    valid = [r.ap for r in results if r.valid]
    mean_ap = float(np.mean(valid)) if valid else 0.0
    return EvalResult(tuple(results), mean_ap, cfg.difficulty)


def format_ap_table(result: EvalResult) -> str:
    """Fixed-format AP table (percent); byte-stable for identical results."""
    lines = [f"difficulty: {result.difficulty}", f"{'class':<14} {'AP%':>8} {'gts':>6}"]
    for r in result.per_class:
        note = "" if r.valid else "  (no gt)"
        lines.append(f"{str(r.class_id):<14} {100.0 * r.ap:8.4f} {r.num_gt:6d}{note}")
    lines.append(f"{'mAP':<14} {100.0 * result.mean_ap:8.4f}")
    return "\n".join(lines) + "\n"


def pr_csv(r: APResult) -> str:
    rows = ["recall,precision"]
    rows += [f"{rec:.6f},{prec:.6f}" for rec, prec in zip(r.recall, r.precision)]
    return "\n".join(rows) + "\n"
