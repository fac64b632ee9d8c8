"""Turning raw detection-head tensors into scored boxes.

A head emits B * (5 + C) channels on an (Sh, Sw) grid, anchor-major: for each
of the B priors, [tx, ty, tw, th, to] followed by C class logits. Decoding
follows the usual grid-relative parameterization:

    center_x = (sigmoid(tx) + cx) / Sw * img_w
    center_y = (sigmoid(ty) + cy) / Sh * img_h
    width    = prior_w * exp(tw) / Sw * img_w
    height   = prior_h * exp(th) / Sh * img_h
    score    = sigmoid(to) * max(softmax(class logits))

Priors are stated in cell units of a base grid (default 10x18); on any other
grid the same physical size is kept by scaling them with the grid, so one
:class:`AnchorSet` serves every head of a multi-scale variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .evaluator import iou
from .netgraph import DEFAULT_PRIORS

__all__ = ["AnchorSet", "Detection", "decode", "nms", "objectness_heatmap", "DEFAULT_PRIORS"]


@dataclass(frozen=True)
class AnchorSet:
    """Box priors as (width, height) pairs in base-grid cell units."""

    priors: tuple[tuple[float, float], ...] = DEFAULT_PRIORS
    base_grid: tuple[int, int] = (10, 18)  # (Sh, Sw)

    def __post_init__(self):
        if len(self.priors) < 1:
            raise ConfigError("anchor set needs at least one prior")
        if any(w <= 0 or h <= 0 for w, h in self.priors):
            raise ConfigError(f"anchor priors must be positive, got {self.priors}")
        if min(self.base_grid) < 1:
            raise ConfigError(f"anchor base grid must be positive, got {self.base_grid}")

    def __len__(self) -> int:
        return len(self.priors)

    def scaled(self, grid_hw: tuple[int, int]) -> np.ndarray:
        """Priors in cell units of ``grid_hw``, same physical size. Shape (B, 2) as (w, h)."""
        sh, sw = grid_hw
        fh, fw = sh / self.base_grid[0], sw / self.base_grid[1]
        return np.array([(w * fw, h * fh) for w, h in self.priors], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    bbox: tuple[float, float, float, float]
    class_id: int
    score: float


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _split_raw(raw: np.ndarray, num_priors: int) -> np.ndarray:
    if raw.ndim != 3:
        raise ConfigError(f"raw head output must be 3-d, got shape {getattr(raw, 'shape', None)}")
    n, sh, sw = raw.shape
    if n % num_priors:
        raise ConfigError(f"{n} channels not divisible by {num_priors} priors")
    per = n // num_priors
    if per < 6:
        raise ConfigError(f"{n} channels / {num_priors} priors leaves {per} per box; need 5 + classes >= 6")
    return raw.reshape(num_priors, per, sh, sw)


def decode(
    raw: np.ndarray,
    anchors: AnchorSet,
    img_w: float,
    img_h: float,
    conf_thresh: float = 0.25,
) -> list[Detection]:
    """Boxes in image pixels from one head's raw tensor.

    Emits every anchor-cell whose score reaches ``conf_thresh``, clipped to
    the image, in (anchor, row, column) scan order.
    """
    if img_w <= 0 or img_h <= 0:
        raise ValueError(f"image size must be positive, got {img_w}x{img_h}")
    b = len(anchors)
    boxes = _split_raw(raw.astype(np.float64, copy=False), b)
    _, per, sh, sw = boxes.shape
    priors = anchors.scaled((sh, sw))  # (B, 2)

    cx = np.arange(sw, dtype=np.float64)[None, None, :]
    cy = np.arange(sh, dtype=np.float64)[None, :, None]
    center_x = (_sigmoid(boxes[:, 0]) + cx) / sw * img_w
    center_y = (_sigmoid(boxes[:, 1]) + cy) / sh * img_h
    width = priors[:, 0, None, None] * np.exp(boxes[:, 2]) / sw * img_w
    height = priors[:, 1, None, None] * np.exp(boxes[:, 3]) / sh * img_h
    objectness = _sigmoid(boxes[:, 4])
    class_prob = _softmax(boxes[:, 5:], axis=1)
    best_class = class_prob.argmax(axis=1)
    score = objectness * np.take_along_axis(class_prob, best_class[:, None], axis=1)[:, 0]

    out: list[Detection] = []
    for bi, yi, xi in np.argwhere(score >= conf_thresh):
        x1 = min(max(center_x[bi, yi, xi] - width[bi, yi, xi] / 2, 0.0), img_w)
        x2 = min(max(center_x[bi, yi, xi] + width[bi, yi, xi] / 2, 0.0), img_w)
        y1 = min(max(center_y[bi, yi, xi] - height[bi, yi, xi] / 2, 0.0), img_h)
        y2 = min(max(center_y[bi, yi, xi] + height[bi, yi, xi] / 2, 0.0), img_h)
        out.append(Detection((x1, y1, x2, y2), int(best_class[bi, yi, xi]), float(score[bi, yi, xi])))
    return out


def nms(dets: list[Detection], iou_thresh: float = 0.45) -> list[Detection]:
    """Greedy per-class suppression.

    Scanning by descending score (ties by input order), a box is kept iff no
    already-kept box of the same class overlaps it with IoU > ``iou_thresh``.
    The result is sorted by descending score.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or iou(k.bbox, d.bbox) <= iou_thresh for k in kept):
            kept.append(d)
    return kept


def objectness_heatmap(
    raw: np.ndarray,
    anchors: AnchorSet,
    out_hw: tuple[int, int] = (320, 576),
) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell max objectness over priors, in [0, 1].

    Returns the (Sh, Sw) grid map and a nearest-neighbour upscale of it to
    ``out_hw`` for overlaying on the input image.
    """
    boxes = _split_raw(raw.astype(np.float64, copy=False), len(anchors))
    small = _sigmoid(boxes[:, 4]).max(axis=0)
    sh, sw = small.shape
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise ValueError(f"output size must be positive, got {out_hw}")
    rows = (np.arange(oh) * sh) // oh
    cols = (np.arange(ow) * sw) // ow
    return small, small[np.ix_(rows, cols)]
