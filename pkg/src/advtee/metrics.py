"""Box overlap and COCO-style average precision."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import as_box_array, iou, pairwise_iou

__all__ = ["Detection", "iou", "average_precision", "ap_range", "IOU_THRESHOLDS", "RECALL_POINTS"]

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
# Absorbs rounding when an IoU equals a threshold analytically (e.g. 0.6 vs 0.6).
_IOU_TOL = 1e-9


@dataclass(frozen=True)
class Detection:
    box: tuple
    score: float
    image_id: object

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def match_detections(dets, gts, iou_thresh: float):
    """Greedy one-to-one matching in descending score order.

    Returns ``(scores, is_true_positive, n_gt)`` with scores sorted descending.
    """
    by_image = {}
    for img_id, boxes in gts.items():
        by_image[img_id] = as_box_array(boxes)
    n_gt = sum(len(b) for b in by_image.values())
    order = sorted(range(len(dets)), key=lambda k: -dets[k].score)
    used = {img_id: np.zeros(len(b), dtype=bool) for img_id, b in by_image.items()}
    scores = np.array([dets[k].score for k in order], dtype=np.float64)
    tp = np.zeros(len(order), dtype=bool)
    for rank, k in enumerate(order):
        d = dets[k]
        gt = by_image.get(d.image_id)
        if gt is None or len(gt) == 0:
            continue
        ious = pairwise_iou(np.asarray(d.box, dtype=np.float64), gt)[0]
        ious[used[d.image_id]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh - _IOU_TOL:
            used[d.image_id][best] = True
            tp[rank] = True
    return scores, tp, n_gt


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated area under the precision/recall curve."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def average_precision(dets, gts, iou_thresh: float = 0.5) -> float:
    """AP of ``dets`` (list of :class:`Detection`) against ``gts``.

    ``gts`` maps image id to that image's ground-truth boxes. With no ground
    truth at all the AP is defined as 0.
    """
    _, tp, n_gt = match_detections(dets, gts, iou_thresh)
    return interpolated_ap(tp, n_gt)


def ap_range(dets, gts, thresholds=IOU_THRESHOLDS) -> float:
    """Mean AP over IoU thresholds 0.50:0.05:0.95."""
    return float(np.mean([average_precision(dets, gts, t) for t in thresholds]))
