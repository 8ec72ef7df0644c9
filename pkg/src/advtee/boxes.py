"""Box containers and conversions. Boxes are normalized ``(cx, cy, w, h)``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class BoxTarget:
    """A normalized box; ``t`` optionally holds its parameterized 4-vector."""

    cx: float
    cy: float
    w: float
    h: float
    t: tuple | None = None

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def within_image(self, tol: float = 1e-9) -> bool:
        x1, y1, x2, y2 = cxcywh_to_xyxy(self.as_array())
        return x1 >= -tol and y1 >= -tol and x2 <= 1 + tol and y2 <= 1 + tol and self.w > 0 and self.h > 0


def as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, BoxTarget):
        return boxes.as_array()[None]
    if isinstance(boxes, torch.Tensor):
        return boxes.detach().cpu().numpy().astype(np.float64).reshape(-1, 4)
    items = list(boxes) if not isinstance(boxes, np.ndarray) else boxes
    if len(items) and isinstance(items[0], BoxTarget):
        return np.stack([b.as_array() for b in items])
    return np.asarray(items, dtype=np.float64).reshape(-1, 4)


def cxcywh_to_xyxy(boxes):
    """Works on numpy arrays and tensors of shape (..., 4)."""
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    parts = [cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]
    if isinstance(boxes, torch.Tensor):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def xyxy_to_cxcywh(boxes):
    x1, y1, x2, y2 = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    parts = [(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1]
    if isinstance(boxes, torch.Tensor):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix between two sets of normalized ``(cx, cy, w, h)`` boxes."""
    a = cxcywh_to_xyxy(as_box_array(a))
    b = cxcywh_to_xyxy(as_box_array(b))
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when they are disjoint."""
    return float(pairwise_iou(a, b)[0, 0])


def encode_deltas(boxes, anchors):
    """Parameterize boxes against anchors as ``(dx/wa, dy/ha, log w/wa, log h/ha)``."""
    lib = torch if isinstance(boxes, torch.Tensor) else np
    tx = (boxes[..., 0] - anchors[..., 0]) / anchors[..., 2]
    ty = (boxes[..., 1] - anchors[..., 1]) / anchors[..., 3]
    tw = lib.log(boxes[..., 2] / anchors[..., 2])
    th = lib.log(boxes[..., 3] / anchors[..., 3])
    return lib.stack([tx, ty, tw, th], -1) if lib is torch else np.stack([tx, ty, tw, th], axis=-1)


def decode_deltas(deltas, anchors):
    lib = torch if isinstance(deltas, torch.Tensor) else np
    cx = anchors[..., 0] + deltas[..., 0] * anchors[..., 2]
    cy = anchors[..., 1] + deltas[..., 1] * anchors[..., 3]
    w = anchors[..., 2] * lib.exp(deltas[..., 2])
    h = anchors[..., 3] * lib.exp(deltas[..., 3])
    return lib.stack([cx, cy, w, h], -1) if lib is torch else np.stack([cx, cy, w, h], axis=-1)
