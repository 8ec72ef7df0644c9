"""Attack losses and pattern constraint losses.

Attack terms are written so that *minimizing* them suppresses detections:
log-probability of the true class, log of the predicted centre weighted by the
true centre, and Gaussian/Laplacian similarities between predicted and true
box sizes or parameterized offsets.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .boxes import BoxTarget
from .errors import EmptyPalette, OutOfRangeCoordinate, ShapeMismatch, UnknownArchitecture

DEFAULT_EPS = 1e-6
TV_FLOOR = 1e-12
ARCHITECTURES = ("yolo", "two_stage")
ATTACK_TERMS = {"yolo": ("cla", "coord", "wh"), "two_stage": ("cla", "bbox")}


@dataclass
class LossWeights:
    theta_cla: float = 5.0
    theta_coord: float = 1.0
    theta_wh: float = 1.0
    theta_cla2: float = 500.0
    theta_bbox: float = 10.0
    alpha_tv: float = 100.0
    alpha_print: float = 100.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")

    @classmethod
    def yolo(cls) -> "LossWeights":
        return cls(theta_cla=5.0, theta_coord=1.0, theta_wh=1.0, alpha_tv=100.0, alpha_print=100.0)

    @classmethod
    def two_stage(cls) -> "LossWeights":
        return cls(theta_cla2=500.0, theta_bbox=10.0, alpha_tv=18.0, alpha_print=100.0)

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{k: v * factor for k, v in asdict(self).items()})


def _tensor(x, like=None):
    if isinstance(x, BoxTarget):
        x = x.as_array()
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def cla_loss(probs, target, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """``sum_i y_i * log(max(p_i, eps))`` over the last axis.

    ``target`` is a one-hot vector (or batch of them) matching ``probs``.
    """
    p = _tensor(probs)
    y = _tensor(target, like=p).to(p.dtype)
    if p.shape != y.shape:
        raise ShapeMismatch(f"probs {tuple(p.shape)} vs target {tuple(y.shape)}")
    return (y * torch.log(p.clamp(min=eps))).sum(dim=-1)


def _check_unit(x: torch.Tensor, what: str):
    v = x.detach()
    if v.numel() and (v.min() < 0 or v.max() > 1):
        raise OutOfRangeCoordinate(f"{what} coordinates must lie in [0, 1]")


def coord_loss(pred, gt, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """``sum_k gt_k * log(max(pred_k, eps))`` over the two centre coordinates."""
    p = _tensor(pred)[..., :2]
    g = _tensor(gt, like=p)[..., :2].to(p.dtype)
    _check_unit(p, "predicted")
    _check_unit(g, "ground-truth")
    return (g * torch.log(p.clamp(min=eps))).sum(dim=-1)


def wh_loss(pred, gt) -> torch.Tensor:
    """``exp(-((w - w')^2 + (h - h')^2) / 2)``; equals 1 when sizes agree."""
    p = _tensor(pred)
    g = _tensor(gt, like=p).to(p.dtype)
    d = p[..., 2:4] - g[..., 2:4]
    return torch.exp(-0.5 * (d ** 2).sum(dim=-1))


def bbox_l1_loss(pred_t, gt_t) -> torch.Tensor:
    """``exp(-sum |t' - t|)`` over the 4 parameterized box coordinates."""
    p = _tensor(pred_t)
    g = _tensor(gt_t, like=p).to(p.dtype)
    if p.shape[-1] != 4 or p.shape != g.shape:
        raise ShapeMismatch(f"expected matching length-4 vectors, got {tuple(p.shape)} and {tuple(g.shape)}")
    return torch.exp(-(p - g).abs().sum(dim=-1))


def tv_loss(pattern) -> torch.Tensor:
    """Isotropic total variation summed over pixels and channels.

    Differences towards a neighbour outside the grid count as zero. Terms
    whose squared magnitude is at or below ``TV_FLOOR`` contribute zero and
    carry no gradient.
    """
    a = _tensor(pattern)
    if a.ndim == 2:
        a = a.unsqueeze(-1)
    dv = torch.zeros_like(a)
    dh = torch.zeros_like(a)
    dv[:-1] = a[:-1] - a[1:]
    dh[:, :-1] = a[:, :-1] - a[:, 1:]
    sq = dv ** 2 + dh ** 2
    return torch.where(sq > TV_FLOOR, torch.sqrt(sq.clamp(min=TV_FLOOR)), torch.zeros_like(sq)).sum()


def nps_loss(pattern, palette, chunk: int = 1 << 22) -> torch.Tensor:
    """Sum over pixels of the L1 colour distance to the nearest palette entry."""
    a = _tensor(pattern)
    c = _tensor(palette, like=a).to(a.dtype).reshape(-1, 3) if len(palette) else None
    if c is None or c.shape[0] == 0:
        raise EmptyPalette("printable palette is empty")
    px = a.reshape(-1, 3)
    step = max(1, chunk // c.shape[0])
    total = a.new_zeros(())
    for start in range(0, px.shape[0], step):
        block = px[start:start + step]
        dist = (block[:, None, :] - c[None, :, :]).abs().sum(dim=-1)
        total = total + dist.min(dim=1).values.sum()
    return total


def parse_palette(text: str) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise ValueError(f"palette line {lineno}: expected 'r g b', got {line!r}")
        rgb = [float(v) for v in parts]
        if not all(0.0 <= v <= 1.0 for v in rgb):
            raise ValueError(f"palette line {lineno}: values must be in [0, 1]")
        rows.append(rgb)
    if not rows:
        raise EmptyPalette("palette file has no colours")
    return np.asarray(rows, dtype=np.float64)


def load_palette(path=None) -> np.ndarray:
    """Read a palette file; ``None`` loads the bundled 30-colour set."""
    if path is None:
        text = resources.files("advtee").joinpath("data/palette30.txt").read_text()
    else:
        text = Path(path).read_text()
    return parse_palette(text)


def _mean_or_zero(values, like: torch.Tensor) -> torch.Tensor:
    if values is None:
        return like.new_zeros(())
    v = _tensor(values, like=like)
    if v.numel() == 0:
        return like.new_zeros(())
    return v.reshape(-1).mean()


def loss_components(attack_terms, pattern, palette, architecture: str = "yolo",
                    reduction: str = "sum") -> dict:
    """Unweighted loss terms.

    ``attack_terms`` maps term names to per-candidate values; each is averaged
    over candidates. ``reduction="mean"`` divides the constraint terms by the
    pattern's pixel count.
    """
    if architecture not in ARCHITECTURES:
        raise UnknownArchitecture(f"unknown architecture {architecture!r}")
    p = _tensor(pattern)
    out = {name: _mean_or_zero(attack_terms.get(name), p) for name in ("cla", "coord", "wh", "bbox")}
    tv = tv_loss(p)
    nps = nps_loss(p, palette)
    if reduction == "mean":
        n = p.shape[0] * p.shape[1]
        tv, nps = tv / n, nps / n
    elif reduction != "sum":
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    out["tv"], out["nps"] = tv, nps
    return out


def weighted_total(components: dict, weights: LossWeights, architecture: str = "yolo") -> torch.Tensor:
    w = weights
    if architecture == "yolo":
        attack = w.theta_cla * components["cla"] + w.theta_coord * components["coord"] + w.theta_wh * components["wh"]
    elif architecture == "two_stage":
        attack = w.theta_cla2 * components["cla"] + w.theta_bbox * components["bbox"]
    else:
        raise UnknownArchitecture(f"unknown architecture {architecture!r}")
    return attack + w.alpha_tv * components["tv"] + w.alpha_print * components["nps"]


def total_loss(attack_terms, pattern, weights: LossWeights, architecture: str = "yolo",
               palette=None, reduction: str = "sum") -> torch.Tensor:
    """Weighted attack terms plus weighted TV and printability constraints."""
    if architecture not in ARCHITECTURES:
        raise UnknownArchitecture(f"unknown architecture {architecture!r}")
    if palette is None:
        palette = load_palette()
    comps = loss_components(attack_terms, pattern, palette, architecture, reduction)
    return weighted_total(comps, weights, architecture)
