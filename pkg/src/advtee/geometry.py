"""Homographies, differentiable pattern warping, polygon masks and compositing.

Coordinates follow the image convention: a point is ``(x, y)`` with ``x`` the
column and ``y`` the row, and pixel ``[i, j]`` sits at ``(x=j, y=i)``.
Homographies act on column vectors ``[x, y, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegeneratePolygon, DegenerateQuad, DimensionMismatch

MAX_CONDITION = 1e12
_COLLINEAR_TOL = 1e-9
_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class HomographyMatrix:
    """3x3 projective map, normalized so that ``m[2, 2] == 1``."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise DimensionMismatch(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) > 1e-15:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-9:
            raise DegenerateQuad("homography is not invertible")
        object.__setattr__(self, "m", m)

    def apply(self, points) -> np.ndarray:
        """Project ``(N, 2)`` points, including the perspective divide."""
        return apply_homography(self.m, points)

    def inverse(self) -> "HomographyMatrix":
        return HomographyMatrix(np.linalg.inv(self.m))


def apply_homography(m, points) -> np.ndarray:
    if isinstance(m, HomographyMatrix):
        m = m.m
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    homog = np.hstack([pts, np.ones((len(pts), 1))]) @ np.asarray(m, dtype=np.float64).T
    return homog[:, :2] / homog[:, 2:3]


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def segments_intersect(p1, p2, q1, q2) -> bool:
    """True if closed segments p1-p2 and q1-q2 share at least one point."""
    d1 = _cross(q1, q2, p1)
    d2 = _cross(q1, q2, p2)
    d3 = _cross(p1, p2, q1)
    d4 = _cross(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and 0 not in (d1, d2, d3, d4):
        return True

    def on_segment(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    return ((d1 == 0 and on_segment(q1, q2, p1)) or (d2 == 0 and on_segment(q1, q2, p2))
            or (d3 == 0 and on_segment(p1, p2, q1)) or (d4 == 0 and on_segment(p1, p2, q2)))


def is_simple_polygon(vertices) -> bool:
    """Check that no two non-adjacent edges of a closed polygon touch."""
    pts = [tuple(map(float, p)) for p in np.asarray(vertices, dtype=np.float64)]
    n = len(pts)
    if n < 3:
        return False
    if len(set(pts)) != n:
        return False
    edges = [(pts[i], pts[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if segments_intersect(*edges[i], *edges[j]):
                return False
    return True


def polygon_area(vertices) -> float:
    """Signed shoelace area (positive for counter-clockwise in x-right/y-up axes)."""
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def check_quad(points) -> np.ndarray:
    """Validate a 4-point quad and return it as a ``(4, 2)`` float array."""
    q = np.asarray(points, dtype=np.float64)
    if q.shape != (4, 2) or not np.all(np.isfinite(q)):
        raise DegenerateQuad(f"quad must be 4 finite (x, y) points, got shape {q.shape}")
    scale = max(np.ptp(q[:, 0]), np.ptp(q[:, 1]), 1e-300)
    for i in range(4):
        for j in range(i + 1, 4):
            for k in range(j + 1, 4):
                if abs(_cross(q[i], q[j], q[k])) <= _COLLINEAR_TOL * scale * scale:
                    raise DegenerateQuad(f"quad points {i}, {j}, {k} are collinear")
    if segments_intersect(q[0], q[1], q[2], q[3]) or segments_intersect(q[1], q[2], q[3], q[0]):
        raise DegenerateQuad("quad is self-intersecting")
    return q


def _normalizer(pts):
    centroid = pts.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(pts - centroid, axis=1))
    s = np.sqrt(2.0) / mean_dist
    return np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])


def solve_homography(src, dst) -> HomographyMatrix:
    """Solve the projective map sending each ``src[i]`` to ``dst[i]``.

    Both point sets are centred and scaled before the 8x8 linear system is
    solved; the system's condition number is checked on the normalized data.
    """
    src = check_quad(src)
    dst = check_quad(dst)
    ns, nd = _normalizer(src), _normalizer(dst)
    s = apply_homography(ns, src)
    d = apply_homography(nd, dst)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(s, d)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i], b[2 * i + 1] = u, v
    if np.linalg.cond(a) > MAX_CONDITION:
        raise DegenerateQuad("correspondence system is ill-conditioned")
    hn = np.append(np.linalg.solve(a, b), 1.0).reshape(3, 3)
    return HomographyMatrix(np.linalg.inv(nd) @ hn @ ns)


@dataclass(frozen=True)
class WarpPlan:
    """Precomputed bilinear gather for one (homography, sizes) combination.

    ``index`` holds flat source indices of the four neighbours of every output
    pixel and ``weight`` their bilinear weights (all zero outside the pattern).
    """

    index: np.ndarray
    weight: np.ndarray
    in_size: tuple
    out_size: tuple

    @property
    def valid(self) -> np.ndarray:
        return (self.weight.sum(axis=1) > 0).reshape(self.out_size)


def make_warp_plan(h, in_size, out_size) -> WarpPlan:
    """Inverse-map every output pixel centre into the pattern grid."""
    m = h.m if isinstance(h, HomographyMatrix) else np.asarray(h, dtype=np.float64)
    hin, win = map(int, in_size)
    hout, wout = map(int, out_size)
    inv = np.linalg.inv(m)
    ys, xs = np.mgrid[0:hout, 0:wout]
    homog = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)], axis=1).astype(np.float64) @ inv.T
    w = homog[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = homog[:, 0] / w
        v = homog[:, 1] / w
    # Points behind the projective horizon (w <= 0) are not on the pattern plane.
    valid = ((w > 0) & (u >= -_EDGE_TOL) & (u <= win - 1 + _EDGE_TOL)
             & (v >= -_EDGE_TOL) & (v <= hin - 1 + _EDGE_TOL))
    u = np.where(valid, np.clip(u, 0, win - 1), 0.0)
    v = np.where(valid, np.clip(v, 0, hin - 1), 0.0)
    u0 = np.minimum(np.floor(u), max(win - 2, 0)).astype(np.int64)
    v0 = np.minimum(np.floor(v), max(hin - 2, 0)).astype(np.int64)
    u1 = np.minimum(u0 + 1, win - 1)
    v1 = np.minimum(v0 + 1, hin - 1)
    fu = u - u0
    fv = v - v0
    index = np.stack([v0 * win + u0, v0 * win + u1, v1 * win + u0, v1 * win + u1], axis=1)
    weight = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
    weight[~valid] = 0.0
    return WarpPlan(index, weight, (hin, win), (hout, wout))


def apply_warp_plan(pattern: torch.Tensor, plan: WarpPlan) -> torch.Tensor:
    """Gather-and-blend ``pattern`` (H, W, C) through a precomputed plan."""
    if tuple(pattern.shape[:2]) != plan.in_size:
        raise DimensionMismatch(f"pattern is {tuple(pattern.shape[:2])}, plan expects {plan.in_size}")
    channels = pattern.shape[2]
    flat = pattern.reshape(-1, channels)
    idx = torch.from_numpy(plan.index).to(pattern.device)
    wts = torch.from_numpy(plan.weight).to(device=pattern.device, dtype=pattern.dtype)
    out = (flat[idx] * wts.unsqueeze(-1)).sum(dim=1)
    return out.reshape(*plan.out_size, channels)


def warp_pattern(pattern, h, out_size) -> torch.Tensor:
    """Warp an (H, W, C) pattern into an image of size ``out_size``.

    Differentiable with respect to ``pattern``. Output pixels whose inverse
    image falls outside the pattern grid are zero.
    """
    p = torch.as_tensor(pattern)
    if p.ndim == 2:
        p = p.unsqueeze(-1)
    if p.ndim != 3 or p.shape[0] == 0 or p.shape[1] == 0:
        raise DimensionMismatch(f"pattern must be a non-empty (H, W, C) grid, got {tuple(p.shape)}")
    plan = make_warp_plan(h, p.shape[:2], out_size)
    return apply_warp_plan(p, plan)


def pattern_corners(height: int, width: int) -> np.ndarray:
    """Corner pixel centres of an ``height x width`` grid in quad order TL, TR, BR, BL."""
    return np.array([[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]])


def rasterize_polygon(vertices, image_size) -> np.ndarray:
    """Binary mask of pixel centres inside ``vertices`` by the even-odd rule.

    A centre is counted inside when a ray cast towards +x crosses the
    boundary an odd number of times, using half-open edge spans in y.
    """
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
        raise DegeneratePolygon("polygon needs at least 3 (x, y) vertices")
    if abs(polygon_area(v)) <= 1e-12:
        raise DegeneratePolygon("polygon has zero area")
    h, w = map(int, image_size)
    mask = np.zeros((h, w), dtype=np.float64)
    x0 = max(int(np.floor(v[:, 0].min())), 0)
    x1 = min(int(np.ceil(v[:, 0].max())), w - 1)
    y0 = max(int(np.floor(v[:, 1].min())), 0)
    y1 = min(int(np.ceil(v[:, 1].max())), h - 1)
    if x0 > x1 or y0 > y1:
        return mask
    py, px = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
    inside = np.zeros(px.shape, dtype=bool)
    for (xa, ya), (xb, yb) in zip(v, np.roll(v, -1, axis=0)):
        spans = (ya > py) != (yb > py)
        if not spans.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = xa + (py - ya) * (xb - xa) / (yb - ya)
        inside ^= spans & (px < x_cross)
    mask[y0:y1 + 1, x0:x1 + 1] = inside
    return mask


def composite(original, warped_pattern, mask):
    """Blend ``(1 - mask) * original + mask * warped_pattern`` per channel.

    Returns a tensor if either image is a tensor, otherwise a numpy array.
    """
    use_torch = isinstance(original, torch.Tensor) or isinstance(warped_pattern, torch.Tensor)
    if use_torch:
        ref = warped_pattern if isinstance(warped_pattern, torch.Tensor) else original
        orig = torch.as_tensor(original, dtype=ref.dtype, device=ref.device)
        warp = torch.as_tensor(warped_pattern, dtype=ref.dtype, device=ref.device)
        m = torch.as_tensor(mask, dtype=ref.dtype, device=ref.device)
    else:
        orig = np.asarray(original, dtype=np.float64)
        warp = np.asarray(warped_pattern, dtype=np.float64)
        m = np.asarray(mask, dtype=np.float64)
    if tuple(orig.shape) != tuple(warp.shape):
        raise DimensionMismatch(f"original {tuple(orig.shape)} vs pattern {tuple(warp.shape)}")
    if m.ndim == orig.ndim - 1:
        m = m[..., None]
    if tuple(m.shape[:2]) != tuple(orig.shape[:2]) or m.shape[-1] not in (1, orig.shape[-1]):
        raise DimensionMismatch(f"mask {tuple(m.shape)} does not fit image {tuple(orig.shape)}")
    return (1 - m) * orig + m * warp
