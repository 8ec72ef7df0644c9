import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from matplotlib.path import Path as MplPath

from advtee.errors import DegeneratePolygon, DegenerateQuad, DimensionMismatch
from advtee.geometry import (HomographyMatrix, apply_homography, composite, rasterize_polygon, solve_homography,
                             warp_pattern)

from conftest import autograd_grad, central_fd, rel_error

UNIT = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)


def random_quad(rng, center=(50, 50), scale=40, jitter=0.3):
    base = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    theta = rng.uniform(-math.pi, math.pi)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    pts = (base + rng.uniform(-jitter, jitter, (4, 2))) @ rot.T
    return pts * scale + np.asarray(center)


# --- oracles -----------------------------------------------------------------

def bilinear_oracle(pattern: np.ndarray, m: np.ndarray, out_size):
    """Per-pixel inverse map and 4-neighbour bilinear sample, written out longhand."""
    hin, win, c = pattern.shape
    inv = np.linalg.inv(m)
    out = np.zeros((*out_size, c))
    for i in range(out_size[0]):
        for j in range(out_size[1]):
            xp, yp, wp = inv @ np.array([j, i, 1.0])
            if wp <= 0:
                continue
            u, v = xp / wp, yp / wp
            if not (-1e-9 <= u <= win - 1 + 1e-9 and -1e-9 <= v <= hin - 1 + 1e-9):
                continue
            u0, v0 = math.floor(u), math.floor(v)
            for du in (0, 1):
                for dv in (0, 1):
                    uu, vv = u0 + du, v0 + dv
                    wu = 1 - abs(u - uu)
                    wv = 1 - abs(v - vv)
                    if wu <= 0 or wv <= 0:
                        continue
                    if 0 <= uu < win and 0 <= vv < hin:
                        out[i, j] += wu * wv * pattern[vv, uu]
    return out


def pnpoly(vertices, x, y) -> bool:
    """Classic even-odd crossing test for a single point."""
    inside = False
    n = len(vertices)
    for k in range(n):
        xi, yi = vertices[k]
        xj, yj = vertices[k - 1]
        if (yi > y) != (yj > y) and x < (xj - xi) * (y - yi) / (yj - yi) + xi:
            inside = not inside
    return inside


# --- homography ----------------------------------------------------------------

def test_identity_homography():
    h = solve_homography(UNIT, UNIT)
    np.testing.assert_allclose(h.m, np.eye(3), atol=1e-12)


def test_translation_homography():
    h = solve_homography(UNIT, UNIT + [5, 3])
    expected = np.array([[1, 0, 5], [0, 1, 3], [0, 0, 1]], dtype=float)
    np.testing.assert_allclose(h.m, expected, atol=1e-12)


def test_random_quads_reproject(rng):
    for _ in range(200):
        src, dst = random_quad(rng), random_quad(rng, center=(200, 150), scale=90)
        h = solve_homography(src, dst)
        assert np.max(np.abs(h.apply(src) - dst)) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_reprojection_property(seed):
    rng = np.random.default_rng(seed)
    src = random_quad(rng, scale=rng.uniform(2, 300), center=rng.uniform(-100, 500, 2))
    dst = random_quad(rng, scale=rng.uniform(2, 300), center=rng.uniform(-100, 500, 2))
    h = solve_homography(src, dst)
    assert np.max(np.abs(apply_homography(h.m, src) - dst)) < 1e-6
    assert abs(np.linalg.det(h.m)) > 1e-9
    assert h.m[2, 2] == pytest.approx(1.0)


@pytest.mark.parametrize("quad", [
    [[0, 0], [1, 1], [2, 2], [0, 1]],          # three collinear
    [[0, 0], [1, 1], [1, 0], [0, 1]],          # bow-tie
    [[0, 0], [0, 0], [1, 1], [0, 1]],          # repeated point
])
def test_degenerate_quads(quad):
    with pytest.raises(DegenerateQuad):
        solve_homography(quad, UNIT)
    with pytest.raises(DegenerateQuad):
        solve_homography(UNIT, quad)


# --- warping -------------------------------------------------------------------

def test_warp_identity_is_exact(rng):
    p = rng.random((5, 7, 3))
    out = warp_pattern(torch.from_numpy(p), HomographyMatrix(np.eye(3)), (5, 7))
    assert torch.equal(out, torch.from_numpy(p))


def test_warp_integer_translation():
    p = np.arange(16, dtype=float).reshape(4, 4, 1) + 1
    m = np.array([[1, 0, 1], [0, 1, 0], [0, 0, 1]], dtype=float)
    out = warp_pattern(torch.from_numpy(p), m, (4, 4)).numpy()
    expected = np.zeros_like(p)
    expected[:, 1:] = p[:, :-1]
    np.testing.assert_array_equal(out, expected)


def test_warp_rotation_2x2_matches_oracle():
    p = np.array([[[1.0], [2.0]], [[3.0], [4.0]]])
    m = np.array([[0, -1, 1], [1, 0, 0], [0, 0, 1]], dtype=float)  # 90 deg about the grid centre
    out = warp_pattern(torch.from_numpy(p), m, (2, 2)).numpy()
    np.testing.assert_allclose(out, bilinear_oracle(p, m, (2, 2)), atol=1e-9)
    np.testing.assert_allclose(out[..., 0], np.rot90(p[..., 0], k=-1), atol=1e-12)


def test_warp_fractional_matches_oracle(rng):
    p = rng.random((4, 4, 3))
    c, s = math.cos(0.4), math.sin(0.4)
    m = np.array([[c, -s, 1.3], [s, c, -0.2], [0.01, -0.02, 1.0]])
    out = warp_pattern(torch.from_numpy(p), m, (6, 5)).numpy()
    np.testing.assert_allclose(out, bilinear_oracle(p, m, (6, 5)), atol=1e-9)


def test_warp_random_homographies_match_oracle(rng):
    for _ in range(10):
        p = rng.random((6, 6, 3))
        src = np.array([[0, 0], [5, 0], [5, 5], [0, 5]], dtype=float)
        h = solve_homography(src, random_quad(rng, center=(6, 6), scale=5))
        out = warp_pattern(torch.from_numpy(p), h, (12, 12)).numpy()
        np.testing.assert_allclose(out, bilinear_oracle(p, h.m, (12, 12)), atol=1e-9)


def test_warp_is_linear(rng):
    h = solve_homography(np.array([[0, 0], [7, 0], [7, 7], [0, 7]], float), random_quad(rng, (10, 10), 8))
    p1, p2 = torch.from_numpy(rng.random((8, 8, 3))), torch.from_numpy(rng.random((8, 8, 3)))
    a, b = 0.7, -1.9
    lhs = warp_pattern(a * p1 + b * p2, h, (20, 20))
    rhs = a * warp_pattern(p1, h, (20, 20)) + b * warp_pattern(p2, h, (20, 20))
    assert torch.max(torch.abs(lhs - rhs)) < 1e-6


def test_warp_gradient_matches_finite_differences(rng):
    h = solve_homography(np.array([[0, 0], [5, 0], [5, 5], [0, 5]], float), random_quad(rng, (7, 7), 6))
    p = torch.from_numpy(rng.random((6, 6, 3)))
    f = lambda x: warp_pattern(x, h, (14, 14)).sum()
    assert rel_error(autograd_grad(f, p), central_fd(f, p, 1e-4)) < 1e-4


def test_warp_outside_is_zero():
    p = torch.ones(4, 4, 1, dtype=torch.float64)
    m = np.array([[1, 0, 10], [0, 1, 10], [0, 0, 1]], dtype=float)
    assert torch.count_nonzero(warp_pattern(p, m, (8, 8))) == 0


# --- rasterization -------------------------------------------------------------

def test_full_rectangle_mask():
    mask = rasterize_polygon([[-0.5, -0.5], [9.5, -0.5], [9.5, 7.5], [-0.5, 7.5]], (8, 10))
    assert mask.shape == (8, 10) and np.all(mask == 1)


def test_two_vertices_rejected():
    with pytest.raises(DegeneratePolygon):
        rasterize_polygon([[0, 0], [3, 3]], (4, 4))


def test_zero_area_rejected():
    with pytest.raises(DegeneratePolygon):
        rasterize_polygon([[0, 0], [1, 1], [2, 2]], (4, 4))


def test_triangle_matches_pnpoly(rng):
    for _ in range(30):
        tri = rng.uniform(-2, 18, (3, 2))
        mask = rasterize_polygon(tri, (16, 16))
        oracle = np.array([[pnpoly(tri, j, i) for j in range(16)] for i in range(16)], dtype=float)
        np.testing.assert_array_equal(mask, oracle)
        assert set(np.unique(mask)) <= {0.0, 1.0}


def test_triangle_on_pixel_centres_matches_pnpoly():
    tri = np.array([[2.0, 1.0], [13.0, 4.0], [5.0, 14.0]])
    mask = rasterize_polygon(tri, (16, 16))
    oracle = np.array([[pnpoly(tri, j, i) for j in range(16)] for i in range(16)], dtype=float)
    np.testing.assert_array_equal(mask, oracle)


def test_random_polygons_match_matplotlib(rng):
    for _ in range(20):
        n = rng.integers(5, 12)
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        rad = rng.uniform(3, 8, n)
        poly = np.stack([8 + rad * np.cos(ang), 8 + rad * np.sin(ang)], axis=1) + rng.uniform(-0.3, 0.3, 2)
        mask = rasterize_polygon(poly, (16, 16))
        yy, xx = np.mgrid[0:16, 0:16]
        ref = MplPath(poly).contains_points(np.stack([xx.ravel(), yy.ravel()], 1)).reshape(16, 16)
        np.testing.assert_array_equal(mask.astype(bool), ref)


# --- compositing ---------------------------------------------------------------

def test_composite_extremes(rng):
    orig, pat = rng.random((5, 6, 3)), rng.random((5, 6, 3))
    np.testing.assert_array_equal(composite(orig, pat, np.zeros((5, 6))), orig)
    np.testing.assert_array_equal(composite(orig, pat, np.ones((5, 6))), pat)


def test_composite_left_half():
    orig = np.full((4, 6, 3), 0.2)
    pat = np.full((4, 6, 3), 0.9)
    mask = np.zeros((4, 6))
    mask[:, :3] = 1
    out = composite(orig, pat, mask)
    assert np.all(out[:, :3] == 0.9) and np.all(out[:, 3:] == 0.2)


def test_composite_partition(rng):
    i, p = rng.random((7, 7, 3)), rng.random((7, 7, 3))
    m = (rng.random((7, 7)) > 0.5).astype(float)
    np.testing.assert_allclose(composite(i, p, m) + composite(p, i, m), i + p, atol=1e-15)


def test_composite_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        composite(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.zeros((4, 4)))
    with pytest.raises(DimensionMismatch):
        composite(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((3, 4)))


def test_composite_gradient(rng):
    orig = torch.from_numpy(rng.random((5, 5, 3)))
    mask = (rng.random((5, 5)) > 0.4).astype(float)
    weights = torch.from_numpy(rng.random((5, 5, 3)))
    f = lambda p: (composite(orig, p, mask) * weights).sum()
    p = torch.from_numpy(rng.random((5, 5, 3)))
    assert rel_error(autograd_grad(f, p), central_fd(f, p)) < 1e-4
