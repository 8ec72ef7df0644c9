import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advtee.errors import DimensionMismatch, IoFailure, MissingTexture, NonDivisibleTarget
from advtee.pattern import (AdversarialPattern, block_average, downsample, export_pattern, init_pattern,
                            load_pattern, project)

from conftest import autograd_grad, central_fd, rel_error


def test_random_init_is_seeded():
    a, b = init_pattern(400, "random", seed=7), init_pattern(400, "random", seed=7)
    assert torch.equal(a.pixels, b.pixels)
    assert not torch.equal(a.pixels, init_pattern(400, "random", seed=8).pixels)
    assert a.pixels.shape == (400, 400, 3) and a.base_resolution == 400
    assert float(a.pixels.min()) >= 0 and float(a.pixels.max()) <= 1


def test_texture_init():
    gray = init_pattern(100, "texture", texture=np.full((37, 53, 3), 0.5))
    assert torch.allclose(gray.pixels, torch.tensor(0.5))
    checker = (np.indices((100, 100)).sum(axis=0) % 2).astype(float)
    tex = np.repeat(checker[..., None], 3, axis=2)
    out = init_pattern(50, "texture", texture=tex).numpy()
    oracle = tex.reshape(50, 2, 50, 2, 3).mean(axis=(1, 3))
    np.testing.assert_allclose(out, oracle, atol=1e-7)


def test_init_errors():
    with pytest.raises(MissingTexture):
        init_pattern(50, "texture")
    with pytest.raises(ValueError):
        init_pattern(4)
    with pytest.raises(ValueError):
        init_pattern(50, "plaid")


def test_pattern_must_be_square():
    with pytest.raises(DimensionMismatch):
        AdversarialPattern(torch.zeros(4, 5, 3), 4)


def test_downsample_examples():
    p = init_pattern(40, seed=1)
    assert torch.equal(downsample(p, 40).pixels, p.pixels)
    const = AdversarialPattern(torch.full((400, 400, 3), 0.3), 400)
    assert torch.allclose(downsample(const, 200).pixels, torch.tensor(0.3))
    grid = torch.arange(16, dtype=torch.float64).reshape(4, 4, 1).expand(4, 4, 3)
    out = block_average(grid, 2)[..., 0]
    expected = torch.tensor([[(0 + 1 + 4 + 5) / 4, (2 + 3 + 6 + 7) / 4],
                             [(8 + 9 + 12 + 13) / 4, (10 + 11 + 14 + 15) / 4]], dtype=torch.float64)
    assert torch.equal(out, expected)
    with pytest.raises(NonDivisibleTarget):
        downsample(p, 30)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([(8, 4), (12, 3), (12, 6), (16, 2)]), st.floats(-0.2, 0.2), st.integers(0, 1000))
def test_downsample_commutes_with_shift(sizes, c, seed):
    size, target = sizes
    p = torch.from_numpy(np.random.default_rng(seed).uniform(0.3, 0.7, (size, size, 3)))
    assert torch.allclose(block_average(p + c, target), block_average(p, target) + c, atol=1e-12)


def test_block_average_gradient(rng):
    p = torch.from_numpy(rng.random((6, 6, 3)))
    weights = torch.from_numpy(rng.random((3, 3, 3)))
    f = lambda x: (block_average(x, 3) * weights).sum()
    assert rel_error(autograd_grad(f, p), central_fd(f, p)) < 1e-4


def test_project():
    px = torch.tensor([[[1.3, -0.2, 0.5]] * 8] * 8)
    out = project(AdversarialPattern(px, 8))
    assert torch.equal(out.pixels[0, 0], torch.tensor([1.0, 0.0, 0.5]))
    rand = AdversarialPattern(torch.randn(8, 8, 3, generator=torch.Generator().manual_seed(0)), 8)
    once = project(rand)
    assert torch.equal(project(once).pixels, once.pixels)
    inside = init_pattern(8, seed=3)
    assert torch.equal(project(inside).pixels, inside.pixels)


def test_export_roundtrip(tmp_path):
    from PIL import Image
    zeros = AdversarialPattern(torch.zeros(10, 10, 3), 10)
    ones = AdversarialPattern(torch.ones(10, 10, 3), 10)
    export_pattern(zeros, tmp_path / "z.png")
    export_pattern(ones, tmp_path / "o.png")
    assert np.all(np.asarray(Image.open(tmp_path / "z.png")) == 0)
    assert np.all(np.asarray(Image.open(tmp_path / "o.png")) == 255)
    p = init_pattern(64, seed=5)
    path = export_pattern(p, tmp_path / "sub" / "p.png")
    back = load_pattern(path)
    assert back.pixels.shape == p.pixels.shape
    assert float((back.pixels - p.pixels).abs().max()) <= 1 / 255 + 1e-7


def test_export_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoFailure):
        export_pattern(init_pattern(8), blocker / "p.png")
    with pytest.raises(IoFailure):
        load_pattern(tmp_path / "missing.png")
