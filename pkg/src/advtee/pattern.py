"""The learnable adversarial pattern: initialization, pooling, clamping, export."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DimensionMismatch, IoFailure, MissingTexture, NonDivisibleTarget

BASE_RESOLUTION = 400


@dataclass
class AdversarialPattern:
    """Square RGB pixel grid with values in [0, 1], stored as (H, W, 3)."""

    pixels: torch.Tensor
    base_resolution: int
    seed: int = 0

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] != p.shape[1]:
            raise DimensionMismatch(f"pattern must be square (H, W, 3), got {tuple(p.shape)}")
        if p.shape[0] != self.base_resolution:
            raise DimensionMismatch(f"pixels are {p.shape[0]} wide, base_resolution is {self.base_resolution}")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def numpy(self) -> np.ndarray:
        return self.pixels.detach().cpu().numpy()


def _resample(texture: torch.Tensor, size: int) -> torch.Tensor:
    h, w = texture.shape[:2]
    chw = texture.permute(2, 0, 1).unsqueeze(0)
    if h % size == 0 and w % size == 0:
        out = F.avg_pool2d(chw, kernel_size=(h // size, w // size))
    else:
        out = F.interpolate(chw, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0)


def init_pattern(size: int = BASE_RESOLUTION, mode: str = "random", seed: int = 0,
                 texture=None, dtype=torch.float32) -> AdversarialPattern:
    """Create a pattern from seeded uniform noise or by resampling a texture.

    Textures whose sides are multiples of ``size`` are block-averaged; other
    sizes go through antialiased bilinear resampling.
    """
    if size < 8:
        raise ValueError(f"pattern size must be >= 8, got {size}")
    if mode == "random":
        if texture is not None:
            raise ValueError("texture given but mode is 'random'")
        rng = np.random.default_rng(seed)
        pixels = torch.from_numpy(rng.random((size, size, 3))).to(dtype)
    elif mode == "texture":
        if texture is None:
            raise MissingTexture("mode 'texture' requires a texture image")
        tex = torch.as_tensor(np.asarray(texture, dtype=np.float64))
        if tex.ndim == 2:
            tex = tex.unsqueeze(-1).expand(-1, -1, 3)
        pixels = _resample(tex, size).clamp(0, 1).to(dtype).contiguous()
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return AdversarialPattern(pixels, size, seed)


def block_average(pixels: torch.Tensor, target: int) -> torch.Tensor:
    """Differentiable block-mean pooling of a square (H, W, C) grid to ``target``."""
    size = pixels.shape[0]
    if target <= 0 or size % target:
        raise NonDivisibleTarget(f"target {target} does not divide resolution {size}")
    k = size // target
    if k == 1:
        return pixels
    h, w, c = pixels.shape
    return pixels.reshape(target, k, target, k, c).mean(dim=(1, 3))


def downsample(pattern: AdversarialPattern, target: int) -> AdversarialPattern:
    return AdversarialPattern(block_average(pattern.pixels, target), target, pattern.seed)


def project(pattern: AdversarialPattern) -> AdversarialPattern:
    """Clamp pixels to [0, 1]."""
    return AdversarialPattern(pattern.pixels.clamp(0.0, 1.0), pattern.base_resolution, pattern.seed)


def to_uint8(pixels) -> np.ndarray:
    arr = pixels.detach().cpu().numpy() if isinstance(pixels, torch.Tensor) else np.asarray(pixels)
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_pattern(pattern: AdversarialPattern, path) -> Path:
    """Write the pattern as a lossless 8-bit RGB PNG."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(pattern.pixels), mode="RGB").save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot write pattern to {path}: {exc}") from exc
    return path


def load_pattern(path, seed: int = 0) -> AdversarialPattern:
    path = Path(path)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise IoFailure(f"cannot read pattern from {path}: {exc}") from exc
    return AdversarialPattern(torch.from_numpy(arr), arr.shape[0], seed)
