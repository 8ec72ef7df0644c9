"""One garment, step by step: anchors, homography, warp, mask, composite.

    python demos/geometry_tour.py --out tour
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from advtee.data import SceneConfig, keypoints_to_quad, synth_scene  # noqa: E402
from advtee.geometry import (apply_homography, composite, pattern_corners, rasterize_polygon,  # noqa: E402
                             solve_homography, warp_pattern)
from advtee.pattern import init_pattern  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="tour")
    ap.add_argument("--seed", type=int, default=4)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    scene = synth_scene(args.seed, SceneConfig(min_persons=1, max_persons=1))
    garment = scene.garments[0]
    quad = keypoints_to_quad(garment.keypoints, garment.corner_labels)
    pattern = init_pattern(50, seed=args.seed)
    corners = pattern_corners(50, 50)
    h = solve_homography(corners, quad)
    err = np.abs(apply_homography(h, corners) - quad).max()
    print(f"garment anchors:\n{np.round(quad, 2)}\ncorner reprojection error {err:.2e}")

    size = scene.image.shape[:2]
    warped = warp_pattern(pattern.pixels.double(), h, size)
    mask = rasterize_polygon(garment.keypoints, size)
    attacked = composite(torch.from_numpy(scene.image).double(), warped, torch.from_numpy(mask))
    print(f"garment covers {int(mask.sum())} of {mask.size} pixels")

    panels = [("scene", scene.image), ("pattern", pattern.numpy()), ("warped", warped.numpy()),
              ("mask", mask), ("attacked", attacked.numpy())]
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(np.clip(img, 0, 1), cmap="gray" if img.ndim == 2 else None, interpolation="nearest")
        ax.set_title(title)
        ax.axis("off")
    axes[0].plot(*np.vstack([quad, quad[:1]]).T, "y-", lw=1)
    fig.tight_layout()
    fig.savefig(out / "geometry_tour.png", dpi=100)
    print(f"wrote {out / 'geometry_tour.png'}")


if __name__ == "__main__":
    main()
