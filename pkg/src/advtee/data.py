"""Annotated person images: JSON manifests, garment quads, synthetic scenes.

Manifest layout (paths relative to the manifest file)::

    {"split": "train",
     "images": [{"path": "img_000.png",
                 "persons": [{"bbox": [cx, cy, w, h]}],
                 "garments": [{"keypoints": [[x, y], ...],
                               "corner_labels": [i_sl, i_sr, i_hr, i_hl]}],
                 "viewpoint": "frontal"}]}
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import BoxTarget
from .errors import DegeneratePolygon, DegenerateQuad, MissingImageFile, SchemaViolation
from .geometry import check_quad, is_simple_polygon, polygon_area, rasterize_polygon

VIEWPOINTS = ("frontal", "side_back", "no_human")
SPLITS = ("train", "val")


@dataclass
class Garment:
    keypoints: np.ndarray
    corner_labels: tuple | None = None


@dataclass
class AnnotatedImage:
    """An RGB image in [0, 1] (H, W, 3) with person boxes and garment outlines."""

    image: np.ndarray
    person_boxes: list = field(default_factory=list)
    garments: list = field(default_factory=list)
    viewpoint_tag: str = "frontal"
    path: str | None = None

    @property
    def size(self) -> tuple:
        return self.image.shape[:2]

    @property
    def garment_keypoints(self) -> list:
        return [g.keypoints for g in self.garments]

    def validate(self):
        if self.viewpoint_tag not in VIEWPOINTS:
            raise SchemaViolation(f"unknown viewpoint {self.viewpoint_tag!r}")
        for k, box in enumerate(self.person_boxes):
            if not box.within_image():
                raise SchemaViolation(f"person box {k} lies outside the image")
        for k, g in enumerate(self.garments):
            kp = np.asarray(g.keypoints, dtype=np.float64)
            if kp.ndim != 2 or kp.shape[1] != 2 or len(kp) < 3:
                raise SchemaViolation(f"garment {k}: keypoints must be >= 3 (x, y) pairs")
            if not is_simple_polygon(kp):
                raise SchemaViolation(f"garment {k}: keypoints do not form a simple polygon")
            if g.corner_labels is not None:
                labels = list(g.corner_labels)
                if len(labels) != 4 or len(set(labels)) != 4 or not all(0 <= i < len(kp) for i in labels):
                    raise SchemaViolation(f"garment {k}: corner_labels must be 4 distinct keypoint indices")


@dataclass
class DatasetManifest:
    split: str
    entries: list

    @property
    def counts(self) -> dict:
        c = Counter(e.viewpoint_tag for e in self.entries)
        return {v: c.get(v, 0) for v in VIEWPOINTS}

    def __len__(self):
        return len(self.entries)


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def save_image(array, path):
    arr = np.round(np.clip(np.asarray(array, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _entry_from_json(raw, root: Path) -> AnnotatedImage:
    if not isinstance(raw, dict) or "path" not in raw:
        raise SchemaViolation("entry must be an object with a 'path'")
    unknown = set(raw) - {"path", "persons", "garments", "viewpoint"}
    if unknown:
        raise SchemaViolation(f"unknown fields {sorted(unknown)}")
    boxes = []
    for person in raw.get("persons", []):
        bbox = person.get("bbox") if isinstance(person, dict) else None
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise SchemaViolation("person bbox must be [cx, cy, w, h]")
        boxes.append(BoxTarget(*map(float, bbox)))
    garments = []
    for g in raw.get("garments", []):
        if not isinstance(g, dict) or "keypoints" not in g:
            raise SchemaViolation("garment must carry 'keypoints'")
        labels = g.get("corner_labels")
        garments.append(Garment(np.asarray(g["keypoints"], dtype=np.float64),
                                tuple(int(i) for i in labels) if labels is not None else None))
    img_path = root / raw["path"]
    if not img_path.is_file():
        raise MissingImageFile(f"image file {img_path} not found")
    entry = AnnotatedImage(load_image(img_path), boxes, garments, raw.get("viewpoint", "frontal"), raw["path"])
    entry.validate()
    return entry


def load_dataset(manifest_path) -> DatasetManifest:
    """Parse and validate a manifest, loading every referenced image.

    All invalid entries are collected and reported together.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise MissingImageFile(f"manifest {manifest_path} not found") from exc
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("images", []), list):
        raise SchemaViolation("manifest must be an object with an 'images' list")
    split = doc.get("split", "train")
    if split not in SPLITS:
        raise SchemaViolation(f"unknown split {split!r}")
    entries, problems = [], []
    missing = None
    for k, raw in enumerate(doc.get("images", [])):
        name = raw.get("path", f"#{k}") if isinstance(raw, dict) else f"#{k}"
        try:
            entries.append(_entry_from_json(raw, manifest_path.parent))
        except MissingImageFile as exc:
            missing = missing or exc
            problems.append(f"entry {k} ({name}): {exc}")
        except (SchemaViolation, DegeneratePolygon, ValueError, TypeError) as exc:
            problems.append(f"entry {k} ({name}): {exc}")
    if problems:
        cls = MissingImageFile if missing is not None and len(problems) == 1 else SchemaViolation
        raise cls("; ".join(problems))
    return DatasetManifest(split, entries)


def write_dataset(manifest: DatasetManifest, manifest_path, image_prefix: str = "img") -> Path:
    """Write images as PNG next to a JSON manifest and return the manifest path."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    images = []
    for k, e in enumerate(manifest.entries):
        rel = e.path or f"{image_prefix}_{k:05d}.png"
        out = manifest_path.parent / rel
        out.parent.mkdir(parents=True, exist_ok=True)
        save_image(e.image, out)
        garments = []
        for g in e.garments:
            item = {"keypoints": np.asarray(g.keypoints).tolist()}
            if g.corner_labels is not None:
                item["corner_labels"] = list(g.corner_labels)
            garments.append(item)
        images.append({"path": rel,
                       "persons": [{"bbox": [b.cx, b.cy, b.w, b.h]} for b in e.person_boxes],
                       "garments": garments,
                       "viewpoint": e.viewpoint_tag})
    manifest_path.write_text(json.dumps({"split": manifest.split, "images": images}, indent=1))
    return manifest_path


def _min_area_rect(points: np.ndarray) -> np.ndarray:
    """Corners (TL, TR, BR, BL) of the minimum-area enclosing rectangle."""
    from scipy.spatial import ConvexHull

    hull = points[ConvexHull(points).vertices]
    best = None
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        edge = b - a
        norm = np.hypot(*edge)
        if norm == 0:
            continue
        u = edge / norm
        v = np.array([-u[1], u[0]])
        pu, pv = hull @ u, hull @ v
        area = np.ptp(pu) * np.ptp(pv)
        if best is None or area < best[0] - 1e-12:
            best = (area, u, v, pu.min(), pu.max(), pv.min(), pv.max())
    _, u, v, umin, umax, vmin, vmax = best
    # Pick the rectangle axis closest to the image x axis as "horizontal",
    # with the second axis pointing down the image.
    if abs(u[0]) < abs(v[0]):
        u, v = v, u
        umin, umax, vmin, vmax = vmin, vmax, umin, umax
    if u[0] < 0:
        u, umin, umax = -u, -umax, -umin
    if v[1] < 0:
        v, vmin, vmax = -v, -vmax, -vmin
    return np.array([umin * u + vmin * v, umax * u + vmin * v, umax * u + vmax * v, umin * u + vmax * v])


def keypoints_to_quad(keypoints, corner_labels=None) -> np.ndarray:
    """Pick the four garment anchors (shoulder-left, shoulder-right, hem-right, hem-left).

    Labelled corners win. Otherwise the keypoints nearest the corners of the
    polygon's minimum-area bounding rectangle are used, taken greedily by
    distance so that the four picks are distinct.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.ndim != 2 or kp.shape[1] != 2 or len(kp) < 4:
        raise DegeneratePolygon("need at least 4 (x, y) keypoints")
    if abs(polygon_area(kp)) <= 1e-12 or not is_simple_polygon(kp):
        raise DegeneratePolygon("keypoints do not form a simple polygon with positive area")
    if corner_labels is not None:
        quad = kp[list(corner_labels)]
    else:
        corners = _min_area_rect(kp)
        dist = np.linalg.norm(corners[:, None, :] - kp[None, :, :], axis=-1)
        chosen = [-1] * 4
        for flat in np.argsort(dist, axis=None, kind="stable"):
            c, k = divmod(int(flat), len(kp))
            if chosen[c] < 0 and k not in chosen:
                chosen[c] = k
            if min(chosen) >= 0:
                break
        quad = kp[chosen]
    try:
        return check_quad(quad)
    except DegenerateQuad as exc:
        raise DegeneratePolygon(f"garment anchors are degenerate: {exc}") from exc


@dataclass
class SceneConfig:
    """Synthetic scene parameters. Sizes are in pixels, angles in degrees."""

    image_size: int = 112
    min_persons: int = 0
    max_persons: int = 2
    person_height: tuple = (64.0, 104.0)
    aspect: tuple = (0.32, 0.45)
    max_rotation: float = 60.0
    quad_jitter: float = 0.08
    max_distractors: int = 2
    points_per_edge: int = 4


_SKIN = np.array([[0.96, 0.80, 0.69], [0.88, 0.67, 0.52], [0.78, 0.57, 0.42],
                  [0.60, 0.42, 0.30], [0.42, 0.28, 0.20]])


def _rot(deg):
    t = np.deg2rad(deg)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def _edge_points(quad: np.ndarray, per_edge: int) -> np.ndarray:
    pts = []
    for a, b in zip(quad, np.roll(quad, -1, axis=0)):
        for s in np.arange(per_edge) / per_edge:
            pts.append(a + s * (b - a))
    return np.asarray(pts)


def _background(rng, size):
    base = rng.uniform(0.15, 0.85, 3)
    tilt = rng.uniform(-0.25, 0.25, (2, 3))
    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    img = base + xx[..., None] * tilt[0] + yy[..., None] * tilt[1]
    img = img + rng.normal(0, 0.03, (size, size, 3))
    return np.clip(img, 0, 1)


def _stripes(rng, shape, axis, c1, c2):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    period = rng.uniform(3, 9)
    along = (xx * axis[1] - yy * axis[0]) if rng.random() < 0.5 else (xx * axis[0] + yy * axis[1])
    return np.where(((along / period) % 2 < 1)[..., None], c1, c2)


def _garment_fill(rng, mask_shape, quad_pts):
    """Plain cloth: a solid colour or two-colour stripes aligned with the garment."""
    h, w = mask_shape
    color = rng.uniform(0, 1, 3)
    if rng.random() < 0.5:
        return np.broadcast_to(color, (h, w, 3))
    axis = quad_pts[1] - quad_pts[0]
    return _stripes(rng, mask_shape, axis / np.linalg.norm(axis), color, rng.uniform(0, 1, 3))


def _render_person(rng, cfg: SceneConfig):
    """Person parts in local coordinates centred on the body.

    Returns ``(parts, head, head_r, garment)`` where ``parts`` holds the torso
    and two leg polygons. The garment quad sits inside the torso.
    """
    height = rng.uniform(*cfg.person_height)
    head_r = 0.13 * height
    body_h = height - 2 * head_r
    body_w = rng.uniform(*cfg.aspect) * height
    x0, x1, y0, y1 = -body_w / 2, body_w / 2, -body_h / 2, body_h / 2
    waist = y0 + 0.6 * body_h
    gap = 0.2 * body_w
    torso = np.array([[x0, y0], [x1, y0], [x1, waist], [x0, waist]])
    left = np.array([[x0, waist], [-gap / 2, waist], [-gap / 2, y1], [x0, y1]])
    right = np.array([[gap / 2, waist], [x1, waist], [x1, y1], [gap / 2, y1]])
    head = np.array([0.0, y0 - head_r * 0.9])
    inset_x, inset_y = 0.08 * body_w, 0.04 * body_h
    top, hem = y0 + inset_y, waist - inset_y
    garment = np.array([[x0 + inset_x, top], [x1 - inset_x, top], [x1 - inset_x, hem], [x0 + inset_x, hem]])
    jitter = cfg.quad_jitter * min(body_w, body_h)
    # Corners stay >= 1 px inside the torso, so the pixel box always contains them.
    garment = garment + rng.uniform(-1, 1, (4, 2)) * max(min(jitter, inset_x - 1.0, inset_y - 1.0), 0.0)
    return [torso, left, right], head, head_r, garment


def _person_pixels(parts, head, head_r, size):
    mask = np.zeros((size, size), dtype=bool)
    for poly in parts:
        mask |= rasterize_polygon(poly, (size, size)).astype(bool)
    yy, xx = np.mgrid[0:size, 0:size]
    mask |= (xx - head[0]) ** 2 + (yy - head[1]) ** 2 <= head_r ** 2
    return mask


def _pixel_box(mask: np.ndarray, size: int) -> BoxTarget:
    ys, xs = np.nonzero(mask)
    # Normalized coordinates run over pixel edges: pixel j covers [j, j + 1] / size.
    x1, x2 = xs.min(), xs.max() + 1.0
    y1, y2 = ys.min(), ys.max() + 1.0
    return BoxTarget((x1 + x2) / 2 / size, (y1 + y2) / 2 / size, (x2 - x1) / size, (y2 - y1) / size)


def synth_scene(rng_seed, config: SceneConfig | None = None) -> AnnotatedImage:
    """Render a scene of stick-simple people wearing quadrilateral garments.

    Each person is a torso, two legs and a head, rotated in-plane and
    placed without overlapping other people. Boxes are the exact extent of
    the rendered person pixels. Distractors are plain shapes that are not
    people.
    """
    cfg = config or SceneConfig()
    rng = np.random.default_rng(rng_seed)
    size = cfg.image_size
    image = _background(rng, size)
    n_persons = int(rng.integers(cfg.min_persons, cfg.max_persons + 1))
    occupied = np.zeros((size, size), dtype=bool)
    boxes, garments = [], []
    for _ in range(n_persons):
        for _attempt in range(30):
            parts, head, head_r, garment = _render_person(rng, cfg)
            rot = _rot(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
            parts, head, garment = [p @ rot.T for p in parts], rot @ head, garment @ rot.T
            pts = np.vstack(parts + [head - head_r, head + head_r])
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            margin = 1.0
            if np.any(hi - lo > size - 2 * margin):
                continue
            centre = rng.uniform(margin - lo, size - margin - hi)
            parts, head, garment = [p + centre for p in parts], head + centre, garment + centre
            mask = _person_pixels(parts, head, head_r, size)
            grown = np.zeros_like(occupied)
            ys, xs = np.nonzero(mask)
            grown[max(ys.min() - 2, 0):ys.max() + 3, max(xs.min() - 2, 0):xs.max() + 3] = True
            if (grown & occupied).any():
                continue
            occupied |= grown
            torso = rasterize_polygon(parts[0], (size, size)).astype(bool)
            legs = mask & ~torso
            head_mask = _person_pixels([], head, head_r, size) & ~torso
            legs &= ~head_mask
            image[torso] = rng.uniform(0, 1, 3)
            image[legs] = rng.uniform(0.0, 0.35, 3)
            image[head_mask] = _SKIN[rng.integers(len(_SKIN))] + rng.uniform(-0.05, 0.05, 3)
            keypoints = _edge_points(garment, cfg.points_per_edge)
            gmask = rasterize_polygon(keypoints, (size, size)).astype(bool)
            fill = _garment_fill(rng, (size, size), garment)
            image[gmask] = fill[gmask]
            boxes.append(_pixel_box(mask, size))
            step = cfg.points_per_edge
            garments.append(Garment(keypoints, (0, step, 2 * step, 3 * step)))
            break
    for _ in range(int(rng.integers(0, cfg.max_distractors + 1))):
        _draw_distractor(rng, image, occupied, size)
    tag = "frontal" if boxes else "no_human"
    # Quantized to 8-bit levels so scenes survive a PNG round trip unchanged.
    pixels = (np.round(np.clip(image, 0, 1) * 255) / 255).astype(np.float32)
    return AnnotatedImage(pixels, boxes, garments, tag)


def _draw_distractor(rng, image, occupied, size):
    """A rectangle or ellipse filled with a solid colour, stripes or pixel noise."""
    for _attempt in range(20):
        w, h = rng.uniform(8, 30, 2)
        cx, cy = rng.uniform(w / 2 + 1, size - w / 2 - 1), rng.uniform(h / 2 + 1, size - h / 2 - 1)
        yy, xx = np.mgrid[0:size, 0:size]
        if rng.random() < 0.5:
            mask = (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)
        else:
            mask = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1
        if (mask & occupied).any() or not mask.any():
            continue
        kind = rng.integers(3)
        if kind == 0:
            fill = np.broadcast_to(rng.uniform(0, 1, 3), (size, size, 3))
        elif kind == 1:
            t = rng.uniform(0, np.pi)
            fill = _stripes(rng, (size, size), np.array([np.cos(t), np.sin(t)]),
                            rng.uniform(0, 1, 3), rng.uniform(0, 1, 3))
        else:
            fill = rng.uniform(0, 1, (size, size, 3))
        image[mask] = fill[mask]
        occupied |= mask
        return


def synth_dataset(n: int, seed=0, config: SceneConfig | None = None, split: str = "train") -> DatasetManifest:
    """``n`` scenes with per-scene seeds derived from ``seed`` (an int or a sequence of ints)."""
    seeds = np.random.SeedSequence(seed).spawn(n)
    entries = []
    for k, s in enumerate(seeds):
        e = synth_scene(s, config)
        e.path = f"{split}_{k:05d}.png"
        entries.append(e)
    return DatasetManifest(split, entries)


def synth_splits(n_train: int, n_val: int, seed: int = 0, config: SceneConfig | None = None):
    """Disjoint train and validation sets from one seed.

    The validation scenes come from the independent stream ``[seed, 1]``.
    """
    return (synth_dataset(n_train, seed, config, "train"),
            synth_dataset(n_val, [seed, 1], config, "val"))
