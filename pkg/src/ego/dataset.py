"""Procedural shapes dataset: one coloured object on a gradient background."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import atomic_write_text, load_tensor, save_tensor

CATEGORIES = ("disc", "square", "triangle", "star")
IMAGE_SIZE = 32


@dataclass
class ShapeSample:
    image: np.ndarray  # (3, H, W), roughly [-1, 1]
    mask: np.ndarray  # (H, W) bool, object silhouette
    category_id: int
    center: tuple[float, float]
    radius: float
    color: np.ndarray = field(repr=False)


def _pixel_grid(size: int):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="ij")  # (y, x)


def _polygon_mask(ys, xs, verts) -> np.ndarray:
    """Even-odd rule point-in-polygon for pixel centres. ``verts`` is (N, 2) of (y, x)."""
    inside = np.zeros(ys.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        y1, x1 = verts[i]
        y2, x2 = verts[(i + 1) % n]
        crosses = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < x_at)
    return inside


def _regular_vertices(cy, cx, radii, rotation):
    k = len(radii)
    ang = rotation + 2 * np.pi * np.arange(k) / k
    return np.stack([cy - radii * np.cos(ang), cx + radii * np.sin(ang)], axis=1)


def shape_mask(category: str, cy: float, cx: float, r: float, rotation: float = 0.0,
               size: int = IMAGE_SIZE) -> np.ndarray:
    ys, xs = _pixel_grid(size)
    if category == "disc":
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
    if category == "square":
        verts = _regular_vertices(cy, cx, np.full(4, r * np.sqrt(2.0)), rotation + np.pi / 4)
    elif category == "triangle":
        verts = _regular_vertices(cy, cx, np.full(3, r * 1.25), rotation)
    elif category == "star":
        radii = np.tile([r * 1.3, r * 0.55], 5)
        verts = _regular_vertices(cy, cx, radii, rotation)
    else:
        raise ValueError(f"unknown category {category!r}")
    return _polygon_mask(ys, xs, verts)


def _background(rng, size):
    ys, xs = _pixel_grid(size)
    c0 = rng.uniform(-0.9, 0.2, 3)
    c1 = np.clip(c0 + rng.uniform(-0.5, 0.5, 3), -1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = ((np.cos(theta) * (xs - size / 2) + np.sin(theta) * (ys - size / 2)) / size) + 0.5
    return c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp


def _object_color(rng, bg_mean):
    for _ in range(100):
        col = rng.uniform(-1.0, 1.0, 3)
        col[rng.integers(3)] = rng.uniform(0.6, 1.0)
        if np.abs(col - bg_mean).max() > 0.7:
            return col
    return -np.sign(bg_mean)


def render_shape(category_id: int, rng: np.random.Generator, size: int = IMAGE_SIZE,
                 radius: float | None = None, center=None, color=None, rotation=None,
                 background=None) -> ShapeSample:
    """Draw one object of ``CATEGORIES[category_id]``; unset attributes are sampled."""
    category = CATEGORIES[category_id]
    r = rng.uniform(5.5, 9.0) if radius is None else radius
    margin = r + 2
    if center is None:
        center = (rng.uniform(margin, size - margin), rng.uniform(margin, size - margin))
    rot = rng.uniform(0, 2 * np.pi) if rotation is None else rotation
    bg = _background(rng, size) if background is None else background
    col = _object_color(rng, bg.mean(axis=(1, 2))) if color is None else np.asarray(color)
    mask = shape_mask(category, center[0], center[1], r, rot, size)
    img = np.where(mask[None], col[:, None, None], bg).astype(np.float32)
    return ShapeSample(img, mask, category_id, (float(center[0]), float(center[1])), float(r), col)


def generate(n_per_category: int, seed: int, category_ids=None, size: int = IMAGE_SIZE):
    """In-memory dataset: (images (N,3,H,W), labels (N,)). Order is category-major."""
    rng = np.random.default_rng(seed)
    if category_ids is None:
        category_ids = range(len(CATEGORIES))
    images, labels = [], []
    for cid in category_ids:
        for _ in range(n_per_category):
            images.append(render_shape(cid, rng, size).image)
            labels.append(cid)
    return np.stack(images), np.array(labels, dtype=np.int64)


def make_dataset(out_dir, n_per_category: int = 250, seed: int = 0,
                 categories=CATEGORIES) -> Path:
    """Write ``samples/NNNNNN.egot`` files, ``manifest.txt`` and ``categories.txt``."""
    unknown = [c for c in categories if c not in CATEGORIES]
    if unknown or not categories:
        raise ValueError(f"invalid category spec {categories!r}")
    if n_per_category < 1:
        raise ValueError("n_per_category must be positive")
    out = Path(out_dir)
    images, labels = generate(n_per_category, seed, [CATEGORIES.index(c) for c in categories])
    lines = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        rel = f"samples/{i:06d}.egot"
        save_tensor(out / rel, img, name="image")
        lines.append(f"{rel} {lab}")
    atomic_write_text(out / "manifest.txt", "\n".join(lines) + "\n")
    atomic_write_text(out / "categories.txt", "\n".join(CATEGORIES) + "\n")
    return out / "manifest.txt"


def load_manifest(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    images, labels = [], []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rel, cid = line.rsplit(maxsplit=1)
        images.append(load_tensor(path.parent / rel))
        labels.append(int(cid))
    if not images:
        raise ValueError(f"{path}: empty manifest")
    return np.stack(images), np.array(labels, dtype=np.int64)
