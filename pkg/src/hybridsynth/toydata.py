"""Procedural toy category in the MVTec directory layout.

Each image is a shaded, striped disc on a flat background.  Two synthetic
defect types are drawn onto test images: ``hole`` (a dark pit) and
``scratch`` (a bright line), each with a pixel mask.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import derive_rng

DEFAULT_SPLIT = {"train/good": 10, "test/good": 2, "test/hole": 2, "test/scratch": 2}


def render_object(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (color HxWx3 in [0,1], foreground mask HxW)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = size / 2 + rng.uniform(-0.06, 0.06, 2) * size
    radius = size * rng.uniform(0.30, 0.36)
    r = np.hypot(xx - cx, yy - cy) / radius
    fg = r <= 1.0
    background = np.full((size, size, 3), 0.22) + rng.normal(0, 0.01, (size, size, 1))
    hue = np.array([0.75, 0.55, 0.3]) + rng.uniform(-0.08, 0.08, 3)
    dome = np.sqrt(np.clip(1 - r ** 2, 0, 1))
    angle = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin((xx * np.cos(angle) + yy * np.sin(angle)) * 2 * np.pi / (size / 6))
    shade = 0.45 + 0.45 * dome + 0.1 * stripes
    obj = hue[None, None, :] * shade[..., None]
    color = np.where(fg[..., None], obj, background)
    color = ndimage.gaussian_filter(color, sigma=(0.6, 0.6, 0))
    return np.clip(color, 0, 1), fg


def _inside_point(rng, fg: np.ndarray, margin: int) -> tuple[int, int]:
    core = ndimage.binary_erosion(fg, iterations=margin)
    ys, xs = np.nonzero(core if core.any() else fg)
    i = rng.integers(len(ys))
    return int(ys[i]), int(xs[i])


def draw_defect(rng: np.random.Generator, color: np.ndarray, fg: np.ndarray, kind: str):
    size = color.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "hole":
        rad = size * rng.uniform(0.05, 0.08)
        cy, cx = _inside_point(rng, fg, int(rad) + 1)
        d = np.hypot(xx - cx, yy - cy)
        mask = d <= rad
        depthness = np.clip(1 - d / rad, 0, 1)
        out = color * (1 - 0.85 * depthness[..., None] ** 0.5 * mask[..., None])
    elif kind == "scratch":
        cy, cx = _inside_point(rng, fg, 4)
        angle = rng.uniform(0, np.pi)
        length = size * rng.uniform(0.2, 0.3)
        t = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
        n = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
        mask = (np.abs(t) <= length / 2) & (np.abs(n) <= max(1.0, size / 64)) & fg
        out = np.where(mask[..., None], np.clip(color + 0.55, 0, 1), color)
    else:
        raise ValueError(f"unknown toy defect {kind!r}")
    return np.clip(out, 0, 1), mask


def make_toy_category(root, name: str = "toy", size: int = 64, seed: int = 0,
                      split: dict | None = None) -> Path:
    """Write a toy category (16 images by default) under ``root/name``."""
    split = split or DEFAULT_SPLIT
    cat = Path(root) / name
    for key, count in split.items():
        part, label = key.split("/")
        folder = cat / part / label
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            rng = derive_rng(seed, "toy", name, key, i)
            color, fg = render_object(rng, size)
            if label != "good":
                color, mask = draw_defect(rng, color, fg, label)
                gt = cat / "ground_truth" / label
                gt.mkdir(parents=True, exist_ok=True)
                Image.fromarray((mask * 255).astype(np.uint8)).save(gt / f"{i:03d}_mask.png")
            Image.fromarray(np.round(color * 255).astype(np.uint8)).save(folder / f"{i:03d}.png")
    return cat


def bundled_toy_root() -> Path:
    """Dataset root holding the pre-rendered 16-image ``toy`` category shipped with the package."""
    return Path(__file__).parent / "data"
