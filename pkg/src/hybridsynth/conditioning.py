"""Edge and depth condition extractors.

The built-in extractors are deterministic image-processing stand-ins so the
pipeline runs offline.  Pretrained detectors plug in either through the
``hybridsynth.extractors`` entry-point group or as an external command that
turns a color image file into a single-channel plane file.
"""
from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
from importlib import metadata
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import ConfigError, DimensionError, ImagePlane, RangeTag, Role

log = logging.getLogger(__name__)

ENTRY_POINT_GROUP = "hybridsynth.extractors"


class EdgeExtractor(Protocol):
    name: str
    version: str
    granularity: int

    def __call__(self, color: ImagePlane) -> ImagePlane: ...


class DepthEstimator(Protocol):
    name: str
    version: str

    def __call__(self, color: ImagePlane) -> ImagePlane: ...


def luminance(color: np.ndarray) -> np.ndarray:
    return color[..., 0] * 0.299 + color[..., 1] * 0.587 + color[..., 2] * 0.114


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant array maps to 0.5."""
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 1e-12:
        return np.full_like(x, 0.5)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def _check_color(color: ImagePlane):
    if color.role is not Role.COLOR or color.range_tag is not RangeTag.UNIT:
        raise DimensionError("extractors take a 3-channel unit-range color plane")


class GradientEdge:
    """Gradient magnitude of smoothed luminance, scaled so the maximum is 1."""

    name = "gradient"
    granularity = 1

    def __init__(self, sigma: float = 1.0):
        self.sigma = float(sigma)
        self.version = f"gradient-v1-sigma{self.sigma:g}"

    def __call__(self, color: ImagePlane) -> ImagePlane:
        _check_color(color)
        lum = luminance(color.data.astype(np.float64))
        if self.sigma > 0:
            lum = ndimage.gaussian_filter(lum, self.sigma, mode="nearest")
        gy = ndimage.sobel(lum, axis=0, mode="nearest")
        gx = ndimage.sobel(lum, axis=1, mode="nearest")
        mag = np.hypot(gx, gy)
        peak = mag.max()
        if peak > 1e-12:
            mag = mag / peak
        else:
            mag = np.zeros_like(mag)
        return ImagePlane(mag.astype(np.float32), RangeTag.UNIT, Role.EDGE)


class LuminanceDepth:
    """Smoothed luminance, min-max normalized, as a pseudo depth plane."""

    name = "luminance"

    def __init__(self, sigma: float = 1.0):
        self.sigma = float(sigma)
        self.version = f"luminance-v1-sigma{self.sigma:g}"

    def __call__(self, color: ImagePlane) -> ImagePlane:
        _check_color(color)
        lum = luminance(color.data.astype(np.float64))
        if self.sigma > 0:
            lum = ndimage.gaussian_filter(lum, self.sigma, mode="nearest")
        return ImagePlane(minmax_normalize(lum).astype(np.float32), RangeTag.UNIT, Role.DEPTH)


class CommandExtractor:
    """Run an external program that maps a color image file to a plane file.

    ``template`` is a command line with ``{input}`` and ``{output}``
    placeholders.  The output may be a ``.npy`` array or a single-channel
    image; it is min-max normalized unless already within [0, 1].
    """

    granularity = 1

    def __init__(self, template: str, role: Role, version: str | None = None, suffix: str = ".npy"):
        if "{input}" not in template or "{output}" not in template:
            raise ConfigError("command template needs {input} and {output} placeholders")
        self.template = template
        self.role = Role(role)
        self.name = "command"
        self.version = version or f"command:{template}"
        self.suffix = suffix

    def __call__(self, color: ImagePlane) -> ImagePlane:
        _check_color(color)
        with tempfile.TemporaryDirectory() as tmp:
            src = Path(tmp) / "input.png"
            dst = Path(tmp) / f"output{self.suffix}"
            Image.fromarray(np.round(color.data * 255).astype(np.uint8)).save(src)
            cmd = self.template.format(input=shlex.quote(str(src)), output=shlex.quote(str(dst)))
            subprocess.run(cmd, shell=True, check=True, capture_output=True)
            plane = read_plane_file(dst)
        if plane.shape != color.hw:
            raise DimensionError(f"extractor produced {plane.shape}, expected {color.hw}")
        if plane.min() < 0 or plane.max() > 1:
            plane = minmax_normalize(plane)
        return ImagePlane(plane.astype(np.float32), RangeTag.UNIT, self.role)


def read_plane_file(path: Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float64)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im).astype(np.float64)
            if im.mode in ("L", "RGB", "RGBA", "P"):
                arr = arr / 255.0
            elif im.mode.startswith("I;16") or im.mode == "I":
                arr = arr / 65535.0
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr


def _plugin(name: str):
    try:
        eps = metadata.entry_points(group=ENTRY_POINT_GROUP)
    except TypeError:  # pragma: no cover - python < 3.10 API
        eps = metadata.entry_points().get(ENTRY_POINT_GROUP, [])
    for ep in eps:
        if ep.name == name:
            return ep.load()
    return None


def _resolve(spec: str, role: Role, fallback):
    if spec in ("", "default", fallback.name):
        return fallback
    if spec.startswith("cmd:"):
        return CommandExtractor(spec[4:], role)
    factory = _plugin(spec)
    if factory is None:
        log.warning("extractor backend %r unavailable, using built-in %s", spec, fallback.name)
        return fallback
    try:
        return factory()
    except Exception as exc:  # plugin failures must not stop the pipeline
        log.warning("extractor backend %r failed to load (%s), using built-in %s", spec, exc, fallback.name)
        return fallback


def get_edge_extractor(spec: str = "gradient", sigma: float = 1.0) -> EdgeExtractor:
    """Resolve a config string: ``gradient``, ``cmd:<template>`` or a plugin name (e.g. ``pidinet``)."""
    return _resolve(spec, Role.EDGE, GradientEdge(sigma))


def get_depth_estimator(spec: str = "luminance", sigma: float = 1.0) -> DepthEstimator:
    """Resolve a config string: ``luminance``, ``cmd:<template>`` or a plugin name."""
    return _resolve(spec, Role.DEPTH, LuminanceDepth(sigma))


def extract_edge(color: ImagePlane, extractor: EdgeExtractor | None = None) -> ImagePlane:
    return (extractor or GradientEdge())(color)


def estimate_depth(color: ImagePlane, estimator: DepthEstimator | None = None) -> ImagePlane:
    return (estimator or LuminanceDepth())(color)
