"""Plane types, value-range conventions and the fusion kernel.

Generator-facing planes live in the signed range [-1, 1]; everything that is
stored on disk or used as a mask lives in the unit range [0, 1].
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np


class HybridSynthError(Exception):
    pass


class DimensionError(HybridSynthError, ValueError):
    pass


class RangeError(HybridSynthError, ValueError):
    pass


class ConfigError(HybridSynthError, ValueError):
    pass


class ParameterError(HybridSynthError, ValueError):
    pass


class RangeTag(str, enum.Enum):
    UNIT = "unit"
    SIGNED = "signed"
    BINARY = "binary"


class Role(str, enum.Enum):
    COLOR = "color"
    DEPTH = "depth"
    EDGE = "edge"
    MASK = "mask"
    FUSION_MAP = "fusion_map"


class Decoder(str, enum.Enum):
    AHD = "ahd"
    AHE = "ahe"


class GenerationMode(str, enum.Enum):
    RGB_LEVEL = "rgb"
    DEPTH_LEVEL = "depth"

    @property
    def output_channels(self) -> int:
        return 3 if self is GenerationMode.RGB_LEVEL else 1


_BOUNDS = {
    RangeTag.UNIT: (0.0, 1.0),
    RangeTag.SIGNED: (-1.0, 1.0),
    RangeTag.BINARY: (0.0, 1.0),
}

_CHANNELS = {Role.COLOR: 3, Role.DEPTH: 1, Role.EDGE: 1, Role.MASK: 1, Role.FUSION_MAP: 1}


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """An H x W x C array tagged with its value range and semantic role.

    Depth planes produced by the depth-level generator carry C=1 and a color
    role is always C=3.  ``check=False`` skips validation for hot paths that
    construct planes from already validated data.
    """

    data: np.ndarray
    range_tag: RangeTag
    role: Role
    check: bool = True

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "range_tag", RangeTag(self.range_tag))
        object.__setattr__(self, "role", Role(self.role))
        if not self.check:
            return
        if data.ndim != 3 or data.shape[0] == 0 or data.shape[1] == 0:
            raise DimensionError(f"plane must be H x W x C with H, W > 0, got {data.shape}")
        expected = _CHANNELS[self.role]
        if data.shape[2] != expected:
            raise DimensionError(f"{self.role.value} plane needs {expected} channels, got {data.shape[2]}")
        lo, hi = _BOUNDS[self.range_tag]
        if data.size and (not np.all(np.isfinite(data)) or data.min() < lo or data.max() > hi):
            raise RangeError(f"{self.role.value} plane values outside {self.range_tag.value} range [{lo}, {hi}]")
        if self.range_tag is RangeTag.BINARY and not np.all((data == 0) | (data == 1)):
            raise RangeError("binary plane must only hold 0 and 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def hw(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def replace(self, data: np.ndarray, check: bool = True) -> "ImagePlane":
        return ImagePlane(data, self.range_tag, self.role, check=check)

    def equals(self, other: "ImagePlane") -> bool:
        return (
            self.range_tag is other.range_tag
            and self.role is other.role
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class ConditionTriplet:
    color: ImagePlane
    depth: ImagePlane
    edge: ImagePlane

    def __post_init__(self):
        for plane, role in ((self.color, Role.COLOR), (self.depth, Role.DEPTH), (self.edge, Role.EDGE)):
            if plane.role is not role:
                raise DimensionError(f"expected a {role.value} plane, got {plane.role.value}")
        if not (self.color.hw == self.depth.hw == self.edge.hw):
            raise DimensionError(
                f"condition planes disagree in size: {self.color.hw}, {self.depth.hw}, {self.edge.hw}"
            )

    @property
    def hw(self) -> tuple[int, int]:
        return self.color.hw

    def planes(self) -> dict[str, ImagePlane]:
        return {"color": self.color, "depth": self.depth, "edge": self.edge}

    def map(self, fn) -> "ConditionTriplet":
        return ConditionTriplet(fn(self.color), fn(self.depth), fn(self.edge))

    def equals(self, other: "ConditionTriplet") -> bool:
        return all(a.equals(b) for a, b in zip(self.planes().values(), other.planes().values()))


@dataclass(frozen=True)
class GenerationResult:
    anomaly_source: ImagePlane
    fusion_map: ImagePlane
    fused: ImagePlane
    decoder: Decoder


def fuse(content: ImagePlane, source: ImagePlane, fusion_map: ImagePlane) -> ImagePlane:
    """Blend ``source`` into ``content`` with per-pixel weights from ``fusion_map``.

    out = content * (1 - m) + source * m, with a single-channel map broadcast
    over the content channels.
    """
    if content.hw != source.hw or content.hw != fusion_map.hw:
        raise DimensionError(f"fuse needs equal H x W, got {content.hw}, {source.hw}, {fusion_map.hw}")
    if content.channels != source.channels:
        raise DimensionError(
            f"content and source channel counts differ ({content.channels} vs {source.channels})"
        )
    m = fusion_map.data
    if m.shape[2] != 1:
        raise DimensionError("fusion map must be single-channel")
    if m.min() < 0 or m.max() > 1 or not np.all(np.isfinite(m)):
        raise RangeError("fusion map values must lie in [0, 1]")
    out = fuse_arrays(content.data, source.data, m)
    return ImagePlane(out, content.range_tag, content.role, check=False)


def fuse_arrays(content, source, m):
    """Array form of :func:`fuse`; works for numpy arrays and torch tensors alike."""
    return content * (1 - m) + source * m


def convert_range(plane: ImagePlane, target_tag) -> ImagePlane:
    try:
        target = RangeTag(target_tag)
    except ValueError:
        raise ConfigError(f"unknown range tag {target_tag!r}") from None
    src = plane.range_tag
    if src is target:
        return plane
    data = plane.data
    if target is RangeTag.SIGNED:
        out = data * 2.0 - 1.0
    elif src is RangeTag.SIGNED:
        out = (data + 1.0) / 2.0
    else:
        out = data
    if target is RangeTag.SIGNED or src is RangeTag.SIGNED:
        out = np.clip(out, *_BOUNDS[target])
    if target is RangeTag.BINARY:
        out = (out >= 0.5).astype(data.dtype)
    return ImagePlane(out.astype(data.dtype, copy=False), target, plane.role)


def derive_seed(root_seed: int, purpose: str, *keys) -> int:
    """Derive a 63-bit seed from a root seed, a purpose tag and any keys.

    Every random stream in the package comes from here, so a run is fully
    described by its root seed.
    """
    text = "|".join([str(int(root_seed)), purpose, *map(str, keys)])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def derive_rng(root_seed: int, purpose: str, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, purpose, *keys))


def border_median(data: np.ndarray) -> np.ndarray:
    """Per-channel median over the one-pixel frame of an H x W x C array."""
    frame = np.concatenate(
        [data[0, :, :], data[-1, :, :], data[1:-1, 0, :], data[1:-1, -1, :]], axis=0
    )
    return np.median(frame, axis=0)


def unit_plane(data: np.ndarray, role) -> ImagePlane:
    return ImagePlane(np.asarray(data, dtype=np.float32), RangeTag.UNIT, role)
