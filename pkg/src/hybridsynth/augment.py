"""Training augmentations and the input/target pairing used to build training pairs.

Coordinates in :class:`TpsWarp` are normalized: ``x = col / (W - 1)`` and
``y = row / (H - 1)``, so (0, 0) is the top-left pixel center and (1, 1) the
bottom-right one.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (ConditionTriplet, Decoder, GenerationMode, ImagePlane, ParameterError,
                   border_median)

log = logging.getLogger(__name__)

# Control points span the region box so the spline interpolates rather than extrapolates inside it.
GRID_FRACTIONS = (0.0, 0.5, 1.0)


def tps_kernel(r2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r^2, with U(0) = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r2 * np.log(r2)
    return np.where(r2 > 0, out, 0.0)


@dataclass(frozen=True)
class TpsCoefficients:
    centers: np.ndarray  # (n, 2)
    weights: np.ndarray  # (n, 2) radial weights per output coordinate
    affine: np.ndarray  # (3, 2): rows are [1, x, y] coefficients

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        d2 = ((points[:, None, :] - self.centers[None, :, :]) ** 2).sum(-1)
        basis = np.concatenate([np.ones((len(points), 1)), points], axis=1)
        return tps_kernel(d2) @ self.weights + basis @ self.affine


def fit_tps(src: np.ndarray, dst: np.ndarray) -> TpsCoefficients:
    """Fit f with f(src_i) = dst_i using the r^2 log r^2 kernel plus an affine term."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 3:
        raise ParameterError("TPS needs at least three control points")
    if len(np.unique(np.round(src, 12), axis=0)) != n:
        raise ParameterError("duplicated TPS control points")
    d2 = ((src[:, None, :] - src[None, :, :]) ** 2).sum(-1)
    P = np.concatenate([np.ones((n, 1)), src], axis=1)
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = tps_kernel(d2)
    L[:n, n:] = P
    L[n:, :n] = P.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    if np.linalg.cond(L) > 1e12:
        raise ParameterError("singular TPS system (collinear or duplicated control points)")
    sol = np.linalg.solve(L, rhs)
    return TpsCoefficients(src, sol[:n], sol[n:])


@dataclass(frozen=True)
class TpsWarp:
    """A local warp: a 3x3 control grid inside ``region`` shifted by ``displacements``.

    ``region`` is (x0, y0, x1, y1) in normalized coordinates; displacements
    are (dx, dy) per control point in the same units.
    """

    region: tuple[float, float, float, float]
    displacements: tuple[tuple[float, float], ...]
    feather: float = 4.0

    @property
    def control_points(self) -> np.ndarray:
        x0, y0, x1, y1 = self.region
        return np.array([(x0 + fx * (x1 - x0), y0 + fy * (y1 - y0))
                         for fy in GRID_FRACTIONS for fx in GRID_FRACTIONS])

    @property
    def targets(self) -> np.ndarray:
        return self.control_points + np.asarray(self.displacements, dtype=np.float64)

    def validate(self, max_fraction: float | None = None):
        x0, y0, x1, y1 = self.region
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise ParameterError(f"TPS region {self.region} is not a box inside the unit square")
        if len(self.displacements) != 9:
            raise ParameterError("TPS warp needs 9 displacements")
        if max_fraction is not None:
            d = np.abs(np.asarray(self.displacements))
            bound = max_fraction * np.array([x1 - x0, y1 - y0])
            if np.any(d > bound + 1e-12):
                raise ParameterError("TPS displacement exceeds its bound")

    def to_dict(self) -> dict:
        return {"region": list(self.region), "displacements": [list(d) for d in self.displacements],
                "feather": self.feather}

    @classmethod
    def from_dict(cls, d: dict) -> "TpsWarp":
        return cls(tuple(d["region"]), tuple(tuple(x) for x in d["displacements"]), d.get("feather", 4.0))

    @classmethod
    def identity(cls, region=(0.25, 0.25, 0.75, 0.75)) -> "TpsWarp":
        return cls(tuple(region), ((0.0, 0.0),) * 9)


def _pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys


def region_weight(warp: TpsWarp, h: int, w: int) -> np.ndarray:
    """1 inside the region box, falling linearly to 0 over ``feather`` pixels outside it."""
    x0, y0, x1, y1 = warp.region
    xs, ys = _pixel_grid(h, w)
    dx = np.maximum(np.maximum(x0 * (w - 1) - xs, xs - x1 * (w - 1)), 0.0)
    dy = np.maximum(np.maximum(y0 * (h - 1) - ys, ys - y1 * (h - 1)), 0.0)
    dist = np.maximum(dx, dy)
    if warp.feather <= 0:
        return (dist <= 0).astype(np.float64)
    return np.clip(1.0 - dist / warp.feather, 0.0, 1.0)


def solve_tps(warp: TpsWarp, shape: tuple[int, int]) -> np.ndarray:
    """Dense backward map: an (H, W, 2) array of source (x, y) pixel coordinates.

    Output pixel p samples the input at the returned location.  Inside the
    region this is the TPS f with f(c_i) = c_i + d_i; outside the region plus
    feather band it is the identity.
    """
    h, w = shape
    warp.validate()
    xs, ys = _pixel_grid(h, w)
    scale = np.array([max(w - 1, 1), max(h - 1, 1)], dtype=np.float64)
    mapping = np.stack([xs, ys], axis=-1)
    disp = np.asarray(warp.displacements, dtype=np.float64)
    if not disp.any():
        return mapping
    tps = fit_tps(warp.control_points, warp.targets)
    weight = region_weight(warp, h, w)
    active = weight > 0
    pts = mapping[active] / scale
    moved = tps(pts) * scale
    mapping[active] = mapping[active] + weight[active][:, None] * (moved - mapping[active])
    return mapping


def bilinear_sample(data: np.ndarray, mapping: np.ndarray) -> np.ndarray:
    """Sample an (H, W, C) array at (x, y) pixel coordinates, clamping to the border."""
    h, w = data.shape[:2]
    x = np.clip(mapping[..., 0], 0, w - 1)
    y = np.clip(mapping[..., 1], 0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = data[y0, x0] * (1 - fx) + data[y0, x1] * fx
    bottom = data[y1, x0] * (1 - fx) + data[y1, x1] * fx
    return (top * (1 - fy) + bottom * fy).astype(data.dtype, copy=False)


def apply_warp(plane: ImagePlane, warp: TpsWarp) -> ImagePlane:
    mapping = solve_tps(warp, plane.hw)
    return plane.replace(bilinear_sample(plane.data, mapping))


def _resize(data: np.ndarray, h: int, w: int) -> np.ndarray:
    import cv2

    out = cv2.resize(data, (w, h), interpolation=cv2.INTER_AREA)
    if out.ndim == 2:
        out = out[:, :, None]
    return out


def resize_translate_pad(plane: ImagePlane, scale: float, offset=(0, 0), pad_value=None) -> ImagePlane:
    """Shrink the content by ``scale`` and place it at the centre shifted by ``offset`` pixels.

    The uncovered frame is filled with ``pad_value`` (default: per-channel
    median of the plane's one-pixel border).
    """
    if not 0.5 <= scale <= 1.0:
        raise ParameterError(f"scale must be in [0.5, 1], got {scale}")
    data = plane.data
    h, w = plane.hw
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    dx, dy = int(offset[0]), int(offset[1])
    top, left = (h - nh) // 2 + dy, (w - nw) // 2 + dx
    if not (0 <= top <= h - nh and 0 <= left <= w - nw):
        raise ParameterError(f"offset {offset} moves the scaled content out of frame")
    if pad_value is None:
        fill = border_median(data)
    else:
        fill = np.full(data.shape[2], pad_value)
    out = np.empty_like(data)
    out[...] = fill.astype(data.dtype)
    content = data if (nh, nw) == (h, w) else _resize(data, nh, nw)
    out[top:top + nh, left:left + nw] = content
    return plane.replace(out)


def flip(plane: ImagePlane, horizontal: bool = False, vertical: bool = False) -> ImagePlane:
    data = plane.data
    if horizontal:
        data = data[:, ::-1]
    if vertical:
        data = data[::-1]
    return plane.replace(np.ascontiguousarray(data))


@dataclass(frozen=True)
class ResizeTranslatePad:
    scale: float
    offset: tuple[int, int]
    pad_value: float | None = None


@dataclass(frozen=True)
class AugmentationSpec:
    tps: TpsWarp | None = None
    resize_translate_pad: ResizeTranslatePad | None = None
    horizontal: bool = False
    vertical: bool = False
    rng_seed: int = 0

    def apply(self, plane: ImagePlane) -> ImagePlane:
        if self.tps is not None:
            plane = apply_warp(plane, self.tps)
        if self.resize_translate_pad is not None:
            r = self.resize_translate_pad
            plane = resize_translate_pad(plane, r.scale, r.offset, r.pad_value)
        if self.horizontal or self.vertical:
            plane = flip(plane, self.horizontal, self.vertical)
        return plane

    @property
    def is_identity(self) -> bool:
        return self.tps is None and self.resize_translate_pad is None and not (self.horizontal or self.vertical)

    def to_dict(self) -> dict:
        return {
            "tps": self.tps.to_dict() if self.tps else None,
            "resize_translate_pad": asdict(self.resize_translate_pad) if self.resize_translate_pad else None,
            "horizontal": self.horizontal,
            "vertical": self.vertical,
            "rng_seed": self.rng_seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        rtp = d.get("resize_translate_pad")
        return cls(
            TpsWarp.from_dict(d["tps"]) if d.get("tps") else None,
            ResizeTranslatePad(rtp["scale"], tuple(rtp["offset"]), rtp.get("pad_value")) if rtp else None,
            bool(d.get("horizontal", False)),
            bool(d.get("vertical", False)),
            int(d.get("rng_seed", 0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "AugmentationSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class AugmentConfig:
    tps_prob: float = 0.99
    region_fraction: tuple[float, float] = (0.2, 0.6)
    max_displacement: float = 0.1
    feather: float = 4.0
    rtp_prob: float = 0.5
    scale_range: tuple[float, float] = (0.5, 1.0)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    # Draw separate target augmentations for the depth- and edge-driven decoders.
    independent_targets: bool = True

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(tps_prob=0.0, rtp_prob=0.0, hflip_prob=0.0, vflip_prob=0.0)


def sample_tps(rng: np.random.Generator, region_fraction=(0.2, 0.6), max_displacement=0.1,
               feather=4.0) -> TpsWarp:
    lo, hi = region_fraction
    sw, sh = rng.uniform(lo, hi, size=2)
    x0 = rng.uniform(0, 1 - sw)
    y0 = rng.uniform(0, 1 - sh)
    bound = np.array([sw, sh]) * max_displacement
    disp = rng.uniform(-1, 1, size=(9, 2)) * bound
    return TpsWarp((float(x0), float(y0), float(x0 + sw), float(y0 + sh)),
                   tuple((float(a), float(b)) for a, b in disp), feather)


def sample_spec(rng: np.random.Generator, shape: tuple[int, int], cfg: AugmentConfig) -> AugmentationSpec:
    seed = int(rng.integers(2**31))
    r = np.random.default_rng(seed)
    tps = None
    if r.random() < cfg.tps_prob:
        tps = sample_tps(r, cfg.region_fraction, cfg.max_displacement, cfg.feather)
    rtp = None
    if r.random() < cfg.rtp_prob:
        scale = float(r.uniform(*cfg.scale_range))
        h, w = shape
        nh, nw = int(round(h * scale)), int(round(w * scale))
        top_room, left_room = h - nh, w - nw
        dy = int(r.integers(0, top_room + 1)) - top_room // 2
        dx = int(r.integers(0, left_room + 1)) - left_room // 2
        rtp = ResizeTranslatePad(scale, (dx, dy), None)
    hflip = bool(r.random() < cfg.hflip_prob)
    vflip = bool(r.random() < cfg.vflip_prob)
    return AugmentationSpec(tps, rtp, hflip, vflip, seed)


@dataclass
class PairedAugmentation:
    """Augmentations of one training pair.

    ``input_spec`` goes to the reference-side conditions; ``target_specs``
    holds, per decoder group, the augmentation shared by that group's target
    condition and its supervision plane.
    """

    input_spec: AugmentationSpec
    target_specs: dict[Decoder, AugmentationSpec] = field(default_factory=dict)

    @property
    def target_spec(self) -> AugmentationSpec:
        return self.target_specs[Decoder.AHD]

    def to_dict(self) -> dict:
        return {"input": self.input_spec.to_dict(),
                "targets": {k.value: v.to_dict() for k, v in self.target_specs.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "PairedAugmentation":
        return cls(AugmentationSpec.from_dict(d["input"]),
                   {Decoder(k): AugmentationSpec.from_dict(v) for k, v in d["targets"].items()})


@dataclass
class TrainingPair:
    inputs: ConditionTriplet
    targets: dict[Decoder, ImagePlane]
    contents: dict[Decoder, ImagePlane]
    paired: PairedAugmentation
    sample_id: str = ""


def supervision_planes(sample, mode: GenerationMode) -> dict[Decoder, ImagePlane]:
    """Raw (un-augmented) planes each decoder group is supervised with."""
    c = sample.conditions
    if mode is GenerationMode.RGB_LEVEL:
        return {Decoder.AHD: c.color, Decoder.AHE: c.color}
    return {Decoder.AHD: depth_for_depth_level(sample), Decoder.AHE: c.edge}


def depth_for_depth_level(sample) -> ImagePlane:
    if sample.real_depth is not None:
        return sample.real_depth
    log.warning("sample %s has no real depth; using pseudo depth for depth-level training", sample.id)
    return sample.conditions.depth


def sample_training_pair(sample, mode: GenerationMode, rng: np.random.Generator,
                         cfg: AugmentConfig | None = None) -> TrainingPair:
    """Build one self-supervised training pair from a single sample.

    RGB level: the color condition is the reference (input augmentation);
    depth and edge are the targets, each sharing its augmentation with the
    color plane its decoder must reproduce.  Depth level swaps the roles:
    color is the target, depth and edge are the references.
    """
    cfg = cfg or AugmentConfig()
    mode = GenerationMode(mode)
    c = sample.conditions
    shape = c.hw
    input_spec = sample_spec(rng, shape, cfg)
    spec_d = sample_spec(rng, shape, cfg)
    spec_e = sample_spec(rng, shape, cfg) if cfg.independent_targets else spec_d

    if mode is GenerationMode.RGB_LEVEL:
        paired = PairedAugmentation(input_spec, {Decoder.AHD: spec_d, Decoder.AHE: spec_e})
        color_in = input_spec.apply(c.color)
        inputs = ConditionTriplet(color_in, spec_d.apply(c.depth), spec_e.apply(c.edge))
        targets = {Decoder.AHD: spec_d.apply(c.color), Decoder.AHE: spec_e.apply(c.color)}
        contents = {Decoder.AHD: color_in, Decoder.AHE: color_in}
    else:
        # one target condition (color), so both groups share its augmentation
        paired = PairedAugmentation(input_spec, {Decoder.AHD: spec_d, Decoder.AHE: spec_d})
        raw = supervision_planes(sample, mode)
        depth_in = input_spec.apply(raw[Decoder.AHD])
        edge_in = input_spec.apply(c.edge)
        inputs = ConditionTriplet(spec_d.apply(c.color), depth_in, edge_in)
        targets = {k: spec_d.apply(v) for k, v in raw.items()}
        contents = {Decoder.AHD: depth_in, Decoder.AHE: edge_in}
    return TrainingPair(inputs, targets, contents, paired, sample.id)
