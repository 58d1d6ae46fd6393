"""Inference-time anomaly synthesis.

A local anomaly is made by editing the target's depth and edge conditions
inside a region and running the edited conditions through the generator.
The region is the ground-truth label of the generated image.
"""
from __future__ import annotations

import enum
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage

from .augment import TpsWarp, apply_warp
from .core import (ConditionTriplet, Decoder, GenerationMode, HybridSynthError, ImagePlane, ParameterError,
                   RangeTag, Role, border_median, convert_range, derive_rng, derive_seed)
from .network import Checkpoint, Generator, generate

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class GenerationIOError(HybridSynthError, OSError):
    pass


class ManipulationKind(str, enum.Enum):
    MERGE = "merge"
    REMOVE = "remove"
    REPLACE = "replace"
    TPS = "tps"


# -- region transform and sampling ---------------------------------------------

@dataclass(frozen=True)
class RegionTransform:
    """Resize about the image centre, flip, then shift by (dx, dy) pixels."""

    scale: float = 1.0
    horizontal: bool = False
    vertical: bool = False
    dx: float = 0.0
    dy: float = 0.0

    def matrix(self, h: int, w: int) -> np.ndarray:
        cx, cy = (w - 1) / 2, (h - 1) / 2
        sx = -self.scale if self.horizontal else self.scale
        sy = -self.scale if self.vertical else self.scale
        return np.array([[sx, 0, cx - sx * cx + self.dx], [0, sy, cy - sy * cy + self.dy]], dtype=np.float64)

    def apply(self, data: np.ndarray, nearest: bool = False) -> np.ndarray:
        h, w = data.shape[:2]
        out = cv2.warpAffine(
            np.ascontiguousarray(data), self.matrix(h, w), (w, h),
            flags=cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_CONSTANT if nearest else cv2.BORDER_REPLICATE, borderValue=0)
        if data.ndim == 3 and out.ndim == 2:
            out = out[:, :, None]
        return out.astype(data.dtype, copy=False)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "horizontal": self.horizontal, "vertical": self.vertical,
                "dx": self.dx, "dy": self.dy}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionTransform":
        return cls(**d)


def sample_region_transform(rng: np.random.Generator, h: int, w: int, scale=(0.6, 1.4)) -> RegionTransform:
    return RegionTransform(
        float(rng.uniform(*scale)), bool(rng.random() < 0.5), bool(rng.random() < 0.5),
        float(rng.uniform(-0.25, 0.25) * w), float(rng.uniform(-0.25, 0.25) * h))


def smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int = 6) -> np.ndarray:
    """Low-frequency noise: a coarse random grid upsampled with cubic interpolation."""
    gh, gw = int(rng.integers(2, cells + 1)), int(rng.integers(2, cells + 1))
    coarse = rng.standard_normal((gh + 2, gw + 2)).astype(np.float32)
    up = cv2.resize(coarse, (w + 2 * w // gw, h + 2 * h // gh), interpolation=cv2.INTER_CUBIC)
    oy, ox = h // gh, w // gw
    return up[oy:oy + h, ox:ox + w].astype(np.float64)


@dataclass
class Region:
    mask: ImagePlane
    used_fallback: bool = False
    transform: RegionTransform | None = None

    @property
    def area(self) -> float:
        return float(self.mask.data.mean())


def _mask_plane(m: np.ndarray) -> ImagePlane:
    return ImagePlane(m.astype(np.float32).reshape(*m.shape[:2], 1), RangeTag.UNIT, Role.MASK)


def _as_bool(mask) -> np.ndarray:
    data = mask.data if isinstance(mask, ImagePlane) else np.asarray(mask)
    if data.ndim == 3:
        data = data[..., 0]
    return data > 0.5


def _noise_blob(rng, allowed: np.ndarray, area: tuple[float, float]) -> np.ndarray | None:
    h, w = allowed.shape
    k = int(round(rng.uniform(*area) * h * w))
    k = max(k, 1)
    if allowed.sum() < k:
        return None
    noise = smooth_noise(rng, h, w)
    noise = np.where(allowed, noise, -np.inf)
    flat = np.argsort(-noise, axis=None, kind="stable")[:k]
    out = np.zeros(h * w, bool)
    out[flat] = True
    return out.reshape(h, w)


def sample_region(target_fg, reference_fg, rng: np.random.Generator, area=(0.005, 0.10),
                  source_mask=None, retries: int = 10) -> Region:
    """Sample an anomaly region inside both foregrounds.

    With ``source_mask`` (e.g. a real anomaly mask of the reference image)
    the region is a resized / flipped / shifted copy of it; otherwise it is a
    thresholded smooth-noise blob whose area is drawn from ``area``.  If no
    admissible region is found after ``retries`` attempts the blob is drawn
    without the foreground constraint and ``used_fallback`` is set.
    """
    tfg, rfg = _as_bool(target_fg), _as_bool(reference_fg)
    if tfg.shape != rfg.shape:
        raise ParameterError("foreground masks differ in size")
    h, w = tfg.shape
    n = h * w
    lo, hi = area
    if source_mask is not None:
        src = _as_bool(source_mask)
        if src.any():
            for _ in range(retries):
                tf = sample_region_transform(rng, h, w)
                moved = tf.apply(src.astype(np.uint8), nearest=True) > 0
                moved_rfg = tf.apply(rfg.astype(np.uint8), nearest=True) > 0
                cand = moved & tfg & moved_rfg
                if lo * n <= cand.sum() <= hi * n and cand.any():
                    return Region(_mask_plane(cand), False, tf)
    allowed = tfg & rfg
    for _ in range(retries):
        blob = _noise_blob(rng, allowed, area)
        if blob is not None:
            return Region(_mask_plane(blob), False, None)
    log.warning("no admissible anomaly region inside the foregrounds; using an unconstrained blob")
    return Region(_mask_plane(_noise_blob(rng, np.ones_like(tfg), area)), True, None)


def estimate_foreground(color: ImagePlane, tol: float = 0.08, min_area: float = 0.02) -> ImagePlane:
    """Pixels whose smoothed color differs from the border median by more than ``tol``.

    Falls back to the full frame when the estimate is tiny (texture images).
    """
    data = ndimage.gaussian_filter(color.data.astype(np.float64), sigma=(1, 1, 0))
    dist = np.abs(data - border_median(data)).max(axis=2)
    fg = ndimage.binary_fill_holes(ndimage.binary_opening(dist > tol, iterations=1))
    if fg.mean() < min_area:
        fg = np.ones_like(fg)
    return _mask_plane(fg)


def full_foreground(shape) -> ImagePlane:
    return _mask_plane(np.ones(shape[:2], bool))


# -- plans -----------------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> dict:
    flat = np.asarray(mask, bool).ravel()
    changes = np.flatnonzero(np.diff(np.concatenate([[0], flat.view(np.uint8), [0]])))
    return {"shape": list(mask.shape[:2]), "runs": changes.tolist()}


def rle_decode(d: dict) -> np.ndarray:
    h, w = d["shape"]
    flat = np.zeros(h * w, bool)
    runs = d["runs"]
    for a, b in zip(runs[::2], runs[1::2]):
        flat[a:b] = True
    return flat.reshape(h, w)


@dataclass
class ManipulationPlan:
    region: ImagePlane
    kind: ManipulationKind
    edge_kind: ManipulationKind | None = None
    params: dict = field(default_factory=dict)
    reference_transform: RegionTransform | None = None
    seed: int = 0

    def kind_for(self, plane: str) -> ManipulationKind:
        if plane == "edge" and self.edge_kind is not None:
            return ManipulationKind(self.edge_kind)
        return ManipulationKind(self.kind)

    @property
    def is_empty(self) -> bool:
        return not _as_bool(self.region).any()

    def to_dict(self) -> dict:
        return {
            "region": rle_encode(_as_bool(self.region)),
            "kind": ManipulationKind(self.kind).value,
            "edge_kind": ManipulationKind(self.edge_kind).value if self.edge_kind else None,
            "params": self.params,
            "reference_transform": self.reference_transform.to_dict() if self.reference_transform else None,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManipulationPlan":
        return cls(
            _mask_plane(rle_decode(d["region"])),
            ManipulationKind(d["kind"]),
            ManipulationKind(d["edge_kind"]) if d.get("edge_kind") else None,
            dict(d.get("params", {})),
            RegionTransform.from_dict(d["reference_transform"]) if d.get("reference_transform") else None,
            int(d.get("seed", 0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ManipulationPlan":
        return cls.from_dict(json.loads(text))


def _region_box(mask: np.ndarray, pad: int = 2) -> tuple[float, float, float, float]:
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    x0, x1 = max(xs.min() - pad, 0), min(xs.max() + pad, w - 1)
    y0, y1 = max(ys.min() - pad, 0), min(ys.max() + pad, h - 1)
    if x1 <= x0:
        x0, x1 = max(x0 - 1, 0), min(x1 + 1, w - 1)
    if y1 <= y0:
        y0, y1 = max(y0 - 1, 0), min(y1 + 1, h - 1)
    return x0 / (w - 1), y0 / (h - 1), x1 / (w - 1), y1 / (h - 1)


def region_tps(mask: np.ndarray, rng: np.random.Generator, strength: float = 0.25) -> TpsWarp:
    x0, y0, x1, y1 = _region_box(mask)
    bound = np.array([x1 - x0, y1 - y0]) * strength
    disp = rng.uniform(-1, 1, (9, 2)) * bound
    return TpsWarp((x0, y0, x1, y1), tuple((float(a), float(b)) for a, b in disp), feather=0.0)


def make_plan(region: Region, kind, rng: np.random.Generator, edge_kind=None, alpha: float = 0.5,
              tps_strength: float = 0.25) -> ManipulationPlan:
    kind = ManipulationKind(kind)
    params: dict = {"alpha": alpha}
    mask = _as_bool(region.mask)
    if ManipulationKind.TPS in (kind, edge_kind) and mask.any():
        params["tps"] = region_tps(mask, rng, tps_strength).to_dict()
    return ManipulationPlan(region.mask, kind, ManipulationKind(edge_kind) if edge_kind else None, params,
                            region.transform, int(rng.integers(2**31)))


def apply_manipulation(triplet: ConditionTriplet, reference: ConditionTriplet,
                       plan: ManipulationPlan) -> ConditionTriplet:
    """Edit depth and edge inside ``plan.region``; everything else is returned untouched."""
    if triplet.hw != reference.hw or triplet.hw != plan.region.hw:
        raise ParameterError("target, reference and region must share H x W")
    inside = _as_bool(plan.region)[..., None]
    if not inside.any():
        return triplet
    out = {}
    for name in ("depth", "edge"):
        plane: ImagePlane = getattr(triplet, name)
        t = plane.data
        ref = getattr(reference, name).data
        if plan.reference_transform is not None:
            ref = plan.reference_transform.apply(ref)
        kind = plan.kind_for(name)
        if kind is ManipulationKind.MERGE:
            alpha = float(plan.params.get("alpha", 0.5))
            v = t * (1 - alpha) + ref * alpha
        elif kind is ManipulationKind.REMOVE:
            v = np.broadcast_to(border_median(t).astype(t.dtype), t.shape)
        elif kind is ManipulationKind.REPLACE:
            v = ref
        elif kind is ManipulationKind.TPS:
            if "tps" not in plan.params:
                raise ParameterError("TPS manipulation needs a warp in plan.params['tps']")
            v = apply_warp(plane, TpsWarp.from_dict(plan.params["tps"])).data
        else:  # pragma: no cover - enum is exhaustive
            raise ParameterError(f"unknown manipulation {kind!r}")
        out[name] = plane.replace(np.where(inside, v, t).astype(t.dtype))
    return ConditionTriplet(triplet.color, out["depth"], out["edge"])


# -- generation ------------------------------------------------------------------

@dataclass
class AnomalyRecord:
    generated: ImagePlane
    gt_mask: ImagePlane
    plan: ManipulationPlan | None
    decoder: Decoder
    target_id: str
    reference_id: str

    def __post_init__(self):
        if self.generated.hw != self.gt_mask.hw:
            raise ParameterError("generated image and mask differ in size")


def _generator(model) -> Generator:
    return model.generator if isinstance(model, Checkpoint) else model


def _run(gen: Generator, color: ImagePlane, structure: ConditionTriplet, groups):
    triplet = ConditionTriplet(color, structure.depth, structure.edge)
    if gen.cfg.mode is GenerationMode.RGB_LEVEL:
        contents = {g: color for g in groups}
    else:
        contents = {Decoder.AHD: structure.depth, Decoder.AHE: structure.edge}
    return generate(gen, triplet, contents, groups)


def generate_local_anomaly(model, target, reference, plan: ManipulationPlan, groups=tuple(Decoder),
                           mode=None, anomaly_source=None) -> dict[Decoder, AnomalyRecord]:
    """Generate a local anomaly for each requested decoder group.

    RGB level: the reference supplies the appearance (color condition and
    fused content), the manipulated target supplies depth and edge.  Depth
    level: the target color (typically an RGB-level anomaly) is the input and
    the manipulated depth/edge are the fused content.  ``anomaly_source``
    provides the values for MERGE/REPLACE and defaults to ``reference``.
    """
    gen = _generator(model)
    if mode is not None and GenerationMode(mode) is not gen.cfg.mode:
        raise ParameterError(f"model is {gen.cfg.mode.value} level, {GenerationMode(mode).value} requested")
    source = anomaly_source if anomaly_source is not None else reference
    structure = apply_manipulation(target.conditions, source.conditions, plan)
    color = reference.conditions.color if gen.cfg.mode is GenerationMode.RGB_LEVEL else target.conditions.color
    results = _run(gen, color, structure, [Decoder(g) for g in groups])
    return {g: AnomalyRecord(convert_range(r.fused, RangeTag.UNIT), plan.region, plan, g, target.id, reference.id)
            for g, r in results.items()}


def generate_global(model, target, reference, groups=tuple(Decoder),
                    foreground: ImagePlane | None = None) -> dict[Decoder, AnomalyRecord]:
    """Combine reference appearance with target structure, without manipulation."""
    gen = _generator(model)
    color = reference.conditions.color if gen.cfg.mode is GenerationMode.RGB_LEVEL else target.conditions.color
    results = _run(gen, color, target.conditions, [Decoder(g) for g in groups])
    mask = foreground if foreground is not None else full_foreground(target.conditions.hw)
    return {g: AnomalyRecord(convert_range(r.fused, RangeTag.UNIT), mask, None, g, target.id, reference.id)
            for g, r in results.items()}


@dataclass
class GenerationConfig:
    seed: int = 0
    count_per_decoder: int = 500
    decoders: tuple[Decoder, ...] = (Decoder.AHD, Decoder.AHE)
    kinds: tuple[ManipulationKind, ...] = tuple(ManipulationKind)
    independent_edge_kind: bool = True
    area: tuple[float, float] = (0.005, 0.10)
    alpha: float = 0.5
    tps_strength: float = 0.25
    foreground: str = "auto"  # auto | full
    appearance: str = "target"  # target | normal | anomaly

    def images_per_category(self) -> int:
        return self.count_per_decoder * len(self.decoders)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "count_per_decoder": self.count_per_decoder,
            "decoders": [Decoder(d).value for d in self.decoders],
            "kinds": [ManipulationKind(k).value for k in self.kinds],
            "independent_edge_kind": self.independent_edge_kind, "area": list(self.area),
            "alpha": self.alpha, "tps_strength": self.tps_strength,
            "foreground": self.foreground, "appearance": self.appearance,
        }


def _foreground(sample, how: str) -> ImagePlane:
    if how == "full":
        return full_foreground(sample.conditions.hw)
    return estimate_foreground(sample.conditions.color)


def plan_for(rng, target, anomaly_ref, cfg: GenerationConfig) -> ManipulationPlan:
    if not cfg.kinds:
        raise ParameterError("at least one manipulation kind must be enabled")
    source_mask = anomaly_ref.gt_mask if anomaly_ref is not None else None
    ref_fg = _foreground(anomaly_ref, cfg.foreground) if anomaly_ref is not None else _foreground(target, cfg.foreground)
    region = sample_region(_foreground(target, cfg.foreground), ref_fg, rng, cfg.area, source_mask)
    kinds = [ManipulationKind(k) for k in cfg.kinds]
    kind = kinds[int(rng.integers(len(kinds)))]
    edge_kind = kinds[int(rng.integers(len(kinds)))] if cfg.independent_edge_kind else None
    return make_plan(region, kind, rng, edge_kind, cfg.alpha, cfg.tps_strength)


def save_image(plane: ImagePlane, path: Path):
    data = np.clip(plane.data, 0, 1)
    if data.shape[2] == 3:
        Image.fromarray(np.round(data * 255).astype(np.uint8)).save(path)
    else:
        Image.fromarray(np.round(data[..., 0] * 65535).astype(np.uint16)).save(path)


def save_mask(plane: ImagePlane, path: Path):
    Image.fromarray((_as_bool(plane) * 255).astype(np.uint8)).save(path)


class ManifestWriter:
    """Append-only JSON-lines manifest; each row is flushed as soon as it is written."""

    def __init__(self, path: Path, header: dict):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(self.path, "w")
        self.rows: list[dict] = []
        self.write({"type": "header", "version": MANIFEST_VERSION, **header})

    def write(self, row: dict):
        self.fh.write(json.dumps(row, sort_keys=True) + "\n")
        self.fh.flush()
        if row.get("type") == "image":
            self.rows.append(row)

    def close(self):
        if not self.fh.closed:
            self.fh.flush()
            os.fsync(self.fh.fileno())
            self.fh.close()


def read_manifest(path) -> tuple[dict, list[dict]]:
    header, rows = {}, []
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            if row.get("type") == "header":
                header = row
            elif row.get("type") == "image":
                rows.append(row)
    return header, rows


def _pick(rng, items):
    return items[int(rng.integers(len(items)))] if items else None


def generate_dataset(model, base_index, samples: dict, out_dir, cfg: GenerationConfig | None = None,
                     count_per_decoder: int | None = None) -> Path:
    """Generate ``count_per_decoder`` images per decoder for every defect type of the base set.

    Targets are normal training images; anomaly references are base-set
    defect images of the same type, whose masks seed the regions.  Layout::

        out_dir/<category>/<defect>/<decoder>/img_NNNN.png, mask_NNNN.png
        out_dir/manifest.jsonl
    """
    cfg = cfg or GenerationConfig()
    count = cfg.count_per_decoder if count_per_decoder is None else count_per_decoder
    gen = _generator(model)
    out_dir = Path(out_dir)
    writer = ManifestWriter(out_dir / "manifest.jsonl",
                            {"config": {**cfg.to_dict(), "count_per_decoder": count},
                             "mode": gen.cfg.mode.value})
    try:
        for cat in base_index.categories:
            normals = [samples[r.id] for r in cat.train if r.id in samples and r.is_normal]
            normals += [samples[r.id] for r in cat.test if r.id in samples and r.is_normal]
            if not normals:
                log.warning("category %s has no normal images to use as targets; skipped", cat.name)
                continue
            for defect in [lbl for lbl in cat.labels() if lbl != "good"]:
                refs = [samples[r.id] for r in cat.test if r.label == defect and r.id in samples]
                folder = out_dir / cat.name / defect
                for g in cfg.decoders:
                    (folder / Decoder(g).value).mkdir(parents=True, exist_ok=True)
                for i in range(count):
                    rng = derive_rng(cfg.seed, "generate", cat.name, defect, i)
                    target = _pick(rng, normals)
                    anomaly_ref = _pick(rng, refs)
                    if cfg.appearance == "anomaly" and anomaly_ref is not None:
                        appearance = anomaly_ref
                    elif cfg.appearance == "normal":
                        appearance = _pick(rng, normals)
                    else:
                        appearance = target
                    plan = plan_for(rng, target, anomaly_ref, cfg)
                    records = generate_local_anomaly(gen, target, appearance, plan, cfg.decoders,
                                                     anomaly_source=anomaly_ref or target)
                    for g, rec in records.items():
                        img = folder / g.value / f"img_{i:04d}.png"
                        mask = folder / g.value / f"mask_{i:04d}.png"
                        save_image(rec.generated, img)
                        save_mask(rec.gt_mask, mask)
                        writer.write({
                            "type": "image", "category": cat.name, "defect": defect, "decoder": g.value,
                            "index": i, "image": str(img.relative_to(out_dir)),
                            "mask": str(mask.relative_to(out_dir)), "target_id": target.id,
                            "reference_id": appearance.id,
                            "anomaly_source_id": (anomaly_ref or target).id,
                            "plan": plan.to_dict(),
                        })
    except OSError as exc:
        writer.close()
        raise GenerationIOError(f"generation stopped writing to {out_dir}: {exc}") from exc
    writer.close()
    return writer.path


def replay_row(model, row: dict, samples: dict) -> AnomalyRecord:
    """Regenerate one manifest row from its recorded plan."""
    plan = ManipulationPlan.from_dict(row["plan"])
    recs = generate_local_anomaly(model, samples[row["target_id"]], samples[row["reference_id"]], plan,
                                  [Decoder(row["decoder"])], anomaly_source=samples[row["anomaly_source_id"]])
    return recs[Decoder(row["decoder"])]


def plan_seed(root_seed: int, *keys) -> int:
    return derive_seed(root_seed, "plan", *keys)
