"""Dataset scanning, base-set splitting, sample loading and condition caching.

Supported layouts::

    mvtec_layout       <root>/<category>/train/good/*.png
                       <root>/<category>/test/<defect>/*.png
                       <root>/<category>/ground_truth/<defect>/<stem>_mask.png
    rgbd_layout        as mvtec_layout, plus a sibling <stem>_depth.{tiff,tif,png}
                       next to every color image
    flat_class_layout  <root>/<class>/*.png  (one category named after <root>)
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import os
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .conditioning import DepthEstimator, EdgeExtractor, minmax_normalize
from .core import ConditionTriplet, ImagePlane, ParameterError, RangeTag, Role, derive_rng

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
DEPTH_SUFFIXES = (".tiff", ".tif", ".png")
NORMAL_LABEL = "good"


class DatasetKind(str, enum.Enum):
    MVTEC = "mvtec_layout"
    RGBD = "rgbd_layout"
    FLAT = "flat_class_layout"


@dataclass(frozen=True)
class SampleRef:
    id: str
    category: str
    split: str
    label: str
    path: str
    mask_path: str | None = None
    depth_path: str | None = None

    @property
    def is_normal(self) -> bool:
        return self.label == NORMAL_LABEL


@dataclass
class CategoryRecord:
    name: str
    train: list[SampleRef] = field(default_factory=list)
    test: list[SampleRef] = field(default_factory=list)

    def refs(self) -> list[SampleRef]:
        return self.train + self.test

    def labels(self) -> list[str]:
        return sorted({r.label for r in self.test})


@dataclass
class DatasetIndex:
    kind: DatasetKind
    root: str
    categories: list[CategoryRecord] = field(default_factory=list)

    def refs(self) -> list[SampleRef]:
        return [r for c in self.categories for r in c.refs()]

    def ids(self) -> set[str]:
        return {r.id for r in self.refs()}

    def category(self, name: str) -> CategoryRecord:
        for c in self.categories:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "root": self.root,
                "categories": [asdict(c) for c in self.categories]}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetIndex":
        cats = [CategoryRecord(c["name"], [SampleRef(**r) for r in c["train"]],
                               [SampleRef(**r) for r in c["test"]]) for c in d["categories"]]
        return cls(DatasetKind(d["kind"]), d["root"], cats)


def _images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES and not _is_aux(p))


def _is_aux(p: Path) -> bool:
    return p.stem.endswith("_depth") or p.stem.endswith("_mask")


def _find_mask(gt_dir: Path, stem: str) -> str | None:
    for name in (f"{stem}_mask.png", f"{stem}.png"):
        if (gt_dir / name).exists():
            return str(gt_dir / name)
    return None


def _find_depth(img: Path) -> str | None:
    for suffix in DEPTH_SUFFIXES:
        cand = img.with_name(f"{img.stem}_depth{suffix}")
        if cand.exists():
            return str(cand)
    return None


def scan(root, kind) -> DatasetIndex:
    root = Path(root)
    kind = DatasetKind(kind)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    index = DatasetIndex(kind, str(root))
    if kind is DatasetKind.FLAT:
        rec = CategoryRecord(root.name)
        for cls_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            for img in _images(cls_dir):
                rec.test.append(SampleRef(f"{root.name}/test/{cls_dir.name}/{img.stem}",
                                          root.name, "test", cls_dir.name, str(img)))
        if rec.test:
            index.categories.append(rec)
        return index

    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        rec = CategoryRecord(cat_dir.name)
        for split in ("train", "test"):
            split_dir = cat_dir / split
            if not split_dir.is_dir():
                continue
            for label_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                for img in _images(label_dir):
                    mask = None
                    if split == "test" and label_dir.name != NORMAL_LABEL:
                        mask = _find_mask(cat_dir / "ground_truth" / label_dir.name, img.stem)
                    depth = _find_depth(img) if kind is DatasetKind.RGBD else None
                    ref = SampleRef(f"{cat_dir.name}/{split}/{label_dir.name}/{img.stem}",
                                    cat_dir.name, split, label_dir.name, str(img), mask, depth)
                    getattr(rec, split).append(ref)
        if not rec.refs():
            log.warning("category %s has no images, skipped", cat_dir.name)
            continue
        index.categories.append(rec)
    return index


def split_base_set(index: DatasetIndex, fraction: float, seed: int) -> tuple[DatasetIndex, DatasetIndex]:
    """Per (category, label) group put ceil(fraction * n) test samples in the base set.

    Training images always belong to the base set, since the base set is the
    material generation draws from.
    """
    if not 0 < fraction < 1:
        raise ParameterError(f"fraction must be in (0, 1), got {fraction}")
    base = DatasetIndex(index.kind, index.root)
    held = DatasetIndex(index.kind, index.root)
    for cat in index.categories:
        b = CategoryRecord(cat.name, list(cat.train))
        h = CategoryRecord(cat.name)
        for label in cat.labels():
            group = sorted((r for r in cat.test if r.label == label), key=lambda r: r.id)
            n = len(group)
            if n == 1:
                log.warning("%s/%s has a single sample; it goes to the base set", cat.name, label)
            k = min(n, math.ceil(fraction * n - 1e-9))
            order = derive_rng(seed, "split", cat.name, label).permutation(n)
            chosen = set(order[:k].tolist())
            for i, ref in enumerate(group):
                (b.test if i in chosen else h.test).append(ref)
        base.categories.append(b)
        if h.refs():
            held.categories.append(h)
    return base, held


@dataclass
class Sample:
    id: str
    conditions: ConditionTriplet
    defect_label: str
    category: str = ""
    real_depth: ImagePlane | None = None
    gt_mask: ImagePlane | None = None

    @property
    def is_normal(self) -> bool:
        return self.defect_label == NORMAL_LABEL


def resize_array(arr: np.ndarray, size: int, nearest: bool = False) -> np.ndarray:
    h, w = arr.shape[:2]
    if (h, w) == (size, size):
        return arr
    if nearest:
        interp = cv2.INTER_NEAREST
    else:
        interp = cv2.INTER_AREA if size < min(h, w) else cv2.INTER_LINEAR
    out = cv2.resize(arr, (size, size), interpolation=interp)
    if arr.ndim == 3 and out.ndim == 2:
        out = out[:, :, None]
    return out


def read_color(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_depth(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        arr = tifffile.imread(path).astype(np.float64)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im).astype(np.float64)
    if arr.ndim == 3:
        arr = arr[..., -1]
    finite = np.isfinite(arr)
    if not finite.all():
        arr = np.where(finite, arr, np.nanmin(np.where(finite, arr, np.nan)) if finite.any() else 0.0)
    return minmax_normalize(arr).astype(np.float32)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 0).astype(np.float32)


class ConditionCache:
    """On-disk cache of extracted depth/edge planes keyed by sample id.

    Entries are only valid for the version string they were written under;
    opening the cache with a different version discards them.
    """

    MANIFEST = "manifest.json"

    def __init__(self, root, version: str):
        self.root = Path(root)
        self.version = version
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.entries: dict[str, dict[str, str]] = {}
        path = self.root / self.MANIFEST
        if path.exists():
            data = json.loads(path.read_text())
            if data.get("version") == version:
                self.entries = data.get("entries", {})
            else:
                log.info("condition cache version changed (%s -> %s); recomputing",
                         data.get("version"), version)

    @staticmethod
    def _key(sample_id: str) -> str:
        return hashlib.sha1(sample_id.encode()).hexdigest()[:20]

    def get(self, sample_id: str) -> tuple[np.ndarray, np.ndarray] | None:
        entry = self.entries.get(sample_id)
        if entry is None:
            return None
        try:
            return np.load(self.root / entry["depth"]), np.load(self.root / entry["edge"])
        except OSError:
            return None

    def put(self, sample_id: str, depth: np.ndarray, edge: np.ndarray):
        key = self._key(sample_id)
        files = {"depth": f"{key}_depth.npy", "edge": f"{key}_edge.npy"}
        _atomic_npy(self.root / files["depth"], depth)
        _atomic_npy(self.root / files["edge"], edge)
        with self._lock:
            self.entries[sample_id] = files
            atomic_write_text(self.root / self.MANIFEST,
                              json.dumps({"version": self.version, "entries": self.entries},
                                         indent=1, sort_keys=True))


def atomic_write_text(path: Path, text: str):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_npy(path: Path, arr: np.ndarray):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".npy")
    with os.fdopen(fd, "wb") as fh:
        np.save(fh, arr)
    os.replace(tmp, path)


def cache_version(edge: EdgeExtractor, depth: DepthEstimator, resolution: int) -> str:
    return f"{edge.version}|{depth.version}|{resolution}"


def load_sample(ref: SampleRef, edge: EdgeExtractor, depth: DepthEstimator,
                resolution: int = 256, cache: ConditionCache | None = None) -> Sample:
    """Read one sample and attach its condition planes at ``resolution``.

    Extractors see the full-resolution color image; all planes are resized
    afterwards.
    """
    color_full = read_color(ref.path)
    color = resize_array(color_full, resolution)
    cached = cache.get(ref.id) if cache is not None else None
    if cached is None:
        color_plane = ImagePlane(color_full, RangeTag.UNIT, Role.COLOR)
        d = resize_array(depth(color_plane).data, resolution)
        e = resize_array(edge(color_plane).data, resolution)
        d = np.clip(d, 0, 1).astype(np.float32)
        e = np.clip(e, 0, 1).astype(np.float32)
        if cache is not None:
            cache.put(ref.id, d, e)
    else:
        d, e = cached
    triplet = ConditionTriplet(
        ImagePlane(np.clip(color, 0, 1), RangeTag.UNIT, Role.COLOR),
        ImagePlane(d, RangeTag.UNIT, Role.DEPTH),
        ImagePlane(e, RangeTag.UNIT, Role.EDGE),
    )
    real_depth = None
    if ref.depth_path:
        real_depth = ImagePlane(resize_array(read_depth(ref.depth_path), resolution),
                                RangeTag.UNIT, Role.DEPTH)
    gt_mask = None
    if ref.mask_path:
        gt_mask = ImagePlane(resize_array(read_mask(ref.mask_path), resolution, nearest=True),
                             RangeTag.UNIT, Role.MASK)
    elif ref.split == "test":
        gt_mask = ImagePlane(np.zeros((resolution, resolution, 1), np.float32), RangeTag.UNIT, Role.MASK)
    return Sample(ref.id, triplet, ref.label, ref.category, real_depth, gt_mask)


def load_samples(refs, edge: EdgeExtractor, depth: DepthEstimator, resolution: int = 256,
                 cache: ConditionCache | None = None, workers: int = 1) -> list[Sample]:
    """Load many samples, skipping unreadable files.  Output order follows ``refs``."""

    def one(ref):
        try:
            return load_sample(ref, edge, depth, resolution, cache)
        except (OSError, ValueError) as exc:
            log.error("skipping %s: %s", ref.id, exc)
            return None

    refs = list(refs)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            loaded = list(pool.map(one, refs))
    else:
        loaded = [one(r) for r in refs]
    return [s for s in loaded if s is not None]
