"""Downstream models trained on generated anomalies and evaluated on held-out real data."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from sklearn.linear_model import SGDClassifier

from .core import ConfigError, derive_rng, derive_seed
from .ingest import resize_array
from .manipulate import read_manifest
from .metrics import InputError, MetricReport, harmonic_mean, pixel_metrics, rank_metrics, recall_at_tnr

log = logging.getLogger(__name__)


@dataclass
class LabeledImage:
    id: str
    image: np.ndarray  # H x W x C in [0, 1]
    label: str
    mask: np.ndarray | None = None  # H x W bool
    sources: tuple[str, ...] = ()

    @property
    def is_normal(self) -> bool:
        return self.label == "good"


def _read_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    arr = arr.astype(np.float32) / scale
    return arr[..., None] if arr.ndim == 2 else arr


def load_manifest_items(manifest, decoders=None) -> list[LabeledImage]:
    manifest = Path(manifest)
    _, rows = read_manifest(manifest)
    root = manifest.parent
    wanted = None if decoders is None else {str(getattr(d, "value", d)) for d in decoders}
    items = []
    for r in rows:
        if wanted is not None and r["decoder"] not in wanted:
            continue
        items.append(LabeledImage(
            r["image"], _read_png(root / r["image"]), r["defect"], _read_png(root / r["mask"])[..., 0] > 0.5,
            tuple(r[k] for k in ("target_id", "reference_id", "anomaly_source_id") if k in r)))
    return items


def items_from_samples(samples) -> list[LabeledImage]:
    out = []
    for s in samples:
        mask = s.gt_mask.data[..., 0] > 0.5 if s.gt_mask is not None else None
        if mask is None and s.is_normal:
            mask = np.zeros(s.conditions.hw, bool)
        out.append(LabeledImage(s.id, s.conditions.color.data, s.defect_label, mask, (s.id,)))
    return out


def check_disjoint(train: Sequence[LabeledImage], evaluation: Sequence[LabeledImage]):
    """Raise if any eval sample id appears among the training ids or their provenance."""
    train_ids = {i.id for i in train} | {s for i in train for s in i.sources}
    eval_ids = {i.id for i in evaluation} | {s for i in evaluation for s in i.sources}
    shared = train_ids & eval_ids
    if shared:
        raise ConfigError(f"train and eval data share {len(shared)} sample ids, e.g. {sorted(shared)[:3]}")


def _stack(items: Sequence[LabeledImage], size: int | None) -> torch.Tensor:
    arrs = []
    for it in items:
        a = it.image if size is None else resize_array(it.image, size)
        if a.ndim == 2:
            a = a[..., None]
        arrs.append(a)
    x = torch.from_numpy(np.stack(arrs).astype(np.float32)).permute(0, 3, 1, 2)
    return x * 2 - 1


def _stack_masks(items: Sequence[LabeledImage], size: int | None) -> torch.Tensor:
    arrs = []
    for it in items:
        if it.mask is None:
            raise InputError(f"{it.id} has no mask")
        m = it.mask.astype(np.float32)
        arrs.append(m if size is None else resize_array(m, size, nearest=True))
    return torch.from_numpy(np.stack(arrs))[:, None]


# -- models --------------------------------------------------------------------

class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class SmallResNet(nn.Module):
    """Four-stage residual classifier, well under 1M parameters."""

    def __init__(self, in_ch: int, num_classes: int, width: int = 24):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_ch, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        chans = [width, width * 2, width * 4, width * 8]
        stages, cin = [], width
        for i, c in enumerate(chans):
            stages.append(ResBlock(cin, c, 1 if i == 0 else 2))
            cin = c
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(cin, num_classes)

    def forward(self, x):
        x = self.stages(self.stem(x))
        return self.fc(x.mean(dim=(2, 3)))


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU())


class SmallUNet(nn.Module):
    """Three-level U-shaped segmenter emitting one anomaly logit per pixel."""

    def __init__(self, in_ch: int = 3, base: int = 16, levels: int = 3):
        super().__init__()
        chans = [base * 2 ** i for i in range(levels + 1)]
        self.down = nn.ModuleList([_double_conv(in_ch, chans[0])])
        for i in range(levels):
            self.down.append(_double_conv(chans[i], chans[i + 1]))
        self.up = nn.ModuleList()
        for i in reversed(range(levels)):
            self.up.append(_double_conv(chans[i + 1] + chans[i], chans[i]))
        self.head = nn.Conv2d(chans[0], 1, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            x = block(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        skips.pop()
        for block in self.up:
            skip = skips.pop()
            x = block(torch.cat([F.interpolate(x, size=skip.shape[-2:], mode="nearest"), skip], dim=1))
        return self.head(x)


# -- training ------------------------------------------------------------------

@dataclass
class DownstreamConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    resolution: int | None = None
    normal_ratio: float = 1.0  # generated-anomaly : normal-image mix for the segmenter
    flips: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _seed_torch(seed: int, *keys):
    torch.manual_seed(derive_seed(seed, "torch", *keys))


def _random_flips(rng, x: torch.Tensor, *others: torch.Tensor):
    out = [x, *others]
    if rng.random() < 0.5:
        out = [t.flip(-1) for t in out]
    if rng.random() < 0.5:
        out = [t.flip(-2) for t in out]
    return out


@dataclass
class ClassifierResult:
    model: nn.Module
    classes: list[str]
    accuracy: float
    predictions: list[str]
    history: list[float] = field(default_factory=list)


def train_classifier(train: Sequence[LabeledImage], evaluation: Sequence[LabeledImage],
                     cfg: DownstreamConfig | None = None) -> ClassifierResult:
    """Defect-type classifier; reports top-1 accuracy on ``evaluation``."""
    cfg = cfg or DownstreamConfig()
    classes = sorted({it.label for it in train})
    if len(classes) < 2:
        raise ConfigError(f"classifier needs at least 2 classes, got {classes}")
    unknown = {it.label for it in evaluation} - set(classes)
    if unknown:
        raise ConfigError(f"eval labels not seen in training: {sorted(unknown)}")
    check_disjoint(train, evaluation)
    _seed_torch(cfg.seed, "classifier")
    x = _stack(train, cfg.resolution)
    y = torch.tensor([classes.index(it.label) for it in train])
    model = SmallResNet(x.shape[1], len(classes))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    model.train()
    for step in range(cfg.steps):
        rng = derive_rng(cfg.seed, "classifier-batch", step)
        idx = torch.from_numpy(rng.choice(len(x), size=min(cfg.batch_size, len(x)), replace=False))
        xb, = _random_flips(rng, x[idx]) if cfg.flips else (x[idx],)
        loss = F.cross_entropy(model(xb), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    model.eval()
    with torch.no_grad():
        pred = model(_stack(evaluation, cfg.resolution)).argmax(dim=1).tolist()
    names = [classes[p] for p in pred]
    acc = float(np.mean([n == it.label for n, it in zip(names, evaluation)]))
    return ClassifierResult(model, classes, acc, names, history)


@dataclass
class ScoreDump:
    ids: list[str]
    labels: list[str]
    score_maps: np.ndarray  # N x H x W
    masks: np.ndarray  # N x H x W bool

    @property
    def image_scores(self) -> np.ndarray:
        return self.score_maps.reshape(len(self.ids), -1).max(axis=1)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(path, score_maps=self.score_maps, masks=self.masks)
        path.with_suffix(".json").write_text(json.dumps({"ids": self.ids, "labels": self.labels}, indent=2))

    @classmethod
    def load(cls, path) -> "ScoreDump":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        with np.load(path.with_suffix(".npz")) as z:
            return cls(meta["ids"], meta["labels"], z["score_maps"], z["masks"])


def report_from_dump(dump: ScoreDump, config: dict | None = None) -> MetricReport:
    """Image- and pixel-level rank metrics as a pure function of a score dump."""
    image_labels = np.array([lbl != "good" for lbl in dump.labels], dtype=int)
    report = MetricReport(config=dict(config or {}),
                          counts={"images": len(dump.ids), "anomalous": int(image_labels.sum())})
    if 0 < image_labels.sum() < len(image_labels):
        report.image = rank_metrics(dump.image_scores, image_labels)
    else:
        log.warning("image-level metrics need both normal and anomalous eval images")
    if dump.masks.any() and not dump.masks.all():
        report.pixel = pixel_metrics(list(dump.score_maps), list(dump.masks))
    return report.validate()


@torch.no_grad()
def segment(model: nn.Module, items: Sequence[LabeledImage], resolution: int | None = None) -> np.ndarray:
    """Per-pixel anomaly probabilities, N x H x W at each item's own size."""
    model.eval()
    maps = []
    for it in items:
        x = _stack([it], resolution)
        p = torch.sigmoid(model(x))
        if p.shape[-2:] != it.image.shape[:2]:
            p = F.interpolate(p, size=it.image.shape[:2], mode="bilinear", align_corners=False)
        maps.append(p[0, 0].double().numpy())
    return np.stack(maps)


@dataclass
class SegmenterResult:
    model: nn.Module
    report: MetricReport
    dump: ScoreDump
    history: list[float] = field(default_factory=list)


def train_segmenter(train: Sequence[LabeledImage], evaluation: Sequence[LabeledImage],
                    cfg: DownstreamConfig | None = None,
                    normals: Sequence[LabeledImage] = ()) -> SegmenterResult:
    """Pixel segmenter trained on masked anomalies plus optional normal images.

    ``normals`` (zero masks) are mixed in at ``cfg.normal_ratio`` normal
    images per anomaly image.  The image score is the max of the pixel map.
    """
    cfg = cfg or DownstreamConfig()
    if not train:
        raise InputError("segmenter needs training images")
    missing = [it.id for it in list(train) + list(evaluation) if it.mask is None]
    if missing:
        raise InputError(f"{len(missing)} images have no mask, e.g. {missing[0]}")
    n_norm = int(round(cfg.normal_ratio * len(train))) if normals else 0
    pool = list(train) + [normals[i % len(normals)] for i in range(n_norm)]
    check_disjoint(pool, evaluation)
    _seed_torch(cfg.seed, "segmenter")
    x, m = _stack(pool, cfg.resolution), _stack_masks(pool, cfg.resolution)
    model = SmallUNet(x.shape[1])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    pos = float(m.mean())
    pos_weight = torch.tensor(min((1 - pos) / max(pos, 1e-6), 50.0))
    history = []
    model.train()
    for step in range(cfg.steps):
        rng = derive_rng(cfg.seed, "segmenter-batch", step)
        idx = torch.from_numpy(rng.choice(len(x), size=min(cfg.batch_size, len(x)), replace=False))
        xb, mb = _random_flips(rng, x[idx], m[idx]) if cfg.flips else (x[idx], m[idx])
        logits = model(xb)
        prob = torch.sigmoid(logits)
        dice = 1 - (2 * (prob * mb).sum() + 1) / (prob.sum() + mb.sum() + 1)
        loss = F.binary_cross_entropy_with_logits(logits, mb, pos_weight=pos_weight) + dice
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    maps = segment(model, evaluation, cfg.resolution)
    dump = ScoreDump([it.id for it in evaluation], [it.label for it in evaluation], maps,
                     np.stack([it.mask for it in evaluation]))
    return SegmenterResult(model, report_from_dump(dump, cfg.to_dict()), dump, history)


# -- hybrid detection ------------------------------------------------------------

class RandomProjectionEmbedding:
    """Fixed random projection of pooled pixels; stands in for a pretrained backbone."""

    def __init__(self, dim: int = 64, pool: int = 8, seed: int = 0):
        self.dim, self.pool, self.seed = dim, pool, seed

    def __call__(self, images: Sequence[np.ndarray]) -> np.ndarray:
        feats = []
        for im in images:
            t = torch.from_numpy(np.ascontiguousarray(im, dtype=np.float32))
            t = t[..., None] if t.ndim == 2 else t
            feats.append(F.adaptive_avg_pool2d(t.permute(2, 0, 1)[None], self.pool).numpy().ravel())
        x = np.stack(feats)
        w = np.random.default_rng([self.seed, x.shape[1], self.dim]).standard_normal((x.shape[1], self.dim))
        return x @ w / np.sqrt(x.shape[1])


class LinearHead(nn.Module):
    """Three linear layers with ReLU, one logit out."""

    def __init__(self, dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden // 2), nn.ReLU(),
                                 nn.Linear(hidden // 2, 1))

    def forward(self, x):
        return self.net(x)[:, 0]


def _fit_linear_head(x: np.ndarray, y: np.ndarray, seed: int, steps: int = 300, lr: float = 1e-2):
    _seed_torch(seed, "linear-head")
    head = LinearHead(x.shape[1])
    xt, yt = torch.from_numpy(x).float(), torch.from_numpy(y).float()
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    for _ in range(steps):
        loss = F.binary_cross_entropy_with_logits(head(xt), yt)
        opt.zero_grad()
        loss.backward()
        opt.step()
    head.eval()
    return head


def evaluate_hybrid_detection(embed: Callable | None, train_images, train_labels, test_images, test_types,
                              normal_type: str = "normal", tnr: float = 0.95, seed: int = 0,
                              max_mode: str = "score", expected_types: Sequence[str] | None = None) -> dict:
    """Linear-head and hinge-SGD detectors on embeddings; recall at ``tnr`` per hybrid type.

    ``max_mode="score"`` fuses the two detectors by the max of their sigmoid
    scores before thresholding; ``"recall"`` takes the per-type max of the two
    recalls.  Types with no test samples are listed under ``missing``.
    """
    if max_mode not in ("score", "recall"):
        raise ConfigError(f"max_mode must be 'score' or 'recall', got {max_mode!r}")
    xtr = np.asarray(embed(train_images) if embed else train_images, dtype=np.float64)
    xte = np.asarray(embed(test_images) if embed else test_images, dtype=np.float64)
    ytr = np.asarray(train_labels).astype(int)
    if set(np.unique(ytr)) != {0, 1}:
        raise ConfigError("training labels must contain both normal (0) and hybrid (1)")
    mu, sd = xtr.mean(axis=0), xtr.std(axis=0) + 1e-8
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    head = _fit_linear_head(xtr, ytr, seed)
    with torch.no_grad():
        s_lin = torch.sigmoid(head(torch.from_numpy(xte).float())).double().numpy()
    sgd = SGDClassifier(loss="hinge", random_state=derive_seed(seed, "sgd") % 2**32, max_iter=1000, tol=1e-4)
    sgd.fit(xtr, ytr)
    s_sgd = 1 / (1 + np.exp(-sgd.decision_function(xte)))
    types = np.asarray(test_types)
    normal = types == normal_type
    if not normal.any():
        raise InputError(f"test set has no {normal_type!r} samples")
    scores = {"linear": s_lin, "sgd": s_sgd, "max": np.maximum(s_lin, s_sgd)}
    hybrid_types = sorted(set(types.tolist()) - {normal_type})
    out = {k: {} for k in ("linear", "sgd", "max")}
    for t in hybrid_types:
        sel = types == t
        for k in ("linear", "sgd"):
            out[k][t] = recall_at_tnr(scores[k][normal], scores[k][sel], tnr)
        if max_mode == "score":
            out["max"][t] = recall_at_tnr(scores["max"][normal], scores["max"][sel], tnr)
        else:
            out["max"][t] = max(out["linear"][t], out["sgd"][t])
    out["hmean"] = {k: harmonic_mean(list(out[k].values())) if out[k] else None for k in ("linear", "sgd", "max")}
    out["missing"] = [t for t in (expected_types or ()) if t not in hybrid_types]
    if out["missing"]:
        log.warning("hybrid types absent from the test set: %s", out["missing"])
    return out


def hybrid_report(recalls: dict, expected_types: Sequence[str]) -> dict:
    """Harmonic mean over the types present; absent types are flagged, not zero-filled."""
    present = {t: recalls[t] for t in expected_types if t in recalls}
    return {"recalls": present, "missing": [t for t in expected_types if t not in recalls],
            "hmean": harmonic_mean(list(present.values())) if present else None}


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
