"""Generation and detection metrics: IS, cluster LPIPS, rank metrics, recall at TNR."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.special import rel_entr, softmax
from scipy.stats import rankdata

from .core import DimensionError, HybridSynthError, ImagePlane
from .network import plane_to_tensor

log = logging.getLogger(__name__)

REPORT_SCHEMA = "hybridsynth.metric-report/1"


class InputError(HybridSynthError, ValueError):
    pass


class MetricUndefinedError(HybridSynthError, ValueError):
    pass


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel()
        if self.scores.shape != self.labels.shape:
            raise InputError(f"{self.scores.size} scores but {self.labels.size} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise InputError("labels must be 0 or 1")
        if not np.isfinite(self.scores).all():
            raise InputError("scores must be finite")
        self.labels = self.labels.astype(np.int64)

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())


def _as_scoreset(s, labels=None) -> ScoreSet:
    return s if isinstance(s, ScoreSet) else ScoreSet(s, labels)


# -- rank metrics ------------------------------------------------------------------

def auroc(s, labels=None) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    s = _as_scoreset(s, labels)
    p, n = s.n_pos, s.n_neg
    if p == 0 or n == 0:
        raise MetricUndefinedError("AUROC needs both positive and negative samples")
    ranks = rankdata(s.scores)  # average ranks handle ties
    u = ranks[s.labels == 1].sum() - p * (p + 1) / 2
    return float(u / (p * n))


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # stable sort on -score: equal scores keep input order
    return np.argsort(-scores, kind="stable")


def average_precision(s, labels=None) -> float:
    """Mean over positives of precision at that positive's rank.

    Ranking is by descending score with ties broken by input index.
    """
    s = _as_scoreset(s, labels)
    if s.n_pos == 0:
        raise MetricUndefinedError("average precision needs at least one positive")
    y = s.labels[_descending_order(s.scores)]
    tp = np.cumsum(y)
    ranks = np.arange(1, y.size + 1)
    return float(np.sum((tp / ranks)[y == 1]) / s.n_pos)


def f1_max(s, labels=None) -> float:
    """Best F1 over thresholds at the unique scores, predicting positive iff score >= t."""
    s = _as_scoreset(s, labels)
    if s.n_pos == 0:
        raise MetricUndefinedError("F1-max needs at least one positive")
    order = _descending_order(s.scores)
    sc, y = s.scores[order], s.labels[order]
    tp = np.cumsum(y)
    # last index of each run of equal scores = everything with score >= t
    last = np.r_[np.flatnonzero(sc[1:] != sc[:-1]), sc.size - 1]
    tp = tp[last]
    predicted = last + 1
    f1 = 2 * tp / (predicted + s.n_pos)
    return float(f1.max())


def recall_at_tnr(normal_scores, anomaly_scores, tnr: float = 0.95) -> float:
    """Recall of anomalies at the order-statistic threshold for the given TNR.

    Normals are sorted ascending and t is the value at index ceil(tnr * n) - 1
    (clamped to 0); an anomaly is detected iff its score is strictly above t.
    """
    normal = np.sort(np.asarray(normal_scores, dtype=np.float64).ravel())
    anomaly = np.asarray(anomaly_scores, dtype=np.float64).ravel()
    if normal.size == 0 or anomaly.size == 0:
        raise InputError("recall_at_tnr needs nonempty normal and anomaly scores")
    if not 0 < tnr < 1:
        raise InputError(f"tnr must be in (0, 1), got {tnr}")
    k = max(math.ceil(tnr * normal.size - 1e-9) - 1, 0)
    return float(np.mean(anomaly > normal[k]))


def harmonic_mean(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise InputError("harmonic mean of an empty list")
    if (v < 0).any():
        raise InputError("harmonic mean needs nonnegative values")
    if (v == 0).any():
        log.warning("harmonic mean: zero value present, result is 0")
        return 0.0
    return float(v.size / np.sum(1.0 / v))


def rank_metrics(s, labels=None) -> dict:
    s = _as_scoreset(s, labels)
    return {"auroc": auroc(s), "ap": average_precision(s), "f1max": f1_max(s)}


def pixel_metrics(score_maps, gt_masks) -> dict:
    """Flatten every pixel of the set into one ScoreSet and apply the rank metrics."""
    if len(score_maps) != len(gt_masks):
        raise InputError(f"{len(score_maps)} score maps but {len(gt_masks)} masks")
    scores, labels = [], []
    for sm, gm in zip(score_maps, gt_masks):
        sm = sm.data if isinstance(sm, ImagePlane) else np.asarray(sm)
        gm = gm.data if isinstance(gm, ImagePlane) else np.asarray(gm)
        if sm.size != gm.size or sm.shape[:2] != gm.shape[:2]:
            raise DimensionError(f"score map {sm.shape} does not match mask {gm.shape}")
        scores.append(np.asarray(sm, dtype=np.float64).ravel())
        labels.append((np.asarray(gm).ravel() > 0.5).astype(np.int64))
    return rank_metrics(ScoreSet(np.concatenate(scores), np.concatenate(labels)))


# -- inception score ---------------------------------------------------------------

def _check_rows(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InputError("class probabilities must be a nonempty (N, K) array")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1).max() > 1e-6:
        raise InputError("each row must be a probability vector summing to 1")
    return p


def inception_score(probs, splits: int = 10) -> tuple[float, float]:
    """exp(mean KL(p_i || marginal)) per split; returns (mean, std) over splits."""
    p = _check_rows(probs)
    if splits < 1 or splits > len(p):
        raise InputError(f"splits must be in [1, {len(p)}], got {splits}")
    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(axis=0, keepdims=True)
        kl = rel_entr(part, marginal).sum(axis=1)
        scores.append(math.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


class RandomProjectionClassifier:
    """Fixed random linear classifier over pooled pixels; a download-free IS adapter."""

    def __init__(self, num_classes: int = 10, pool: int = 8, seed: int = 0, temperature: float = 0.05):
        self.num_classes, self.pool, self.temperature, self.seed = num_classes, pool, temperature, seed
        self._w: dict[int, np.ndarray] = {}

    def _weights(self, dim: int) -> np.ndarray:
        if dim not in self._w:
            self._w[dim] = np.random.default_rng([self.seed, dim, self.num_classes]).standard_normal(
                (dim, self.num_classes)) / math.sqrt(dim)
        return self._w[dim]

    def __call__(self, images: Sequence[ImagePlane]) -> np.ndarray:
        feats = []
        for im in images:
            t = torch.from_numpy(np.ascontiguousarray(im.data, dtype=np.float32)).permute(2, 0, 1)[None]
            f = torch.nn.functional.adaptive_avg_pool2d(t, self.pool).numpy().ravel()
            feats.append((f - f.mean()) / (f.std() + 1e-8))
        x = np.stack(feats)
        return softmax(x @ self._weights(x.shape[1]) / self.temperature, axis=1)


# -- perceptual distance and cluster LPIPS -----------------------------------------

def _default_backbone():
    from .training import RandomConvFeatures

    return RandomConvFeatures()


@torch.no_grad()
def _features(planes: Sequence[ImagePlane], backbone) -> list[torch.Tensor]:
    """Per-layer channel-normalized features, stacked over images.

    Images go through the backbone one at a time so a distance never depends
    on which other images shared its batch.
    """
    per_image = [backbone(plane_to_tensor(p)[None]) for p in planes]
    out = []
    for layer in zip(*per_image):
        f = torch.cat(layer).double()
        out.append(f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10))
    return out


def _feature_distance(fa: list[torch.Tensor], fb: list[torch.Tensor]) -> torch.Tensor:
    """Distances between every row of fa and every row of fb: (len(fa), len(fb))."""
    total = 0
    for a, b in zip(fa, fb):
        diff = a[:, None] - b[None]
        total = total + diff.pow(2).sum(dim=2).mean(dim=(2, 3))
    return total


def perceptual_distance(a: ImagePlane, b: ImagePlane, backbone=None) -> float:
    """LPIPS-style distance: unit-normalized features, squared difference, spatial mean, sum over layers."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"perceptual_distance shapes differ: {a.data.shape} vs {b.data.shape}")
    backbone = backbone or _default_backbone()
    fa, fb = _features([a], backbone), _features([b], backbone)
    return float(_feature_distance(fa, fb)[0, 0])


def pairwise_distances(xs: Sequence, ys: Sequence, distance: Callable | None = None, backbone=None,
                       tile: int = 32) -> np.ndarray:
    if distance is not None:
        return np.array([[distance(x, y) for y in ys] for x in xs], dtype=np.float64)
    backbone = backbone or _default_backbone()
    fy = _features(ys, backbone)
    rows = []
    for i in range(0, len(xs), tile):
        rows.append(_feature_distance(_features(xs[i:i + tile], backbone), fy).numpy())
    return np.concatenate(rows, axis=0)


def cluster_lpips(generated: Sequence, references: Sequence, backbone=None,
                  distance: Callable | None = None) -> float:
    """Diversity: assign each image to its nearest reference, average within-group pairwise distances.

    Ties in assignment go to the lowest reference index.  Groups with fewer
    than two members are excluded from the final mean.  ``distance`` replaces
    the perceptual distance with any symmetric callable.
    """
    if len(generated) == 0 or len(references) == 0:
        raise InputError("cluster_lpips needs generated images and references")
    to_ref = pairwise_distances(generated, references, distance, backbone)
    assign = np.argmin(to_ref, axis=1)
    within = pairwise_distances(generated, generated, distance, backbone)
    means = []
    for r in range(len(references)):
        idx = np.flatnonzero(assign == r)
        if idx.size < 2:
            continue
        iu = np.triu_indices(idx.size, k=1)
        means.append(within[np.ix_(idx, idx)][iu].mean())
    if not means:
        log.warning("cluster_lpips: every group has fewer than two members")
        return 0.0
    return float(np.mean(means))


# -- report ------------------------------------------------------------------------

@dataclass
class MetricReport:
    is_mean: float | None = None
    is_std: float | None = None
    cluster_lpips: float | None = None
    image: dict = field(default_factory=dict)
    pixel: dict = field(default_factory=dict)
    recalls: dict = field(default_factory=dict)
    harmonic_mean: float | None = None
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def validate(self):
        if self.is_mean is not None and self.is_mean < 1 - 1e-9:
            raise InputError(f"inception score below 1: {self.is_mean}")
        for group in (self.image, self.pixel, self.recalls):
            for k, v in group.items():
                if v is not None and not 0 <= v <= 1:
                    raise InputError(f"metric {k}={v} outside [0, 1]")
        return self

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        schema = d.pop("schema", REPORT_SCHEMA)
        if schema != REPORT_SCHEMA:
            raise InputError(f"unsupported report schema {schema!r}")
        return cls(**d)
