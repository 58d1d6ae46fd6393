"""Slow, direct reimplementations used as references in the tests.

Nothing here imports the package's metric or warp code.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def auroc_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def ap_by_rank(scores, labels) -> float:
    """Precision at each positive; sample j is ranked at or above i iff s_j > s_i, or equal with j <= i."""
    n = len(scores)
    precisions = []
    for i in range(n):
        if labels[i] != 1:
            continue
        above = [j for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j <= i)]
        precisions.append(sum(labels[j] for j in above) / len(above))
    return sum(precisions) / len(precisions)


def ap_by_threshold(scores, labels) -> float:
    """Step-wise AP over every threshold; equals the rank form when scores are distinct."""
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        pred = [s >= t for s in scores]
        tp = sum(1 for p, y in zip(pred, labels) if p and y)
        recall = tp / n_pos
        ap += (recall - prev_recall) * tp / sum(pred)
        prev_recall = recall
    return ap


def f1_thresholds(scores, labels) -> float:
    best = 0.0
    for t in set(scores):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        fn = sum(1 for s, y in zip(scores, labels) if s < t and y == 1)
        if tp:
            best = max(best, 2 * tp / (2 * tp + fp + fn))
    return best


def recall_at_tnr_sorted(normals, anomalies, tnr) -> float:
    ordered = sorted(normals)
    k = max(math.ceil(round(tnr * len(ordered), 9)) - 1, 0)
    t = ordered[k]
    return sum(1 for a in anomalies if a > t) / len(anomalies)


def inception_score_loops(rows, splits) -> tuple[float, float]:
    rows = [list(map(float, r)) for r in rows]
    n = len(rows)
    bounds = [0]
    base, extra = divmod(n, splits)
    for i in range(splits):
        bounds.append(bounds[-1] + base + (1 if i < extra else 0))
    values = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        part = rows[a:b]
        k = len(part[0])
        marginal = [sum(r[j] for r in part) / len(part) for j in range(k)]
        kls = []
        for r in part:
            kls.append(sum(p * math.log(p / q) for p, q in zip(r, marginal) if p > 0))
        values.append(math.exp(sum(kls) / len(kls)))
    mean = sum(values) / len(values)
    std = math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))
    return mean, std


def cluster_distance_oracle(generated, references, dist) -> float:
    """Exhaustive: nearest reference by full scan (lowest index on ties), then all unordered pairs."""
    groups: dict[int, list[int]] = {}
    for i, g in enumerate(generated):
        best, best_d = None, None
        for r, ref in enumerate(references):
            d = dist(g, ref)
            if best_d is None or d < best_d:
                best, best_d = r, d
        groups.setdefault(best, []).append(i)
    means = []
    for members in groups.values():
        if len(members) < 2:
            continue
        pairs = list(itertools.combinations(members, 2))
        means.append(sum(dist(generated[a], generated[b]) for a, b in pairs) / len(pairs))
    return sum(means) / len(means) if means else 0.0


def tps_dense_oracle(src, dst):
    """Thin-plate spline from a least-squares solve of the bordered system with U = r^2 log r.

    Uses a different (but equivalent up to a factor of 2) kernel so a shared
    kernel bug cannot pass unnoticed.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)

    def u(a, b):
        r = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(r > 0, r * r * np.log(r), 0.0)

    p = np.hstack([np.ones((n, 1)), src])
    top = np.hstack([u(src, src), p])
    bottom = np.hstack([p.T, np.zeros((3, 3))])
    system = np.vstack([top, bottom])
    rhs = np.vstack([dst, np.zeros((3, 2))])
    coef = np.linalg.lstsq(system, rhs, rcond=None)[0]

    def f(points):
        points = np.asarray(points, dtype=np.float64)
        q = np.hstack([np.ones((len(points), 1)), points])
        return u(points, src) @ coef[:n] + q @ coef[n:]

    return f


def feather_weight(region, h, w, feather):
    """Box weight: 1 inside, linear fall-off over ``feather`` pixels in Chebyshev distance."""
    x0, y0, x1, y1 = region[0] * (w - 1), region[1] * (h - 1), region[2] * (w - 1), region[3] * (h - 1)
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            d = max(x0 - x, x - x1, y0 - y, y - y1, 0.0)
            out[y, x] = 1.0 if d == 0 else (max(0.0, 1 - d / feather) if feather > 0 else 0.0)
    return out


def central_difference(f, param, index, eps=1e-6) -> float:
    """d f / d param[index] by central differences; ``param`` is modified in place and restored."""
    flat = param.data.view(-1)
    old = flat[index].item()
    flat[index] = old + eps
    hi = float(f())
    flat[index] = old - eps
    lo = float(f())
    flat[index] = old
    return (hi - lo) / (2 * eps)
