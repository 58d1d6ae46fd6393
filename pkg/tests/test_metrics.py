import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from hybridsynth.core import DimensionError, Role, unit_plane
from hybridsynth.metrics import (InputError, MetricReport, MetricUndefinedError, RandomProjectionClassifier,
                                 ScoreSet, auroc, average_precision, cluster_lpips, f1_max, harmonic_mean,
                                 inception_score, pairwise_distances, perceptual_distance, pixel_metrics,
                                 rank_metrics, recall_at_tnr)
from hybridsynth.training import RandomConvFeatures

import oracles


def random_instance(rng):
    """Small score/label set with both classes and frequent ties."""
    n = int(rng.integers(2, 13))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    rng.shuffle(labels)
    scores = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.random(n)
    return scores, labels


scores_labels = st.integers(2, 12).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 5).map(lambda v: v / 5), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


def test_rank_metric_examples():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([0, 1], [0, 1]) == 1.0
    assert auroc([0.3] * 4, [0, 1, 0, 1]) == 0.5
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert f1_max([0.2, 0.9], [0, 1]) == 1.0
    assert f1_max([0.5, 0.5], [1, 0]) == pytest.approx(2 / 3)


def test_undefined_and_invalid_inputs():
    with pytest.raises(MetricUndefinedError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricUndefinedError):
        average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(MetricUndefinedError):
        f1_max([0.1], [0])
    with pytest.raises(InputError):
        ScoreSet([0.1, 0.2], [1])
    with pytest.raises(InputError):
        ScoreSet([0.1], [2])
    with pytest.raises(InputError):
        ScoreSet([float("nan")], [1])


def test_rank_metrics_match_oracles():
    rng = np.random.default_rng(0)
    for _ in range(300):
        s, y = random_instance(rng)
        assert abs(auroc(s, y) - oracles.auroc_pairs(s, y)) < 1e-9
        assert abs(average_precision(s, y) - oracles.ap_by_rank(list(s), list(y))) < 1e-9
        assert abs(f1_max(s, y) - oracles.f1_thresholds(list(s), list(y))) < 1e-9


def test_ap_matches_threshold_oracle_without_ties():
    rng = np.random.default_rng(1)
    for _ in range(200):
        s, y = random_instance(rng)
        s = rng.permutation(len(s)) / len(s)
        assert abs(average_precision(s, y) - oracles.ap_by_threshold(list(s), list(y))) < 1e-9


@given(scores_labels, st.sampled_from([np.exp, lambda v: 3 * v - 7, lambda v: v ** 3, np.arctan]))
def test_rank_metrics_monotone_invariant(sl, transform):
    s, y = np.array(sl[0]), np.array(sl[1])
    t = transform(s)
    assume(len(np.unique(t)) == len(np.unique(s)))
    for metric in (auroc, average_precision, f1_max):
        assert metric(t, y) == pytest.approx(metric(s, y), abs=1e-12)


@given(scores_labels)
def test_rank_metrics_in_unit_range(sl):
    m = rank_metrics(*sl)
    assert all(0 <= v <= 1 for v in m.values())


def test_recall_at_tnr_examples():
    normals = list(range(1, 21))
    assert recall_at_tnr(normals, [25, 15], 0.95) == 0.5
    assert recall_at_tnr(normals, [30, 40], 0.95) == 1.0
    assert recall_at_tnr(normals, [1, 1.5, 0.5], 0.01) == pytest.approx(1 / 3)
    with pytest.raises(InputError):
        recall_at_tnr([], [1], 0.95)
    with pytest.raises(InputError):
        recall_at_tnr([1], [], 0.95)
    with pytest.raises(InputError):
        recall_at_tnr([1], [2], 1.0)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.lists(st.floats(-5, 5), min_size=1, max_size=10),
       st.floats(0.01, 0.99))
def test_recall_at_tnr_matches_oracle(normals, anomalies, tnr):
    assert recall_at_tnr(normals, anomalies, tnr) == oracles.recall_at_tnr_sorted(normals, anomalies, tnr)


def test_harmonic_mean(caplog):
    assert harmonic_mean([0.5, 0.5, 0.5]) == pytest.approx(0.5)
    assert harmonic_mean([0.893, 0.036, 0.621]) == pytest.approx(0.098, abs=1e-3)
    assert harmonic_mean([0.847, 0.143, 0.621]) == pytest.approx(0.306, abs=1e-3)
    assert harmonic_mean([0.5, 0.0]) == 0.0
    assert "zero value" in caplog.text
    with pytest.raises(InputError):
        harmonic_mean([])
    with pytest.raises(InputError):
        harmonic_mean([0.5, -0.1])


@given(st.lists(st.floats(0.01, 1), min_size=1, max_size=8))
def test_harmonic_below_arithmetic(values):
    h, a = harmonic_mean(values), float(np.mean(values))
    assert h <= a + 1e-12
    if not np.allclose(values, values[0]):
        assert h < a


def test_pixel_metrics():
    rng = np.random.default_rng(2)
    masks = [(rng.random((4, 4)) > 0.5).astype(float) for _ in range(3)]
    masks[0][0, 0], masks[0][0, 1] = 1, 0
    assert pixel_metrics(masks, masks) == {"auroc": 1.0, "ap": 1.0, "f1max": 1.0}
    assert pixel_metrics([np.zeros((4, 4))] * 3, masks)["auroc"] == 0.5
    maps = [np.array([[0.1, 0.7], [0.4, 0.4]]), np.array([[0.9, 0.2], [0.3, 0.6]])]
    gts = [np.array([[0, 1], [1, 0]]), np.array([[1, 0], [0, 0]])]
    s, y = np.concatenate([m.ravel() for m in maps]), np.concatenate([g.ravel() for g in gts])
    got = pixel_metrics(maps, gts)
    assert got["auroc"] == pytest.approx(oracles.auroc_pairs(list(s), list(y)), abs=1e-12)
    assert got["ap"] == pytest.approx(oracles.ap_by_rank(list(s), list(y)), abs=1e-12)
    assert got["f1max"] == pytest.approx(oracles.f1_thresholds(list(s), list(y)), abs=1e-12)
    with pytest.raises(DimensionError):
        pixel_metrics([np.zeros((2, 2))], [np.zeros((3, 3))])


def test_inception_score_examples():
    one_hot = np.zeros((20, 5))
    one_hot[:, 2] = 1
    assert inception_score(one_hot, 4)[0] == 1.0
    k = 5
    distinct = np.tile(np.eye(k), (4, 1))
    mean, std = inception_score(distinct, 4)
    assert abs(mean - k) < 1e-6 and std < 1e-9
    with pytest.raises(InputError):
        inception_score(np.full((4, 3), 0.5), 2)
    with pytest.raises(InputError):
        inception_score(np.eye(3), 4)


def test_inception_score_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n, k, splits = int(rng.integers(5, 40)), int(rng.integers(2, 12)), int(rng.integers(1, 5))
        p = rng.dirichlet(np.full(k, 0.3), size=n)
        p[rng.random(p.shape) < 0.1] = 0
        p[:, 0] += 1e-3
        p /= p.sum(axis=1, keepdims=True)
        got = inception_score(p, splits)
        want = oracles.inception_score_loops(p, splits)
        assert abs(got[0] - want[0]) < 1e-9 and abs(got[1] - want[1]) < 1e-9


@given(st.integers(0, 2**31 - 1))
def test_inception_score_at_least_one(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(4), size=12)
    assert inception_score(p, 3)[0] >= 1 - 1e-12
    assert inception_score(np.repeat(p[:1], 12, axis=0), 3)[0] == pytest.approx(1.0, abs=1e-12)


def test_random_projection_classifier():
    rng = np.random.default_rng(4)
    imgs = [unit_plane(rng.random((16, 16, 3)), Role.COLOR) for _ in range(6)]
    clf = RandomProjectionClassifier(num_classes=7, seed=1)
    p = clf(imgs)
    assert p.shape == (6, 7) and np.allclose(p.sum(axis=1), 1)
    assert np.array_equal(p, RandomProjectionClassifier(num_classes=7, seed=1)(imgs))


@pytest.fixture(scope="module")
def backbone():
    return RandomConvFeatures(seed=11)


def test_perceptual_distance_properties(backbone):
    rng = np.random.default_rng(5)
    a, b = (unit_plane(rng.random((16, 16, 3)), Role.COLOR) for _ in range(2))
    assert perceptual_distance(a, a, backbone) == 0
    assert perceptual_distance(a, b, backbone) == pytest.approx(perceptual_distance(b, a, backbone), abs=1e-12)
    assert perceptual_distance(a, b, backbone) > 0
    with pytest.raises(DimensionError):
        perceptual_distance(a, unit_plane(rng.random((8, 8, 3)), Role.COLOR), backbone)


def test_pairwise_matches_single_distance(backbone):
    rng = np.random.default_rng(6)
    xs = [unit_plane(rng.random((16, 16, 3)), Role.COLOR) for _ in range(5)]
    ys = xs[:3]
    d = pairwise_distances(xs, ys, backbone=backbone, tile=2)
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            assert d[i, j] == perceptual_distance(x, y, backbone)


def test_cluster_lpips_identical_set_is_zero(backbone):
    img = unit_plane(np.random.default_rng(7).random((16, 16, 3)), Role.COLOR)
    refs = [unit_plane(np.random.default_rng(s).random((16, 16, 3)), Role.COLOR) for s in range(3)]
    assert cluster_lpips([img] * 6, refs, backbone) == 0.0


def plug_in_fixture():
    generated = [0.05, 0.1, 0.12, 0.31, 0.33, 0.35, 0.5, 0.52, 0.58, 0.6,
                 0.74, 0.76, 0.8, 0.95, 0.97, 1.0, 0.2, 0.45, 0.65, 0.9]
    references = [0.1, 0.35, 0.6, 0.9]
    return generated, references


def abs_diff(a, b):
    return abs(a - b)


def test_cluster_lpips_plug_in_matches_oracle():
    gen, refs = plug_in_fixture()
    want = oracles.cluster_distance_oracle(gen, refs, abs_diff)
    assert abs(cluster_lpips(gen, refs, distance=abs_diff) - want) < 1e-9


@given(st.permutations(list(range(20))))
@settings(max_examples=20)
def test_cluster_lpips_order_invariant(perm):
    gen, refs = plug_in_fixture()
    base = cluster_lpips(gen, refs, distance=abs_diff)
    assert cluster_lpips([gen[i] for i in perm], refs, distance=abs_diff) == pytest.approx(base, abs=1e-12)


def test_cluster_lpips_singletons_excluded():
    assert cluster_lpips([0.0, 1.0], [0.0, 1.0], distance=abs_diff) == 0.0
    assert cluster_lpips([0.0, 0.2, 1.0], [0.0, 1.0], distance=abs_diff) == pytest.approx(0.2)
    with pytest.raises(InputError):
        cluster_lpips([], [0.0], distance=abs_diff)


def test_metric_report_round_trip():
    rep = MetricReport(is_mean=1.5, is_std=0.1, cluster_lpips=0.2, image={"auroc": 0.9}, pixel={"ap": 0.4},
                       recalls={"linear": 0.8}, harmonic_mean=0.8, counts={"n": 3}).validate()
    d = json.loads(rep.to_json())
    assert d["schema"] == "hybridsynth.metric-report/1"
    assert MetricReport.from_dict(d) == rep
    with pytest.raises(InputError):
        MetricReport(image={"auroc": 1.5}).validate()
    with pytest.raises(InputError):
        MetricReport(is_mean=0.5).validate()
    with pytest.raises(InputError):
        MetricReport.from_dict({"schema": "other/9"})
    assert math.isfinite(rep.is_mean)
