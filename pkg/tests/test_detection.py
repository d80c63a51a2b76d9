import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glfm import toy
from glfm.adaptation import init_head, logit_stats
from glfm.bank import build_model
from glfm.cloud import PointCloud
from glfm.detection import detect, propagate_to_points
from glfm.features import ExtractorConfig, FeatureSet, extract_local_features
from glfm.nn import build_index, nearest_distance
from glfm.rng import SeededRng
from glfm.synthesis import SynthesisConfig, synthesize_anomaly


@pytest.fixture(scope="module")
def plane_model():
    feats = [extract_local_features(toy.plane_patch(2000, rng=SeededRng(i))) for i in range(6)]
    return build_model(feats, 1, coreset_fraction=1.0)


def test_self_match_scores_zero():
    cloud = toy.sphere(1500, rng=SeededRng(0))
    fs = extract_local_features(cloud)
    model = build_model([fs], 1, coreset_fraction=1.0)
    res = detect(cloud, model, ExtractorConfig())
    assert res.object_score == 0.0
    assert np.all(res.patch_scores == 0)


def test_bump_argmax_inside_mask(plane_model):
    hits = 0
    for seed in range(10):
        base = toy.plane_patch(2000, rng=SeededRng(100 + seed))
        s = synthesize_anomaly(base, SynthesisConfig(), SeededRng(seed))
        res = detect(s.cloud, plane_model, ExtractorConfig())
        hits += bool(s.mask[int(np.argmax(res.point_scores))])
        assert res.object_score == res.point_scores.max()
    assert hits == 10


def test_detect_deterministic_and_thread_safe(plane_model):
    cloud = toy.sphere(1500, rng=SeededRng(1))
    fs = extract_local_features(cloud)
    first = detect(cloud, plane_model, fs)
    out = [None] * 6

    def work(i):
        out[i] = detect(cloud, plane_model, fs)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for r in out:
        assert r.point_scores.tobytes() == first.point_scores.tobytes()


def test_detect_errors(plane_model):
    cloud = toy.plane_patch(500, rng=SeededRng(2))
    with pytest.raises(ValueError, match="dimension"):
        detect(cloud, plane_model, FeatureSet(np.zeros((2, 3)), np.ones((2, 5))))
    with pytest.raises(ValueError, match="extractor mismatch"):
        detect(cloud, plane_model, ExtractorConfig(fpfh_radius=0.2))
    with pytest.raises(ValueError, match="empty"):
        detect(PointCloud(np.zeros((0, 3))), plane_model, ExtractorConfig())


def test_propagation_examples():
    pts = np.random.default_rng(0).normal(size=(50, 3))
    assert np.all(propagate_to_points([2.5], [[0, 0, 0]], pts) == 2.5)
    assert np.all(propagate_to_points([2.5], [[0, 0, 0]], pts, "gauss3") == 2.5)
    centers = pts[[3, 10, 20]]
    out = propagate_to_points([1.0, 2.0, 3.0], centers, pts)
    assert list(out[[3, 10, 20]]) == [1.0, 2.0, 3.0]
    with pytest.raises(ValueError):
        propagate_to_points([], np.zeros((0, 3)), pts)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gauss3_is_convex_combination(seed):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(int(rng.integers(3, 30)), 3))
    scores = rng.uniform(0, 5, len(centers))
    pts = rng.normal(size=(100, 3))
    out = propagate_to_points(scores, centers, pts, "gauss3")
    idx, _ = build_index(centers).query(pts, 3)
    lo, hi = scores[idx].min(axis=1), scores[idx].max(axis=1)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_superset_bank_never_increases_distance(seed):
    rng = np.random.default_rng(seed)
    bank = rng.normal(size=(int(rng.integers(1, 40)), 6))
    extra = rng.normal(size=(int(rng.integers(1, 40)), 6))
    q = rng.normal(size=(30, 6))
    a = nearest_distance(build_index(bank), q)
    b = nearest_distance(build_index(np.vstack([bank, extra])), q)
    assert np.all(b <= a)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_routing_scale_invariance(seed, scale):
    from glfm.bank import assign_cluster

    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(5, 4))
    g = rng.normal(size=4)
    assert assign_cluster(g, centers) == assign_cluster(scale * g, scale * centers)


def test_fusion(plane_model):
    train = [extract_local_features(toy.plane_patch(2000, rng=SeededRng(i))) for i in range(2)]
    head = init_head(plane_model.dim, rng=SeededRng(0), scale=0.1)
    plane_model.score_stats.update(logit_stats(head, train))
    cloud = toy.sphere(1500, rng=SeededRng(3))
    fs = extract_local_features(cloud)
    plain = detect(cloud, plane_model, fs)
    off = detect(cloud, plane_model, fs, head=head, fusion_weight=0.0)
    assert off.point_scores.tobytes() == plain.point_scores.tobytes()
    fused = detect(cloud, plane_model, fs, head=head, fusion_weight=0.5)
    assert fused.fused_scores is not None
    assert np.all(fused.point_scores >= 0) and fused.object_score == fused.point_scores.max()
