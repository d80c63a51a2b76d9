import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glfm.adaptation import (SegHead, TrainConfig, TrainingDiverged, focal_loss, init_head,
                             load_head, patch_labels, predict_patch_probs, save_head,
                             soft_iou_loss, train_seg_head, zero_head)
from glfm.rng import SeededRng
from oracles import central_difference


def separable(seed, n=200, dim=5):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(scale=0.1, size=(n, dim))
    x[:, 0] += np.where(y == 1, 1.0, -1.0)
    return x, y


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_focal_examples():
    assert focal_loss([1.0], [1], 2, 1)[0] == pytest.approx(0.0, abs=1e-20)
    assert focal_loss([0.5], [1], 2, 1)[0] == pytest.approx(0.25 * math.log(2), rel=1e-12)


def test_iou_examples():
    assert soft_iou_loss([1.0, 0.0], [1, 0])[0] == pytest.approx(0.0, abs=1e-6)
    assert soft_iou_loss([0.5, 0.5], [1, 0])[0] == pytest.approx(2 / 3, rel=1e-12)
    with pytest.raises(ValueError):
        soft_iou_loss([0.5, 0.5], [0, 0])


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 60))
        p = rng.uniform(0.05, 0.95, n)
        y = rng.integers(0, 2, n)
        y[0] = 1
        gamma, alpha = rng.uniform(0, 4), rng.uniform(0.1, 1)
        g = focal_loss(p, y, gamma, alpha)[1]
        fd = central_difference(lambda q: focal_loss(q, y, gamma, alpha)[0], p)
        assert _rel_err(g, fd) <= 1e-4
        g = soft_iou_loss(p, y)[1]
        fd = central_difference(lambda q: soft_iou_loss(q, y)[0], p)
        assert _rel_err(g, fd) <= 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_focal_reduces_to_bce(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(1e-3, 1 - 1e-3, 40)
    y = rng.integers(0, 2, 40)
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert abs(focal_loss(p, y, 0.0, 1.0)[0] - bce) <= 1e-12


def test_zero_head_and_shapes():
    head = zero_head(4)
    assert np.array_equal(predict_patch_probs(head, np.ones((7, 4))), np.full(7, 0.5))
    with pytest.raises(ValueError):
        predict_patch_probs(head, np.ones((7, 3)))
    deep = init_head(4, hidden=3, rng=SeededRng(0))
    probs = predict_patch_probs(deep, np.random.default_rng(0).normal(size=(9, 4)))
    assert probs.shape == (9,) and np.all((probs > 0) & (probs < 1))


@pytest.mark.parametrize("hidden", [0, 4])
def test_separable_toy(hidden):
    x, y = separable(0)
    cfg = TrainConfig(iterations=500, batch_size=32, hidden=hidden, checkpoint_every=10)
    res = train_seg_head([x], [y], cfg, SeededRng(1))
    probs = predict_patch_probs(res.head, x)
    assert np.all((probs > 0.5) == (y == 1))
    assert probs[y == 1].min() > 0.9
    losses = np.array([l for _, l in res.trace])
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-12)


def test_zero_iterations_and_determinism():
    x, y = separable(2)
    res = train_seg_head([x], [y], TrainConfig(iterations=0), SeededRng(3))
    assert res.head.equals(res.initial)
    assert len(res.trace) == 1
    a = train_seg_head([x], [y], TrainConfig(iterations=50), SeededRng(4)).head
    b = train_seg_head([x], [y], TrainConfig(iterations=50), SeededRng(4)).head
    assert all(w1.tobytes() == w2.tobytes() and b1.tobytes() == b2.tobytes()
               for (w1, b1), (w2, b2) in zip(a.weights, b.weights))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_trace():
    x, y = separable(5)
    cfg = TrainConfig(iterations=20, learning_rate=float("inf"))
    with pytest.raises(TrainingDiverged) as err:
        train_seg_head([x], [y], cfg, SeededRng(0))
    assert err.value.trace and err.value.trace[0][0] == 0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1)
    x, y = separable(0)
    with pytest.raises(ValueError):
        train_seg_head([x], [y[:-1]])


def test_head_save_load(tmp_path):
    head = init_head(6, hidden=3, rng=SeededRng(2))
    head = SegHead([(w.astype(np.float32).astype(np.float64), b) for w, b in head.weights])
    save_head(head, tmp_path / "h.bin", meta={"seed": 2})
    assert load_head(tmp_path / "h.bin").equals(head)
    (tmp_path / "h.bin").write_bytes((tmp_path / "h.bin").read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_head(tmp_path / "h.bin")


def test_patch_labels_majority_and_ties():
    centers = np.array([[0, 0, 0], [10, 0, 0], [50, 0, 0]], float)
    pts = np.array([[0.1, 0, 0], [-0.1, 0, 0], [10.1, 0, 0], [9.9, 0, 0], [9.8, 0, 0]], float)
    # centre 0: one of two positive (tie -> positive); centre 1: one of three
    # positive; centre 2 owns nothing and copies its nearest point (index 2)
    labels = patch_labels(centers, pts, [1, 0, 1, 0, 0])
    assert list(labels) == [1, 0, 1]
