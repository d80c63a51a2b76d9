"""Patch-level segmentation head trained on synthetic anomalies.

The head is a small feed-forward net (D -> H -> 1, tanh hidden layer, or
plain linear-logistic when H = 0) trained on frozen patch features with the
sum of a soft-IoU loss and a focal loss.  Both losses return analytic
gradients with respect to the probabilities.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from glfm.nn import build_index
from glfm.rng import as_rng

LOGGER = logging.getLogger(__name__)

EPS = 1e-7


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def focal_loss(probs, labels, gamma: float = 2.0, alpha: float = 0.25):
    """Mean of ``-alpha * (1 - p_t)**gamma * log(p_t)`` and its gradient.

    ``p_t`` is ``p`` for positives and ``1 - p`` for negatives; ``alpha`` is
    applied to both classes.  Probabilities are clamped to [EPS, 1 - EPS].
    """
    p = np.clip(np.asarray(probs, dtype=np.float64), EPS, 1 - EPS)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("probs and labels differ in shape")
    n = p.size
    pt = np.where(y > 0.5, p, 1 - p)
    log_pt = np.log(pt)
    q = 1 - pt
    loss = -alpha * q ** gamma * log_pt
    if gamma == 0:
        dpt = -alpha / pt
    else:
        dpt = alpha * (gamma * q ** (gamma - 1) * log_pt - q ** gamma / pt)
    grad = np.where(y > 0.5, dpt, -dpt) / n
    return float(loss.mean()), grad


def soft_iou_loss(probs, labels):
    """``1 - sum(p*y) / sum(p + y - p*y)`` and its gradient."""
    p = np.clip(np.asarray(probs, dtype=np.float64), EPS, 1 - EPS)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("probs and labels differ in shape")
    if not np.any(y > 0):
        raise ValueError("soft IoU is undefined without positive labels")
    inter = np.sum(p * y)
    union = np.sum(p + y - p * y)
    loss = 1.0 - inter / union
    grad = -(y * union - inter * (1 - y)) / union ** 2
    return float(loss), grad


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class SegHead:
    weights: list  # [(W, b), ...]; last layer maps to a single logit

    @property
    def input_dim(self) -> int:
        return self.weights[0][0].shape[0]

    @property
    def hidden(self) -> int:
        return 0 if len(self.weights) == 1 else self.weights[0][0].shape[1]

    def copy(self) -> "SegHead":
        return SegHead([(w.copy(), b.copy()) for w, b in self.weights])

    def equals(self, other: "SegHead") -> bool:
        return len(self.weights) == len(other.weights) and all(
            np.array_equal(w1, w2) and np.array_equal(b1, b2)
            for (w1, b1), (w2, b2) in zip(self.weights, other.weights))


def init_head(dim: int, hidden: int = 0, rng=None, scale: float = 0.01) -> SegHead:
    rng = as_rng(rng)
    if hidden == 0:
        return SegHead([(rng.normal(0, scale, (dim, 1)), np.zeros(1))])
    return SegHead([(rng.normal(0, scale, (dim, hidden)), np.zeros(hidden)),
                    (rng.normal(0, scale, (hidden, 1)), np.zeros(1))])


def zero_head(dim: int, hidden: int = 0) -> SegHead:
    if hidden == 0:
        return SegHead([(np.zeros((dim, 1)), np.zeros(1))])
    return SegHead([(np.zeros((dim, hidden)), np.zeros(hidden)),
                    (np.zeros((hidden, 1)), np.zeros(1))])


def _forward(head: SegHead, x):
    acts = [x]
    h = x
    for i, (w, b) in enumerate(head.weights):
        h = h @ w + b
        if i < len(head.weights) - 1:
            h = np.tanh(h)
        acts.append(h)
    return acts


def head_logits(head: SegHead, rows) -> np.ndarray:
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.input_dim:
        raise ValueError(f"feature dimension {x.shape[-1]} != head input {head.input_dim}")
    return _forward(head, x)[-1][:, 0]


def predict_patch_probs(head: SegHead, features) -> np.ndarray:
    rows = features.local if hasattr(features, "local") else features
    return _sigmoid(head_logits(head, rows))


def _backward(head, acts, dlogit):
    grads = []
    delta = dlogit[:, None]
    for i in range(len(head.weights) - 1, -1, -1):
        w, _ = head.weights[i]
        grads.append((acts[i].T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ w.T) * (1 - acts[i] ** 2)
    return grads[::-1]


def combined_loss(probs, labels, gamma, alpha):
    """Soft-IoU + focal; the IoU term is dropped when there are no positives."""
    loss, grad = focal_loss(probs, labels, gamma, alpha)
    if np.any(np.asarray(labels) > 0):
        l2, g2 = soft_iou_loss(probs, labels)
        loss, grad = loss + l2, grad + g2
    return loss, grad


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    iterations: int = 4000
    batch_size: int = 256
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    momentum: float = 0.9
    hidden: int = 0
    seed: int = 0
    checkpoint_every: int = 100

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    head: SegHead
    trace: list = field(default_factory=list)  # [(iteration, full-data loss)]
    initial: SegHead | None = None


def patch_labels(centers, points, point_mask) -> np.ndarray:
    """Label each patch by majority vote of the points nearest to its centre.

    A patch is positive when at least half its member points are anomalous.
    Patches with no member points take the label of the point closest to
    the centre.
    """
    centers = np.asarray(centers, float)
    pts = np.asarray(points, float)
    mask = np.asarray(point_mask).astype(np.float64)
    owner = build_index(centers).query(pts, 1)[0][:, 0]
    members = np.bincount(owner, minlength=len(centers))
    positives = np.bincount(owner, weights=mask, minlength=len(centers))
    labels = np.zeros(len(centers), np.uint8)
    has = members > 0
    labels[has] = (positives[has] >= 0.5 * members[has]).astype(np.uint8)
    if np.any(~has):
        nearest = build_index(pts).query(centers[~has], 1)[0][:, 0]
        labels[~has] = (mask[nearest] > 0).astype(np.uint8)
    return labels


def _full_loss(head, x, y, cfg):
    probs = _sigmoid(head_logits(head, x))
    return combined_loss(probs, y, cfg.focal_gamma, cfg.focal_alpha)[0]


def train_seg_head(features, masks, cfg: TrainConfig = TrainConfig(), rng=None) -> TrainResult:
    """Mini-batch gradient descent with momentum on soft-IoU + focal loss.

    ``features`` is a list of FeatureSets (or M x D arrays) and ``masks`` the
    matching per-patch 0/1 labels.  The full-data loss is recorded at
    iteration 0 and every ``cfg.checkpoint_every`` iterations.
    """
    rows = [f.local if hasattr(f, "local") else np.asarray(f, float) for f in features]
    x = np.vstack(rows)
    y = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in masks])
    if len(x) != len(y):
        raise ValueError(f"{len(x)} patches but {len(y)} labels")
    rng = as_rng(rng if rng is not None else cfg.seed)
    head = init_head(x.shape[1], cfg.hidden, rng.split(0))
    initial = head.copy()
    order_rng = rng.split(1)
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in head.weights]
    trace = [(0, _full_loss(head, x, y, cfg))]
    n = len(x)
    bs = min(cfg.batch_size, n)
    perm, pos = order_rng.permutation(n), 0
    for it in range(1, cfg.iterations + 1):
        if pos + bs > n:
            perm, pos = order_rng.permutation(n), 0
        batch = perm[pos:pos + bs]
        pos += bs
        acts = _forward(head, x[batch])
        probs = _sigmoid(acts[-1][:, 0])
        loss, dprob = combined_loss(probs, y[batch], cfg.focal_gamma, cfg.focal_alpha)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at iteration {it}", trace)
        dlogit = dprob * probs * (1 - probs)
        grads = _backward(head, acts, dlogit)
        new_weights, new_velocity = [], []
        for (w, b), (gw, gb), (vw, vb) in zip(head.weights, grads, velocity):
            vw = cfg.momentum * vw - cfg.learning_rate * gw
            vb = cfg.momentum * vb - cfg.learning_rate * gb
            new_weights.append((w + vw, b + vb))
            new_velocity.append((vw, vb))
        head, velocity = SegHead(new_weights), new_velocity
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            full = _full_loss(head, x, y, cfg)
            if not np.isfinite(full):
                raise TrainingDiverged(f"loss became {full} at iteration {it}", trace)
            trace.append((it, full))
    return TrainResult(head, trace, initial)


def save_head(head: SegHead, path, meta: dict | None = None) -> None:
    """Flat little-endian float32 weights plus a ``<path>.json`` shape sidecar.

    ``meta`` is copied into the sidecar as-is.
    """
    shapes = []
    with open(path, "wb") as fh:
        for w, b in head.weights:
            fh.write(np.ascontiguousarray(w, "<f4").tobytes())
            fh.write(np.ascontiguousarray(b, "<f4").tobytes())
            shapes.append({"weight": list(w.shape), "bias": list(b.shape)})
    with open(str(path) + ".json", "w") as fh:
        json.dump({"layers": shapes, "hidden_activation": "tanh",
                   "output": "logistic", "meta": meta or {}}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_head(path) -> SegHead:
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    data = np.fromfile(path, dtype="<f4").astype(np.float64)
    pos, weights = 0, []
    for layer in meta["layers"]:
        ws, bs = tuple(layer["weight"]), tuple(layer["bias"])
        nw, nb = int(np.prod(ws)), int(np.prod(bs))
        if pos + nw + nb > len(data):
            raise ValueError(f"{path}: weight file shorter than its shape sidecar")
        w = data[pos:pos + nw].reshape(ws)
        pos += nw
        b = data[pos:pos + nb].reshape(bs)
        pos += nb
        weights.append((w, b))
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} unexpected trailing values")
    return SegHead(weights)


def logit_stats(head: SegHead, features) -> dict:
    """Mean and standard deviation of head logits over training patches.

    Detection uses these (with the stored distance statistics) to put bank
    distances and head logits on a common scale before fusing them.
    """
    rows = np.vstack([f.local if hasattr(f, "local") else np.asarray(f, float)
                      for f in features])
    z = head_logits(head, rows)
    return {"logit_mean": float(z.mean()), "logit_std": float(z.std())}
