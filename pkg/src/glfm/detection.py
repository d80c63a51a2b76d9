"""Inference: route a cloud by its global feature, score each patch by its
distance to the routed bank, spread patch scores onto points, and take the
maximum as the object score.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from glfm.bank import GlfmModel, assign_cluster
from glfm.cloud import PointCloud
from glfm.features import ExtractorConfig, FeatureSet, extract_local_features
from glfm.nn import build_index

LOGGER = logging.getLogger(__name__)

SMOOTHING = ("nearest", "gauss3")


@dataclass(frozen=True)
class AnomalyResult:
    point_scores: np.ndarray
    object_score: float
    routed_idx: int
    patch_scores: np.ndarray
    fused_scores: np.ndarray | None = None

    def __post_init__(self):
        assert self.object_score == float(np.max(self.point_scores))


def propagate_to_points(patch_scores, centers, cloud, smoothing: str = "nearest") -> np.ndarray:
    """Per-point scores from per-patch scores.

    ``nearest`` copies the score of the closest patch centre.  ``gauss3``
    takes a Gaussian-weighted mean over the three closest centres, with sigma
    equal to the median nearest-centre spacing.
    """
    if smoothing not in SMOOTHING:
        raise ValueError(f"smoothing must be one of {SMOOTHING}")
    scores = np.asarray(patch_scores, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if len(scores) < 1 or len(scores) != len(centers):
        raise ValueError("need at least one patch and one score per centre")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    if len(pts) == 0:
        return np.empty(0)
    index = build_index(centers)
    if smoothing == "nearest" or len(centers) == 1:
        idx, _ = index.query(pts, 1)
        return scores[idx[:, 0]]
    k = min(3, len(centers))
    idx, dist = index.query(pts, k)
    spacing = index.query(centers, 2)[1][:, 1]
    sigma = float(np.median(spacing))
    if sigma <= 0:
        sigma = 1.0
    # shift by the nearest distance so weights never underflow to all zeros
    w = np.exp(-(dist ** 2 - dist[:, :1] ** 2) / (2 * sigma ** 2))
    return np.sum(w * scores[idx], axis=1) / np.sum(w, axis=1)


def _features_for(cloud, model, source) -> FeatureSet:
    if isinstance(source, FeatureSet):
        return source
    cfg = source if source is not None else ExtractorConfig()
    if cfg.extractor_id != model.extractor_id:
        raise ValueError(
            f"extractor mismatch: model built with {model.extractor_id!r}, "
            f"detection configured with {cfg.extractor_id!r}"
        )
    return extract_local_features(cloud, cfg)


def detect(cloud: PointCloud, model: GlfmModel, features=None, head=None,
           fusion_weight: float = 0.0, smoothing: str = "nearest") -> AnomalyResult:
    """Score one cloud against ``model``.

    ``features`` is either an ``ExtractorConfig`` (features are computed
    here) or a precomputed ``FeatureSet``.  With ``head`` and a positive
    ``fusion_weight`` the patch score becomes a blend of the z-scored bank
    distance and the z-scored head logit; both use training statistics
    stored in the model.
    """
    if len(cloud) == 0:
        raise ValueError(f"cloud {cloud.id!r} is empty")
    fs = _features_for(cloud, model, features)
    if fs.dim != model.dim:
        raise ValueError(f"feature dimension {fs.dim} != model dimension {model.dim}")
    raw = np.asarray(fs.local, dtype=np.float64)
    normed = model.normalizer.apply(raw) if model.normalizer is not None else raw
    idx = assign_cluster(normed.mean(axis=0), model.centers)
    local = model.prepare_local(raw)
    patch = model.bank_index(idx).query(local, 1)[1][:, 0]

    fused = None
    scored = patch
    if head is not None and fusion_weight > 0:
        from glfm.adaptation import head_logits

        stats = model.score_stats
        if "logit_mean" not in stats:
            raise ValueError("model has no head-logit statistics; refit with the head")
        dz = (patch - stats["dist_mean"]) / (stats["dist_std"] or 1.0)
        logits = head_logits(head, raw)
        lz = (logits - stats["logit_mean"]) / (stats["logit_std"] or 1.0)
        fused = (1 - fusion_weight) * dz + fusion_weight * lz
        # softplus keeps scores non-negative with one fixed monotone map for all samples
        scored = np.logaddexp(0.0, fused)

    points = propagate_to_points(scored, fs.centers, cloud, smoothing)
    return AnomalyResult(points, float(np.max(points)), idx, patch, fused)
