"""Synthetic geometric defects: stretch a reference point's neighbourhood
along its estimated surface normal to make a labelled protrusion or
depression.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from glfm.cloud import PointCloud
from glfm.nn import build_index
from glfm.rng import SeededRng, as_rng

LOGGER = logging.getLogger(__name__)

RAMPS = ("literal", "inverted")


@dataclass(frozen=True)
class SynthesisConfig:
    k_normal: int = 16
    c_frac_range: tuple[float, float] = (0.01, 0.02)
    axis_weight_range: tuple[float, float] = (0.8, 1.2)
    protrusion_prob: float = 0.5
    defects_per_cloud: int = 1
    ramp: str = "literal"

    def __post_init__(self):
        object.__setattr__(self, "c_frac_range", tuple(float(v) for v in self.c_frac_range))
        object.__setattr__(self, "axis_weight_range",
                           tuple(float(v) for v in self.axis_weight_range))
        for name in ("c_frac_range", "axis_weight_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} needs 0 < lo <= hi, got {(lo, hi)}")
        if not 0.0 <= self.protrusion_prob <= 1.0:
            raise ValueError("protrusion_prob must lie in [0, 1]")
        if self.k_normal < 3:
            raise ValueError("k_normal must be >= 3")
        if self.defects_per_cloud < 1:
            raise ValueError("defects_per_cloud must be >= 1")
        if self.ramp not in RAMPS:
            raise ValueError(f"ramp must be one of {RAMPS}")


@dataclass(frozen=True)
class DefectRecord:
    """Everything needed to replay one defect without the RNG."""
    ref_index: int
    count: int
    direction: int
    weights: tuple[float, float, float]
    normal: tuple[float, float, float]
    rho: float
    height: float
    neighbors: tuple[int, ...]
    ramp: str
    degenerate_normal: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DefectRecord":
        return cls(
            ref_index=int(d["ref_index"]), count=int(d["count"]),
            direction=int(d["direction"]), weights=tuple(d["weights"]),
            normal=tuple(d["normal"]), rho=float(d["rho"]), height=float(d["height"]),
            neighbors=tuple(int(i) for i in d["neighbors"]), ramp=d["ramp"],
            degenerate_normal=bool(d.get("degenerate_normal", False)),
        )


@dataclass(frozen=True)
class SyntheticSample:
    cloud: PointCloud
    mask: np.ndarray
    defects: tuple[DefectRecord, ...] = field(default_factory=tuple)
    seed: int = 0

    def provenance(self) -> dict:
        return {"id": self.cloud.id, "seed": self.seed, "n_points": len(self.cloud),
                "defects": [d.to_dict() for d in self.defects]}


def _neighbors_excluding(index, points, ref_index, k):
    """``k`` nearest neighbours of point ``ref_index`` other than itself."""
    idx, _ = index.query(points[ref_index], min(k + 1, len(index)))
    idx = [int(i) for i in idx if i != ref_index]
    return idx[:k]


def _orient(normal, outward):
    d = float(normal @ outward)
    if abs(d) <= 1e-9:
        # no usable centroid direction: prefer +z, then +y, then +x
        for axis in (2, 1, 0):
            if abs(normal[axis]) > 1e-12:
                return normal if normal[axis] > 0 else -normal
        return normal
    return normal if d > 0 else -normal


def estimate_normal(cloud, ref_index: int, k_normal: int, index=None):
    """PCA normal at ``ref_index`` from its ``k_normal`` nearest neighbours.

    Returns ``(unit normal, degenerate)``.  The normal is the smallest-
    eigenvalue eigenvector of the neighbourhood covariance, flipped to point
    away from the cloud centroid.  A neighbourhood whose covariance has rank
    below 2 yields ``(0, 0, 1)`` with ``degenerate=True``.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    if len(pts) <= k_normal:
        raise ValueError(f"need more than k_normal={k_normal} points, have {len(pts)}")
    index = index or build_index(pts)
    nbrs = _neighbors_excluding(index, pts, ref_index, k_normal)
    q = pts[nbrs]
    cov = np.cov(q.T, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    if evals[2] <= 1e-15 or evals[1] <= 1e-10 * evals[2]:
        LOGGER.warning("degenerate neighbourhood at point %d; using +z normal", ref_index)
        return np.array([0.0, 0.0, 1.0]), True
    normal = evecs[:, 0] / np.linalg.norm(evecs[:, 0])
    outward = pts[ref_index] - pts.mean(axis=0)
    return _orient(normal, outward), False


def local_density(cloud, ref_index: int, index=None) -> float:
    """Distance between the first and second nearest neighbours of a point.

    Taken as written: it is the gap between the two neighbours, not the
    distance from the point to its nearest neighbour.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    if len(pts) < 3:
        raise ValueError("local density needs at least 3 points")
    index = index or build_index(pts)
    nbrs = _neighbors_excluding(index, pts, ref_index, 2)
    if len(nbrs) < 2:
        raise ValueError("fewer than 2 neighbours")
    return float(np.sqrt(np.sum((pts[nbrs[0]] - pts[nbrs[1]]) ** 2)))


def _ramp_factor(rank, count, ramp):
    if ramp == "literal":
        return rank / count
    return (count + 1 - rank) / count


def apply_defect(points, ref_index: int, count: int, weights, direction: int,
                 k_normal: int, ramp: str = "literal"):
    """Stretch one neighbourhood; returns ``(new points, DefectRecord)``.

    Neighbours are ranked in axis-weighted coordinates but moved in the
    original ones.  Rank ``j`` (1-based) is offset by
    ``direction * normal * height * j / count`` with ``height = rho * count``.
    """
    pts = np.array(points, dtype=np.float64)
    n = len(pts)
    if not 1 <= count <= n - 1:
        raise ValueError(f"count={count} must be in [1, {n - 1}]")
    index = build_index(pts)
    normal, degenerate = estimate_normal(pts, ref_index, k_normal, index=index)
    rho = local_density(pts, ref_index, index=index)
    height = rho * count
    w = np.asarray(weights, dtype=np.float64)
    scaled = build_index(pts * w)
    nbrs = _neighbors_excluding(scaled, pts * w, ref_index, count)
    for j, i in enumerate(nbrs, start=1):
        pts[i] = pts[i] + direction * normal * (height * _ramp_factor(j, count, ramp))
    rec = DefectRecord(
        ref_index=int(ref_index), count=int(count), direction=int(direction),
        weights=tuple(float(v) for v in w), normal=tuple(float(v) for v in normal),
        rho=rho, height=height, neighbors=tuple(nbrs), ramp=ramp,
        degenerate_normal=degenerate,
    )
    return pts, rec


def replay_defects(points, defects) -> tuple[np.ndarray, np.ndarray]:
    """Re-apply recorded defects; returns ``(points, mask)``."""
    pts = np.array(points, dtype=np.float64)
    mask = np.zeros(len(pts), np.uint8)
    for d in defects:
        normal = np.asarray(d.normal)
        for j, i in enumerate(d.neighbors, start=1):
            pts[i] = pts[i] + d.direction * normal * (
                d.height * _ramp_factor(j, d.count, d.ramp))
            mask[i] = 1
    return pts, mask


def draw_count(n: int, c_frac_range, rng: SeededRng) -> int:
    lo, hi = c_frac_range
    c = int(round(rng.uniform(lo * n, hi * n)))
    return min(max(c, 1), n - 1)


def synthesize_anomaly(cloud: PointCloud, config: SynthesisConfig = SynthesisConfig(),
                       rng=None) -> SyntheticSample:
    rng = as_rng(rng)
    n = len(cloud)
    need = max(config.k_normal + 1, int(np.ceil(config.c_frac_range[1] * n)))
    if n < need:
        raise ValueError(f"cloud {cloud.id!r} has {n} points, synthesis needs >= {need}")
    pts = np.array(cloud.points)
    mask = np.zeros(n, np.uint8) if cloud.mask is None else np.array(cloud.mask)
    records = []
    for _ in range(config.defects_per_cloud):
        ref = int(rng.integers(n))
        count = draw_count(n, config.c_frac_range, rng)
        weights = rng.uniform(*config.axis_weight_range, size=3)
        direction = 1 if rng.random() < config.protrusion_prob else -1
        pts, rec = apply_defect(pts, ref, count, weights, direction,
                                config.k_normal, config.ramp)
        mask[list(rec.neighbors)] = 1
        records.append(rec)
    return SyntheticSample(PointCloud(pts, mask, cloud.id), mask, tuple(records), rng.seed)
