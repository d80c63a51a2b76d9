"""Per-patch local features, pooled global feature, and feature files.

The built-in extractor is a 33-bin Fast Point Feature Histogram evaluated at
farthest-point-sampled patch centres.  Deep features produced elsewhere come
in through GFT1 files (see ``save_features`` / ``load_external_features``).
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.spatial import cKDTree

from glfm.cloud import PointCloud

LOGGER = logging.getLogger(__name__)

FEAT_MAGIC = b"GFT1"
FPFH_BINS = 11
FPFH_DIM = 3 * FPFH_BINS


class FeatureError(ValueError):
    pass


def pool_global(local) -> np.ndarray:
    """Column-wise mean of the local feature rows (average pooling)."""
    local = np.asarray(local, dtype=np.float64)
    if local.ndim != 2 or local.shape[0] < 1:
        raise ValueError("pool_global needs an M x D matrix with M >= 1")
    return local.mean(axis=0)


@dataclass(frozen=True)
class FeatureSet:
    centers: np.ndarray
    local: np.ndarray
    extractor_id: str = "unknown"
    layer_tags: tuple | None = None
    center_indices: np.ndarray | None = None
    global_: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        local = np.array(self.local, dtype=np.float64)
        if local.ndim != 2 or local.shape[0] < 1 or local.shape[1] < 1:
            raise FeatureError(f"local features must be M x D with M, D >= 1, got {local.shape}")
        if not np.all(np.isfinite(local)):
            raise FeatureError("local features contain non-finite entries")
        centers = np.array(self.centers, dtype=np.float64).reshape(-1, 3)
        if len(centers) != len(local):
            raise FeatureError(f"{len(centers)} centres for {len(local)} feature rows")
        object.__setattr__(self, "local", local)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "global_", pool_global(local))
        if self.layer_tags is not None:
            object.__setattr__(self, "layer_tags", tuple(self.layer_tags))

    @property
    def global_feature(self) -> np.ndarray:
        return self.global_

    @property
    def dim(self) -> int:
        return self.local.shape[1]

    def __len__(self) -> int:
        return self.local.shape[0]


@dataclass(frozen=True)
class ExtractorConfig:
    kind: str = "fpfh"
    patch_count: int | None = None
    fpfh_radius: float | str = "auto"
    normalize: str = "none"
    k_normal: int = 10
    auto_radius_factor: float = 5.0

    def __post_init__(self):
        if self.kind not in ("fpfh", "external"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.patch_count is not None and self.patch_count < 1:
            raise ValueError("patch_count must be >= 1")
        if self.fpfh_radius != "auto" and not float(self.fpfh_radius) > 0:
            raise ValueError("fpfh_radius must be positive or 'auto'")
        if self.normalize not in ("none", "zscore"):
            raise ValueError("normalize must be 'none' or 'zscore'")

    @property
    def extractor_id(self) -> str:
        if self.kind == "external":
            return "external"
        radius = ("auto%g" % self.auto_radius_factor if self.fpfh_radius == "auto"
                  else "r%g" % float(self.fpfh_radius))
        m = "default" if self.patch_count is None else str(self.patch_count)
        return f"fpfh33:{radius}:k{self.k_normal}:m{m}"


def default_patch_count(n: int) -> int:
    return max(1, min(1024, n // 8))


def sample_patch_centers(cloud, m: int, rng=None) -> np.ndarray:
    """Farthest point sampling.

    Starts from the point nearest the centroid, then repeatedly takes the
    point with the largest distance to the chosen set; ties go to the smaller
    index.  ``rng`` is accepted for interface symmetry and not consumed.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    n = len(pts)
    if m > n:
        raise ValueError(f"cannot sample {m} centres from {n} points")
    if m < 1:
        return np.empty(0, np.int64)
    x, y, z = pts[:, 0].copy(), pts[:, 1].copy(), pts[:, 2].copy()
    c = pts.mean(axis=0)
    first = int(np.argmin((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2))
    chosen = np.empty(m, np.int64)
    chosen[0] = first
    mind = (x - x[first]) ** 2 + (y - y[first]) ** 2 + (z - z[first]) ** 2
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.minimum(mind, (x - x[nxt]) ** 2 + (y - y[nxt]) ** 2 + (z - z[nxt]) ** 2, out=mind)
    return chosen


def median_spacing(points) -> float:
    pts = np.asarray(points, float)
    if len(pts) < 2:
        return 0.0
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(d[:, 1]))


def estimate_normals(points, k: int = 10, neighbors=None) -> np.ndarray:
    """PCA normals for every point, oriented away from the cloud centroid.

    ``neighbors`` may hold a precomputed (N, >=k) nearest-neighbour table
    (self included) to skip the tree query.
    """
    pts = np.asarray(points, float)
    k = min(k, len(pts))
    if neighbors is None:
        _, neighbors = cKDTree(pts).query(pts, k=k)
    nbr = np.asarray(neighbors).reshape(len(pts), -1)[:, :k]
    q = pts[nbr]
    q = q - q.mean(axis=1, keepdims=True)
    cov = np.matmul(q.transpose(0, 2, 1), q) / k
    _, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    outward = pts - pts.mean(axis=0)
    flip = np.einsum("ij,ij->i", normals, outward) < 0
    normals[flip] *= -1
    return normals


def _pair_features(p_s, n_s, p_t, n_t):
    """Darboux-frame angle triple (theta, alpha, phi) for arrays of pairs.

    The triple does not depend on the sign of either normal: the target
    normal is aligned with the source, and the pair is then mirrored so that
    phi >= 0 (which negates theta).
    """
    n_t = np.where((np.einsum("ij,ij->i", n_s, n_t) < 0)[:, None], -n_t, n_t)
    d = p_t - p_s
    dist = np.linalg.norm(d, axis=1)
    d = d / dist[:, None]
    a_s = np.einsum("ij,ij->i", n_s, d)
    a_t = np.einsum("ij,ij->i", n_t, d)
    # pick the source whose normal makes the smaller angle with the pair line
    swap = np.abs(a_s) < np.abs(a_t)
    u = np.where(swap[:, None], n_t, n_s)
    other = np.where(swap[:, None], n_s, n_t)
    d = np.where(swap[:, None], -d, d)
    phi = np.where(swap, -a_t, a_s)
    v = np.cross(d, u)
    vn = np.linalg.norm(v, axis=1)
    ok = vn > 1e-12
    v[ok] /= vn[ok, None]
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, other)
    theta = np.arctan2(np.einsum("ij,ij->i", w, other), np.einsum("ij,ij->i", u, other))
    neg = phi < 0
    phi = np.abs(phi)
    theta = np.where(neg, -theta, theta)
    return theta, alpha, phi, ok


def _bin(values, lo, hi):
    b = np.floor((values - lo) / (hi - lo) * FPFH_BINS).astype(np.int64)
    return np.clip(b, 0, FPFH_BINS - 1)


def _radius_pairs(pts, radius, tree=None):
    """Unordered pairs (i < j) of distinct-position points within ``radius``."""
    tree = cKDTree(pts) if tree is None else tree
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.empty((0, 2), np.int64), np.empty(0)
    dist = np.sqrt(np.sum((pts[pairs[:, 0]] - pts[pairs[:, 1]]) ** 2, axis=1))
    keep = dist > 0
    return pairs[keep].astype(np.int64), dist[keep]


def _spfh(pts, normals, pairs):
    """Simplified histograms for every point; each 11-bin block sums to 1."""
    n = len(pts)
    hist = np.zeros(n * FPFH_DIM)
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        theta, alpha, phi, _ = _pair_features(pts[i], normals[i], pts[j], normals[j])
        cols = np.concatenate([_bin(theta, -np.pi, np.pi),
                               FPFH_BINS + _bin(alpha, -1.0, 1.0),
                               2 * FPFH_BINS + _bin(phi, 0.0, 1.0)])
        # the pair triple is credited to both endpoints
        flat = np.concatenate([np.tile(i, 3) * FPFH_DIM + cols,
                               np.tile(j, 3) * FPFH_DIM + cols])
        hist = np.bincount(flat, minlength=n * FPFH_DIM).astype(np.float64)
    hist = hist.reshape(n, FPFH_DIM)
    counts = np.bincount(pairs.ravel(), minlength=n).astype(np.float64)
    nonempty = counts > 0
    hist[nonempty] /= counts[nonempty, None]
    return hist, counts


def fpfh_at(points, center_idx, radius: float, normals=None, k_normal: int = 10,
            tree=None):
    """FPFH descriptors (M x 33) at ``center_idx`` and each centre's neighbour count.

    Each 11-bin block of the result sums to 2: one unit from the centre's own
    simplified histogram, one from the distance-weighted neighbour average.
    """
    pts = np.asarray(points, float)
    center_idx = np.asarray(center_idx, np.int64)
    n = len(pts)
    if normals is None:
        normals = estimate_normals(pts, k_normal)
    pairs, dist = _radius_pairs(pts, radius, tree)
    spfh, counts = _spfh(pts, normals, pairs)

    row = np.full(n, -1, np.int64)
    row[center_idx] = np.arange(len(center_idx))
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    w = np.concatenate([dist, dist])
    sel = row[src] >= 0
    weights = coo_matrix((1.0 / w[sel], (row[src[sel]], dst[sel])),
                         shape=(len(center_idx), n)).tocsr()
    weighted = np.asarray(weights @ spfh)
    for b in range(3):
        block = weighted[:, b * FPFH_BINS:(b + 1) * FPFH_BINS]
        tot = block.sum(axis=1, keepdims=True)
        np.divide(block, tot, out=block, where=tot > 0)
    desc = spfh[center_idx] + weighted
    return desc, counts[center_idx].astype(np.int64)


def extract_local_features(cloud: PointCloud, cfg: ExtractorConfig = ExtractorConfig(),
                           rng=None) -> FeatureSet:
    if cfg.kind != "fpfh":
        raise FeatureError("external features are loaded with load_external_features")
    pts = cloud.points
    n = len(pts)
    if n < 3:
        raise FeatureError(f"cloud {cloud.id!r} has too few points ({n})")
    m = min(cfg.patch_count or default_patch_count(n), n)
    # one tree and one neighbour query serve spacing, normals and pairs
    tree = cKDTree(pts)
    knn_d, knn_i = tree.query(pts, k=min(max(cfg.k_normal, 2), n))
    if cfg.fpfh_radius == "auto":
        radius = cfg.auto_radius_factor * float(np.median(knn_d[:, 1]))
    else:
        radius = float(cfg.fpfh_radius)
    if not radius > 0:
        raise FeatureError(f"cloud {cloud.id!r}: FPFH radius {radius} is not positive")
    centers = sample_patch_centers(pts, m, rng)
    normals = estimate_normals(pts, cfg.k_normal, neighbors=knn_i)
    desc, counts = fpfh_at(pts, centers, radius, normals=normals, tree=tree)
    empty = np.mean(counts == 0)
    if empty > 0.5:
        raise FeatureError(
            f"cloud {cloud.id!r}: {empty:.0%} of patch centres have no neighbours "
            f"within radius {radius:g}"
        )
    return FeatureSet(pts[centers], desc, cfg.extractor_id, ("fpfh33",), centers)


def save_features(fs: FeatureSet, path) -> None:
    """Write a GFT1 file: magic, u32 M, u32 D, M*D float32 features, 3*M float32 centres."""
    m, d = fs.local.shape
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<II", m, d))
        fh.write(np.ascontiguousarray(fs.local, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(fs.centers, dtype="<f4").tobytes())


def load_external_features(path, extractor_id: str = "external") -> FeatureSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise FeatureError(f"{path}: byte {len(data)}: file shorter than the 12-byte header")
    if data[:4] != FEAT_MAGIC:
        raise FeatureError(f"{path}: byte 0: bad magic {data[:4]!r}, expected {FEAT_MAGIC!r}")
    m, d = struct.unpack("<II", data[4:12])
    if m < 1 or d < 1:
        raise FeatureError(f"{path}: byte 4: M={m}, D={d}; both must be >= 1")
    feat_end = 12 + 4 * m * d
    end = feat_end + 12 * m
    if len(data) < feat_end:
        raise FeatureError(
            f"{path}: byte {len(data)}: truncated feature block, expected data up to byte {feat_end}")
    if len(data) < end:
        raise FeatureError(
            f"{path}: byte {len(data)}: truncated centre block, expected data up to byte {end}")
    if len(data) > end:
        raise FeatureError(f"{path}: byte {end}: {len(data) - end} trailing bytes")
    local = np.frombuffer(data, "<f4", m * d, 12).reshape(m, d).astype(np.float64)
    centers = np.frombuffer(data, "<f4", 3 * m, feat_end).reshape(m, 3).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(local).ravel())
    if len(bad):
        raise FeatureError(f"{path}: byte {12 + 4 * bad[0]}: non-finite feature value")
    return FeatureSet(centers, local, extractor_id)
