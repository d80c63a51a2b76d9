"""Global/local memory banks: k-means over pooled global features, routing of
each sample's local features to its nearest centre, and a greedy k-center
coreset per bank.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from glfm.nn import build_index
from glfm.rng import as_rng

LOGGER = logging.getLogger(__name__)

MODEL_MAGIC = b"GLFMMODEL1\n"


def quantize(x) -> np.ndarray:
    """Round to float32 precision (the on-disk storage precision), keep float64."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _row_dist(x, y):
    return np.sqrt(np.sum((x - y) ** 2, axis=-1))


def _sse(x, centers, labels):
    return float(np.sum((x - centers[labels]) ** 2))


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    sse_trace: list
    iterations: int


def _kmeans_pp(x, k, rng):
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every remaining point duplicates a centre; take the lowest unused index
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(unused[0])
        else:
            cdf = np.cumsum(d2 / total)
            nxt = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            nxt = min(nxt, n - 1)
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[chosen].copy()


def _assign(x, centers):
    d = np.sqrt(np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2))
    return np.argmin(d, axis=1)


def kmeans(globals_, k: int, max_iters: int = 300, seed=0) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations.

    Stops at an assignment fixpoint or after ``max_iters``.  A cluster that
    goes empty is refilled with the point farthest from its current centre.
    The within-cluster SSE is checked to be non-increasing every iteration.
    """
    x = np.asarray(globals_, dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise ValueError("kmeans needs an N x D matrix with N >= 1")
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"K={k} must be between 1 and N={n}")
    rng = as_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels = _assign(x, centers)
    trace = [_sse(x, centers, labels)]
    it = 0
    for it in range(1, max_iters + 1):
        new_centers = centers.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centers[c] = x[members].mean(axis=0)
        new_labels = _assign(x, new_centers)
        _refill_empty(x, new_centers, new_labels, k)
        sse = _sse(x, new_centers, new_labels)
        if sse > trace[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means SSE increased at iteration {it}: {trace[-1]} -> {sse}")
        trace.append(sse)
        converged = np.array_equal(new_labels, labels)
        centers, labels = new_centers, new_labels
        if converged:
            break
    return KMeansResult(centers, labels, trace, it)


def _refill_empty(x, centers, labels, k):
    for c in range(k):
        if np.any(labels == c):
            continue
        d = _row_dist(x, centers[labels])
        # only steal from clusters that keep at least one member
        sizes = np.bincount(labels, minlength=k)
        d[sizes[labels] <= 1] = -1.0
        far = int(np.argmax(d))
        centers[c] = x[far]
        labels[far] = c


def assign_cluster(global_, centers) -> int:
    """Index of the nearest centre; ties go to the smallest index."""
    g = np.asarray(global_, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != g.shape[-1]:
        raise ValueError(f"dimension mismatch: centres {c.shape}, query {g.shape}")
    return int(np.argmin(_row_dist(c, g)))


def build_coreset(vectors, target_size: int) -> np.ndarray:
    """Greedy farthest-first k-center selection, picks returned in order."""
    x = np.asarray(vectors, dtype=np.float64)
    n = len(x)
    if not 1 <= target_size <= n:
        raise ValueError(f"target_size={target_size} must be between 1 and {n}")
    sq = np.einsum("ij,ij->i", x, x)
    tol = 1e-9 * (sq + sq.max()) + 1e-12

    def sqdist(y, rows=slice(None)):
        d = x[rows] - y
        return np.einsum("ij,ij->i", d, d)

    # Squared distances order the same way as distances.  Each step screens
    # rows with the cheap expansion |x|^2 + |y|^2 - 2 x.y and recomputes
    # exactly only rows whose minimum could change, so picks stay exact.
    first = int(np.argmax(sqdist(x.mean(axis=0))))
    picks = np.empty(target_size, np.int64)
    picks[0] = first
    mind = sqdist(x[first])
    for i in range(1, target_size):
        nxt = int(np.argmax(mind))
        picks[i] = nxt
        approx = sq + sq[nxt] - 2.0 * (x @ x[nxt])
        rows = np.flatnonzero(approx <= mind + tol)
        mind[rows] = np.minimum(mind[rows], sqdist(x[nxt], rows))
    return picks


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows) -> "Normalizer":
        rows = np.asarray(rows, dtype=np.float64)
        std = rows.std(axis=0)
        std[std <= 0] = 1.0
        return cls(rows.mean(axis=0), std)

    def apply(self, rows) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - self.mean) / self.std


@dataclass
class GlfmModel:
    centers: np.ndarray
    banks: list
    normalizer: Normalizer | None = None
    extractor_id: str = "unknown"
    coreset_fraction: float = 0.1
    provenance: dict = field(default_factory=dict)
    score_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.banks = [np.asarray(b, dtype=np.float64) for b in self.banks]
        k, d = self.centers.shape
        if k < 1 or len(self.banks) != k:
            raise ValueError(f"{k} centres but {len(self.banks)} banks")
        for i, b in enumerate(self.banks):
            if b.ndim != 2 or len(b) == 0 or b.shape[1] != d:
                raise ValueError(f"bank {i} has shape {b.shape}; expected non-empty x {d}")
        if self.normalizer is not None and np.any(self.normalizer.std <= 0):
            raise ValueError("normalizer std must be positive")
        self._indices = [None] * k

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def bank_index(self, i: int):
        if self._indices[i] is None:
            self._indices[i] = build_index(self.banks[i])
        return self._indices[i]

    def prepare_local(self, local) -> np.ndarray:
        """Apply the stored normalizer, then round to storage precision."""
        rows = np.asarray(local, dtype=np.float64)
        if self.normalizer is not None:
            rows = self.normalizer.apply(rows)
        return quantize(rows)

    def equals(self, other: "GlfmModel") -> bool:
        if self.k != other.k or self.dim != other.dim:
            return False
        same = np.array_equal(self.centers, other.centers) and all(
            np.array_equal(a, b) for a, b in zip(self.banks, other.banks))
        if (self.normalizer is None) != (other.normalizer is None):
            return False
        if self.normalizer is not None:
            same = same and np.array_equal(self.normalizer.mean, other.normalizer.mean) \
                and np.array_equal(self.normalizer.std, other.normalizer.std)
        return bool(same and self.extractor_id == other.extractor_id
                    and self.coreset_fraction == other.coreset_fraction
                    and self.provenance == other.provenance
                    and self.score_stats == other.score_stats)


def build_model(train_features, k: int, coreset_fraction: float = 0.1,
                normalize: bool = False, seed=0, max_iters: int = 300) -> GlfmModel:
    feats = list(train_features)
    n = len(feats)
    if n < 1:
        raise ValueError("no training features")
    if k > n:
        raise ValueError(f"K={k} exceeds the number of training samples ({n})")
    if not 0 < coreset_fraction <= 1:
        raise ValueError("coreset_fraction must be in (0, 1]")
    dims = {f.dim for f in feats}
    if len(dims) != 1:
        raise ValueError(f"training features have mixed dimensions {sorted(dims)}")
    ids = {f.extractor_id for f in feats}
    extractor_id = ids.pop() if len(ids) == 1 else "mixed"

    normalizer = Normalizer.fit(np.vstack([f.local for f in feats])) if normalize else None
    prep = [normalizer.apply(f.local) if normalizer else f.local for f in feats]
    globals_ = np.array([p.mean(axis=0) for p in prep])

    km = kmeans(globals_, k, max_iters=max_iters, seed=seed)
    centers = quantize(km.centers)
    routed = [assign_cluster(g, centers) for g in globals_]
    banks, sizes_all, sizes_kept, members = [], [], [], []
    for c in range(k):
        rows = [quantize(prep[j]) for j in range(n) if routed[j] == c]
        if not rows:
            raise AssertionError(f"cluster {c} received no training samples")
        allrows = np.vstack(rows)
        target = max(1, math.ceil(coreset_fraction * len(allrows)))
        picks = build_coreset(allrows, target)
        banks.append(allrows[picks])
        sizes_all.append(len(allrows))
        sizes_kept.append(target)
        members.append(sum(1 for j in range(n) if routed[j] == c))
    provenance = {
        "seed": int(as_rng(seed).seed),
        "n_train": n,
        "k": k,
        "kmeans_iterations": km.iterations,
        "kmeans_sse": km.sse_trace[-1],
        "cluster_sizes": members,
        "bank_sizes_before_coreset": sizes_all,
        "bank_sizes": sizes_kept,
        "routing": routed,
    }
    model = GlfmModel(centers, banks, normalizer, extractor_id, coreset_fraction, provenance)
    # distance statistics of training patches against their own bank, for score fusion
    dists = np.concatenate([
        model.bank_index(routed[j]).query(quantize(prep[j]), 1)[1][:, 0] for j in range(n)
    ])
    model.score_stats = {"dist_mean": float(dists.mean()), "dist_std": float(dists.std())}
    LOGGER.info("built model: K=%d, bank sizes %s", k, sizes_kept)
    return model


def save_model(model: GlfmModel, path) -> None:
    """JSON header followed by little-endian float32 blocks (centres, then banks)."""
    header = {
        "k": model.k,
        "d": model.dim,
        "coreset_fraction": model.coreset_fraction,
        "extractor_id": model.extractor_id,
        "bank_sizes": [len(b) for b in model.banks],
        "normalizer": None if model.normalizer is None else {
            "mean": [float(v) for v in model.normalizer.mean],
            "std": [float(v) for v in model.normalizer.std],
        },
        "provenance": model.provenance,
        "score_stats": model.score_stats,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(model.centers, "<f4").tobytes())
        for b in model.banks:
            fh.write(np.ascontiguousarray(b, "<f4").tobytes())


def load_model(path) -> GlfmModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MODEL_MAGIC):
        raise ValueError(f"{path}: not a GLFM model file")
    pos = len(MODEL_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    k, d = header["k"], header["d"]
    expected = pos + 4 * d * (k + sum(header["bank_sizes"]))
    if len(data) != expected:
        raise ValueError(f"{path}: byte {len(data)}: expected {expected} bytes")
    centers = np.frombuffer(data, "<f4", k * d, pos).reshape(k, d).astype(np.float64)
    pos += 4 * k * d
    banks = []
    for size in header["bank_sizes"]:
        banks.append(np.frombuffer(data, "<f4", size * d, pos).reshape(size, d).astype(np.float64))
        pos += 4 * size * d
    norm = header["normalizer"]
    normalizer = None if norm is None else Normalizer(np.array(norm["mean"]), np.array(norm["std"]))
    return GlfmModel(centers, banks, normalizer, header["extractor_id"],
                     header["coreset_fraction"], header["provenance"], header["score_stats"])
