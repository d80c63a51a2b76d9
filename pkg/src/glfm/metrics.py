"""Object- and point-wise AUROC, native 3D per-region-overlap (AUPRO), and
score dumps for external plotting.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.stats import rankdata


def auroc(scores, labels) -> float:
    """Normalised Mann-Whitney U: P(pos > neg) + 0.5 * P(tie)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """(fpr, tpr) at every distinct threshold, starting from (0, 0)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return (np.r_[0.0, fp / max(fp[-1], 1)], np.r_[0.0, tp / max(tp[-1], 1)])


def connected_regions(cloud, mask, radius: float) -> np.ndarray:
    """Connected components of the mask-positive points under a radius graph.

    Returns one id per point: dense region ids from 0 (numbered in order of
    each region's lowest point index) and -1 for negative points.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    pts = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, float)
    m = np.asarray(mask).astype(bool).ravel()
    ids = np.full(len(pts), -1, np.int64)
    pos = np.flatnonzero(m)
    if len(pos) == 0:
        return ids
    pairs = cKDTree(pts[pos]).query_pairs(radius, output_type="ndarray")
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
                   shape=(len(pos), len(pos)))
    _, comp = connected_components(g, directed=False)
    # renumber by first appearance so ids do not depend on scipy's labelling
    _, first = np.unique(comp, return_index=True)
    remap = np.empty(len(first), np.int64)
    remap[np.argsort(np.argsort(first))] = np.arange(len(first))
    ids[pos] = remap[comp]
    return ids


def pro_curve(point_scores, region_ids, labels=None):
    """(fpr, pro) at every distinct threshold, starting from (0, 0).

    A point counts as detected at threshold t when its score is >= t.  PRO is
    the mean over regions of the detected fraction of that region.
    """
    s = np.asarray(point_scores, dtype=np.float64).ravel()
    r = np.asarray(region_ids, dtype=np.int64).ravel()
    neg = (r < 0) if labels is None else ~np.asarray(labels).astype(bool).ravel()
    in_region = r >= 0
    n_regions = len(np.unique(r[in_region]))
    if n_regions == 0:
        raise ValueError("aupro needs at least one anomalous region")
    if not neg.any():
        raise ValueError("aupro needs negative points")
    sizes = np.bincount(r[in_region])
    weight = np.zeros(len(s))
    weight[in_region] = 1.0 / (n_regions * sizes[r[in_region]])
    order = np.argsort(-s, kind="stable")
    s, weight, neg = s[order], weight[order], neg[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    pro = np.cumsum(weight)[last]
    fpr = np.cumsum(neg)[last] / neg.sum()
    return np.r_[0.0, fpr], np.r_[0.0, np.minimum(pro, 1.0)]


def _area_to(x, y, limit):
    """Trapezoid area under a monotone-in-x curve from 0 to ``limit``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    keep = x <= limit
    xs, ys = x[keep], y[keep]
    if xs[-1] < limit:
        j = int(np.searchsorted(x, limit, side="right"))
        if j < len(x):
            # interpolate along the segment that crosses the limit
            x0, x1, y0, y1 = x[j - 1], x[j], y[j - 1], y[j]
            yl = y0 + (y1 - y0) * (limit - x0) / (x1 - x0) if x1 > x0 else y1
        else:
            yl = ys[-1]
        xs, ys = np.r_[xs, limit], np.r_[ys, yl]
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def aupro(point_scores, region_ids, labels=None, fpr_limit: float = 0.3) -> float:
    """Area under the PRO-vs-FPR curve up to ``fpr_limit``, divided by it."""
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must be in (0, 1]")
    fpr, pro = pro_curve(point_scores, region_ids, labels)
    return _area_to(fpr, pro, fpr_limit) / fpr_limit


def minmax(values) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant input maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def score_distribution_dump(rows, path, comment: str | None = None) -> int:
    """Write ``class,score,label`` with scores min-max scaled per class.

    ``rows`` yields ``(class name, point scores, point labels)`` per sample.
    An optional ``comment`` is written first as a ``#`` line.  Returns the
    number of data rows written.
    """
    by_class: dict[str, list] = {}
    for cls, scores, labels in rows:
        by_class.setdefault(str(cls), []).append(
            (np.asarray(scores, float), np.asarray(labels).astype(int)))
    written = 0
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "score", "label"])
        for cls in sorted(by_class):
            scores = np.concatenate([s for s, _ in by_class[cls]])
            labels = np.concatenate([y for _, y in by_class[cls]])
            for s, y in zip(minmax(scores), labels):
                w.writerow([cls, repr(float(s)), int(y)])
                written += 1
    return written


@dataclass
class EvalReport:
    o_roc: float | None
    p_roc: float | None
    p_pro: float | None
    fpr_limit: float = 0.3
    per_class: dict = field(default_factory=dict)
    roc_points: tuple = ()
    pro_points: tuple = ()

    def to_dict(self) -> dict:
        return {"o_roc": self.o_roc, "p_roc": self.p_roc, "p_pro": self.p_pro,
                "fpr_limit": self.fpr_limit, "per_class": self.per_class}


def _safe(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ValueError:
        return None


def evaluate(samples, fpr_limit: float = 0.3, region_radius=None) -> EvalReport:
    """Metrics over ``samples``: dicts with keys ``class``, ``cloud``,
    ``object_score``, ``point_scores`` and ``mask`` (None for normal samples).

    A sample may carry precomputed ``regions`` (per-point region ids as from
    ``connected_regions``) to skip the region search.  Undefined metrics
    (single-class input, no regions) come back as None.
    """
    from glfm.features import median_spacing

    samples = list(samples)
    masks, regions = [], []
    for it in samples:
        n = len(it["point_scores"])
        mask = np.zeros(n, np.uint8) if it["mask"] is None else np.asarray(it["mask"])
        if len(mask) != n:
            raise ValueError(f"{len(mask)} mask entries for {n} point scores")
        ids = it.get("regions")
        if ids is None:
            ids = np.full(n, -1, np.int64)
            if mask.any():
                rad = region_radius or 2.0 * median_spacing(it["cloud"].points)
                ids = connected_regions(it["cloud"], mask, rad)
        masks.append(mask)
        regions.append(np.asarray(ids, np.int64))

    def block(sel):
        obj_s = [samples[i]["object_score"] for i in sel]
        obj_y = [int(masks[i].any()) for i in sel]
        rs, offset = [], 0
        for i in sel:
            ids = regions[i]
            rs.append(np.where(ids >= 0, ids + offset, -1))
            offset += int(ids.max()) + 1 if len(ids) and ids.max() >= 0 else 0
        s = np.concatenate([np.asarray(samples[i]["point_scores"], float) for i in sel])
        r = np.concatenate(rs)
        y = np.concatenate([masks[i] for i in sel])
        return (_safe(auroc, obj_s, obj_y), _safe(auroc, s, y),
                _safe(aupro, s, r, y, fpr_limit), (s, r, y, obj_s, obj_y))

    o, p, pp, (s, r, y, obj_s, obj_y) = block(range(len(samples)))
    per_class = {}
    for cls in sorted({it["class"] for it in samples}):
        sel = [i for i, it in enumerate(samples) if it["class"] == cls]
        co, cp, cpp, _ = block(sel)
        per_class[cls] = {"o_roc": co, "p_roc": cp, "p_pro": cpp, "count": len(sel)}
    roc_pts = roc_curve(obj_s, obj_y) if o is not None else ()
    pro_pts = pro_curve(s, r, y) if pp is not None else ()
    return EvalReport(o, p, pp, fpr_limit, per_class, roc_pts, pro_pts)
