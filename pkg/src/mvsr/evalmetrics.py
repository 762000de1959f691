"""2D depth metrics and 3D point-cloud metrics, per scene and averaged.

Depth metrics use the usual definitions over pixels where both maps are
valid and the ground truth exceeds ``min_gt``.  Point metrics report mean
nearest-neighbor distances (accuracy: prediction to ground truth,
completeness: the reverse) and precision/recall at a distance threshold.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, NoValidPixels, ShapeMismatch
from .geometry import DepthMap

DELTAS = (1.25, 1.25 ** 2, 1.25 ** 3)


@dataclass(frozen=True)
class DepthMetricsReport:
    abs_rel: float
    abs_diff: float
    abs_inv: float
    sq_rel: float
    rmse: float
    delta1: float
    delta2: float
    delta3: float
    pixel_count: int


@dataclass(frozen=True)
class PointMetricsReport:
    acc: float
    comp: float
    prec: float
    rec: float
    fscore: float


def fscore(prec: float, rec: float) -> float:
    return 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0


def depth_metrics(pred: DepthMap, gt: DepthMap, min_gt: float = 0.5) -> DepthMetricsReport:
    if pred.depth.shape != gt.depth.shape:
        raise ShapeMismatch(f"prediction {pred.depth.shape} vs ground truth {gt.depth.shape}")
    with np.errstate(invalid="ignore"):
        m = gt.valid & pred.valid & (gt.depth > min_gt) & (pred.depth > 0)
    if not m.any():
        raise NoValidPixels("no pixel passes the evaluation mask")
    p, g = pred.depth[m], gt.depth[m]
    e = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetricsReport(
        abs_rel=float(np.mean(np.abs(e) / g)),
        abs_diff=float(np.mean(np.abs(e))),
        abs_inv=float(np.mean(np.abs(1 / p - 1 / g))),
        sq_rel=float(np.mean(e * e / g)),
        rmse=float(np.sqrt(np.mean(e * e))),
        delta1=float(np.mean(ratio < DELTAS[0])),
        delta2=float(np.mean(ratio < DELTAS[1])),
        delta3=float(np.mean(ratio < DELTAS[2])),
        pixel_count=int(m.sum()),
    )


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact distance from every src point to its nearest dst point."""
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def point_metrics(pred: np.ndarray, gt: np.ndarray, tau: float = 0.05) -> PointMetricsReport:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyCloud("point metrics need non-empty clouds")
    d_pred = nearest_distances(pred, gt)
    d_gt = nearest_distances(gt, pred)
    prec = float(np.mean(d_pred < tau))
    rec = float(np.mean(d_gt < tau))
    return PointMetricsReport(float(d_pred.mean()), float(d_gt.mean()), prec, rec, fscore(prec, rec))


def aggregate_scenes(reports):
    """Field-wise arithmetic mean; the F-score is averaged, not recomputed."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    cls = type(reports[0])
    out = {f.name: float(np.mean([getattr(r, f.name) for r in reports])) for f in fields(cls)}
    if cls is DepthMetricsReport:
        out["pixel_count"] = int(sum(r.pixel_count for r in reports))
    return cls(**out)


def write_jsonl(path, records, aggregate=None) -> None:
    """One JSON object per scene, then an aggregate record if given."""
    with open(path, "w") as f:
        for name, rec in records:
            f.write(json.dumps({"scene": name, **_as_dict(rec)}) + "\n")
        if aggregate is not None:
            f.write(json.dumps({"scene": "aggregate", "distance_stat": "mean", **_as_dict(aggregate)}) + "\n")


def _as_dict(rec):
    if isinstance(rec, dict):
        out = {}
        for v in rec.values():
            out.update(_as_dict(v))
        return out
    return asdict(rec)


__all__ = [
    "DELTAS", "DepthMetricsReport", "PointMetricsReport", "aggregate_scenes", "depth_metrics", "fscore",
    "nearest_distances", "point_metrics", "write_jsonl",
]
