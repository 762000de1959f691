import json

import numpy as np
import pytest

from mvsr.errors import EmptyCloud, NoValidPixels
from mvsr.evalmetrics import (
    PointMetricsReport,
    aggregate_scenes,
    depth_metrics,
    fscore,
    point_metrics,
    write_jsonl,
)
from mvsr.geometry import DepthMap


def test_perfect_prediction():
    rng = np.random.default_rng(0)
    g = DepthMap(rng.uniform(0.3, 5, size=(20, 30)))
    r = depth_metrics(g.copy(), g)
    assert r.abs_rel == r.abs_diff == r.abs_inv == r.sq_rel == r.rmse == 0
    assert r.delta1 == r.delta2 == r.delta3 == 1
    assert r.pixel_count == np.sum(g.depth > 0.5)


def test_ten_percent_scale():
    g = DepthMap(np.linspace(0.6, 4, 100).reshape(10, 10))
    r = depth_metrics(DepthMap(1.1 * g.depth), g)
    assert r.abs_rel == pytest.approx(0.1, abs=1e-12) and r.delta1 == 1


def _scalar_oracle(p, g, pv, gv, min_gt=0.5):
    e = []
    for a, b, va, vb in zip(p.ravel(), g.ravel(), pv.ravel(), gv.ravel()):
        if va and vb and b > min_gt and a > 0:
            e.append((a, b))
    n = len(e)
    out = dict(abs_rel=sum(abs(a - b) / b for a, b in e) / n, abs_diff=sum(abs(a - b) for a, b in e) / n,
               abs_inv=sum(abs(1 / a - 1 / b) for a, b in e) / n, sq_rel=sum((a - b) ** 2 / b for a, b in e) / n,
               rmse=(sum((a - b) ** 2 for a, b in e) / n) ** 0.5)
    for name, t in (("delta1", 1.25), ("delta2", 1.25 ** 2), ("delta3", 1.25 ** 3)):
        out[name] = sum(max(a / b, b / a) < t for a, b in e) / n
    return out


def test_depth_metrics_match_scalar_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        g = rng.uniform(0.2, 5, size=(12, 16))
        p = g * rng.uniform(0.5, 2.0, size=g.shape)
        pv, gv = rng.uniform(size=g.shape) > 0.1, rng.uniform(size=g.shape) > 0.1
        r = depth_metrics(DepthMap(p, pv), DepthMap(g, gv))
        for k, v in _scalar_oracle(p, g, pv, gv).items():
            assert abs(getattr(r, k) - v) < 1e-12, k
        assert r.delta1 <= r.delta2 <= r.delta3


def test_no_valid_pixels():
    with pytest.raises(NoValidPixels):
        depth_metrics(DepthMap(np.ones((3, 3))), DepthMap(np.full((3, 3), 0.4)))


def _plane(n=40000, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(0, 2, n), rng.uniform(0, 2, n), np.zeros(n)])


def test_point_metrics_identical_shift_and_far():
    gt = _plane()
    r = point_metrics(gt, gt)
    assert (r.acc, r.comp, r.prec, r.rec, r.fscore) == (0, 0, 1, 1, 1)
    r = point_metrics(gt + [0, 0, 0.04], gt)
    assert r.prec > 0.999 and r.rec > 0.999
    r = point_metrics(gt + [0, 0, 10.0], gt)
    assert r.prec == r.rec == r.fscore == 0
    with pytest.raises(EmptyCloud):
        point_metrics(np.zeros((0, 3)), gt)


def test_point_metrics_monotone_in_tau_and_permutation_invariant():
    rng = np.random.default_rng(2)
    gt = _plane(5000)
    pred = gt + rng.normal(scale=0.05, size=gt.shape)
    reps = [point_metrics(pred, gt, t) for t in (0.01, 0.03, 0.05, 0.1)]
    assert all(a.prec <= b.prec and a.rec <= b.rec for a, b in zip(reps, reps[1:]))
    perm = rng.permutation(len(pred))
    assert point_metrics(pred[perm], gt) == point_metrics(pred, gt)
    r = reps[2]
    assert r.fscore == pytest.approx(2 * r.prec * r.rec / (r.prec + r.rec))


def test_aggregate_averages_fscore_per_scene():
    a = PointMetricsReport(0.1, 0.2, 1.0, 0.25, fscore(1.0, 0.25))
    b = PointMetricsReport(0.1, 0.2, 0.75, 0.5, fscore(0.75, 0.5))
    assert (a.fscore, b.fscore) == pytest.approx((0.4, 0.6))
    r = aggregate_scenes([a, b])
    assert r.fscore == pytest.approx(0.5) and (r.prec, r.rec) == (0.875, 0.375)
    assert r.fscore != pytest.approx(fscore(r.prec, r.rec))
    assert aggregate_scenes([a]) == a and aggregate_scenes([a, a]) == a


def test_jsonl_records(tmp_path):
    g = DepthMap(np.full((4, 4), 2.0))
    rep = depth_metrics(g, g)
    write_jsonl(tmp_path / "m.jsonl", [("s0", rep), ("s1", rep)], aggregate_scenes([rep, rep]))
    lines = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [x["scene"] for x in lines] == ["s0", "s1", "aggregate"] and lines[-1]["distance_stat"] == "mean"
