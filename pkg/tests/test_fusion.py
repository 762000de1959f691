import numpy as np
import pytest

from mvsr.evalmetrics import point_metrics
from mvsr.fusion import FusionParams, fuse
from mvsr.geometry import Camera, DepthMap, Pose
from mvsr.synthdata import default_intrinsics, generate_scene, render_depth, sample_gt_surface, surface_distance


@pytest.fixture(scope="module")
def sweep():
    spec = generate_scene(2, n_frames=6, orbit_step_deg=2.0, jitter=0.0)
    depths = {i: render_depth(spec, i, 160, 128) for i in range(6)}
    return spec, depths, {i: spec.camera(i) for i in range(6)}


def test_perfect_depths_survive_and_lie_on_surfaces(sweep):
    spec, depths, cams = sweep
    cloud = fuse(depths, cams, FusionParams(0.01, 1))
    total = sum(d.valid.sum() for d in depths.values())
    assert len(cloud) > 0.9 * total
    assert surface_distance(spec, cloud.positions).max() < 1e-6
    assert np.all(cloud.support >= 1)


def test_every_covisible_pixel_survives():
    spec = generate_scene(3, n_frames=2, orbit_step_deg=0.0, jitter=0.0)
    d = render_depth(spec, 0, 80, 64)
    cams = {0: spec.camera(0), 1: spec.camera(0)}
    cloud = fuse({0: d, 1: d.copy()}, cams, FusionParams(0.01, 1))
    assert len(cloud) == 2 * d.valid.sum()


def test_scaled_outlier_view_is_rejected(sweep):
    spec, depths, cams = sweep
    four = {i: depths[i] for i in range(4)}
    bad = four[2].copy()
    bad.depth *= 1.5
    four[2] = bad
    cloud = fuse(four, cams, FusionParams(0.03, 2))
    from_bad = np.sum(cloud.frames == 2)
    assert from_bad <= 0.01 * bad.valid.sum()
    assert np.sum(cloud.frames == 0) > 0.5 * four[0].valid.sum()


def test_disjoint_frusta_give_empty_cloud():
    intr = default_intrinsics()
    a = Camera(intr, Pose.identity())
    b = Camera(intr, Pose(np.diag([-1.0, 1.0, -1.0]), np.zeros(3)))
    d = DepthMap(np.full((256, 320), 2.0))
    cloud = fuse({0: d, 1: d.copy()}, {0: a, 1: b}, FusionParams(0.03, 1))
    assert len(cloud) == 0 and cloud.positions.shape == (0, 3)


def test_monotone_in_thresholds(sweep):
    spec, depths, cams = sweep
    noisy = {i: DepthMap(d.depth * np.random.default_rng(i).uniform(0.97, 1.03, d.depth.shape)) for i, d in
             depths.items()}
    counts = [len(fuse(noisy, cams, FusionParams(t, 2))) for t in (0.005, 0.01, 0.02, 0.04)]
    assert counts == sorted(counts)
    counts = [len(fuse(noisy, cams, FusionParams(0.02, m))) for m in (1, 2, 3, 4)]
    assert counts == sorted(counts, reverse=True)


def test_order_independent(sweep):
    spec, depths, cams = sweep
    a = fuse(depths, cams, average=True)
    rev = {i: depths[i] for i in reversed(sorted(depths))}
    b = fuse(rev, cams, average=True)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.support, b.support)


def test_averaging_stays_near_surfaces(sweep):
    spec, depths, cams = sweep
    cloud = fuse(depths, cams, FusionParams(0.01, 1), average=True)
    assert np.median(surface_distance(spec, cloud.positions)) < 1e-9


def test_params_validation():
    with pytest.raises(ValueError):
        FusionParams(0.0, 1)
    with pytest.raises(ValueError):
        FusionParams(0.01, 0)
