import numpy as np
import pytest

from mvsr import pipeline as P
from mvsr.config import PipelineConfig
from mvsr.diffkern import ParameterStore
from mvsr.errors import NonFiniteLoss, NoValidPixels, NumericError
from mvsr.geometry import DepthMap
from mvsr.pointflow import zero_offset_head
from mvsr.synthdata import Box, generate_scene, render_depth, write_scene
from mvsr.upsample import coarse_to_fine, nn_upsample

CFG = PipelineConfig(train_slice=3, data_frames=4)


@pytest.fixture(scope="module")
def scene():
    return P.scene_from_spec(generate_scene(5, n_frames=4)).with_features(CFG)


@pytest.fixture(scope="module")
def prediction(scene):
    return P.predict_scene(scene, ParameterStore(1), CFG)


def _random_map(rng, h, w, lo=0.5, hi=4.0, p_invalid=0.2):
    return DepthMap(rng.uniform(lo, hi, (h, w)), rng.uniform(size=(h, w)) > p_invalid)


# ---------------------------------------------------------------------------
# resampling and loss


def test_nn_downsample_inverts_upsample():
    rng = np.random.default_rng(0)
    d = _random_map(rng, 56, 56)
    back = P.nn_downsample(nn_upsample(d, 320, 256), 56, 56)
    assert np.array_equal(back.depth, d.depth) and np.array_equal(back.valid, d.valid)


def test_loss_zero_when_every_stage_is_ground_truth():
    rng = np.random.default_rng(1)
    gt = _random_map(rng, 256, 320, p_invalid=0.0)
    stages = [P.nn_downsample(gt, w, h) for w, h in ((56, 56), (80, 64), (320, 256))]
    assert float(P.multi_stage_l1_loss(stages, gt).data) == 0.0


def test_loss_of_constant_offset():
    gt = DepthMap(np.full((64, 80), 2.0), np.ones((64, 80), bool))
    pred = DepthMap(gt.depth + 0.1, gt.valid.copy())
    assert float(P.multi_stage_l1_loss([pred], gt).data) == pytest.approx(0.1, abs=1e-12)


def test_loss_matches_scalar_loop():
    rng = np.random.default_rng(2)
    gt = _random_map(rng, 256, 320)
    stages = [_random_map(rng, h, w) for w, h in ((56, 56), (80, 64), (160, 128))]
    expect = 0.0
    for s in stages:
        total, count = 0.0, 0
        for v in range(s.height):
            for u in range(s.width):
                gv = min(int((v + 0.5) * 256 / s.height), 255)
                gu = min(int((u + 0.5) * 320 / s.width), 319)
                if s.valid[v, u] and gt.valid[gv, gu]:
                    total += abs(s.depth[v, u] - gt.depth[gv, gu])
                    count += 1
        expect += total / count
    assert abs(float(P.multi_stage_l1_loss(stages, gt).data) - expect) < 1e-12


def test_loss_accepts_tensors_and_reports_empty_stages():
    gt = DepthMap(np.full((8, 8), 1.0), np.ones((8, 8), bool))
    vals = np.full((8, 8), 1.5)
    assert float(P.multi_stage_l1_loss([(vals, np.ones((8, 8), bool))], gt).data) == pytest.approx(0.5)
    with pytest.raises(NoValidPixels):
        P.multi_stage_l1_loss([(vals, np.zeros((8, 8), bool))], gt)
    with pytest.raises(ValueError):
        P.multi_stage_l1_loss([], gt)


# ---------------------------------------------------------------------------
# augmentation


def test_augment_identity(scene):
    b = P.make_batch(scene, 0, 3)
    a = P.augment_with(b, 1.0, 0.0)
    for f in b.frames:
        assert a.cameras[f].pose == b.cameras[f].pose
        assert np.array_equal(a.gt[f].depth, b.gt[f].depth)
        assert a.images[f] is b.images[f]


def test_augment_keeps_rotations_orthonormal_and_scales_in_range(scene):
    rng = np.random.default_rng(3)
    b = P.make_batch(scene, 1, 3)
    for _ in range(5):
        a = P.augment(b, rng)
        assert 0.9 <= a.scale <= 1.1
        for f in a.frames:
            r = a.cameras[f].pose.rotation
            assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(r) - 1) < 1e-9


def test_scaled_sample_matches_rerendered_scaled_scene():
    spec = generate_scene(8, n_frames=3)
    u = 1.07
    scaled = generate_scene(8, n_frames=3)
    scaled.room = Box(spec.room.lo * u, spec.room.hi * u, spec.room.textures)
    scaled.boxes = [Box(b.lo * u, b.hi * u, b.textures) for b in spec.boxes]
    batch = P.make_batch(P.scene_from_spec(spec), 0, 3)
    aug = P.augment_with(batch, u, 0.0)
    scaled.trajectory = [aug.cameras[f].pose for f in aug.frames]
    for f in aug.frames:
        ref = render_depth(scaled, f)
        assert np.array_equal(ref.valid, aug.gt[f].valid)
        assert np.abs(ref.depth - aug.gt[f].depth).max() < 1e-9


def test_rotation_about_gravity_preserves_up_axis(scene):
    b = P.make_batch(scene, 0, 3)
    a = P.augment_with(b, 1.0, 0.7)
    for f in b.frames:
        # world +y expressed in camera coordinates is unchanged by a rotation about +y
        up_before = b.cameras[f].pose.rotation.T @ np.array([0.0, 1.0, 0.0])
        up_after = a.cameras[f].pose.rotation.T @ np.array([0.0, 1.0, 0.0])
        assert np.abs(up_before - up_after).max() < 1e-12


# ---------------------------------------------------------------------------
# prediction


def test_prediction_shapes_and_snapshots(scene, prediction):
    assert sorted(prediction.refinement.snapshots) == [(0, 0)] + [(lo, li) for lo in (1, 2) for li in (1, 2, 3)]
    for f in scene.frames:
        assert prediction.initial[f].depth.shape == (56, 56)
        assert prediction.final[f].depth.shape == (256, 320)
        assert [d.depth.shape for d in prediction.upsampled[f]] == [(64, 80), (128, 160), (256, 320)]


def test_prediction_is_deterministic(scene, prediction):
    again = P.predict_scene(scene, ParameterStore(1), CFG)
    for f in scene.frames:
        assert np.array_equal(again.final[f].depth, prediction.final[f].depth)


def test_uniform_heads_give_upsampled_initial_depths(scene):
    store = ParameterStore(4)
    pred = P.predict_scene(scene, store, CFG, uniform=True)
    for f in scene.frames:
        assert np.array_equal(pred.refinement.depths[f].depth, pred.initial[f].depth)
        chain, _ = coarse_to_fine(pred.initial[f], scene.features[f], scene.images[f], store)
        assert np.array_equal(chain.depth, pred.final[f].depth)


def test_nan_weights_abort_with_diagnostics(scene):
    store = ParameterStore(1)
    P.predict_scene(scene, store, CFG)
    w = store["costreg/c2/w"].data.copy()
    w[0, 0, 0] = np.nan
    store.set("costreg/c2/w", w)
    with pytest.raises(NumericError, match="non-finite"):
        P.predict_scene(scene, store, CFG)


def test_infer_mode_from_head_width(scene):
    for mode in ("full", "no3d", "single_scale"):
        store = ParameterStore(0)
        zero_offset_head(store, {"full": 176, "no3d": 32, "single_scale": 64}[mode])
        store.get("offset/c0/w", (3, {"full": 176, "no3d": 32, "single_scale": 64}[mode], 64), fan_in=1, fan_out=1)
        assert P.infer_mode(store) == mode
    assert P.infer_mode(ParameterStore(0), "avg_feats") == "avg_feats"


def test_dump_iters_writes_every_stage(tmp_path, prediction):
    P.write_prediction(prediction, tmp_path, dump_iters=True)
    assert len(list((tmp_path / "depth").glob("*.pfm"))) == 4
    stages = sorted(p.name for p in (tmp_path / "iters").iterdir())
    assert len(stages) == 7 + 3
    assert all(len(list((tmp_path / "iters" / s).glob("*.pfm"))) == 4 for s in stages)


def test_scene_directory_round_trip(tmp_path, scene):
    write_scene(scene.spec, tmp_path / "s")
    loaded = P.load_scene_dir(tmp_path / "s")
    assert loaded.frames == scene.frames
    for f in scene.frames:
        assert loaded.cameras[f].pose == scene.cameras[f].pose
        assert np.abs(loaded.images[f] - scene.images[f]).max() <= 0.5 / 255 + 1e-12
        assert np.abs(loaded.gt[f].depth - scene.gt[f].depth).max() < 1e-6
    assert loaded.spec is not None and loaded.spec.seed == scene.spec.seed


def test_iter_study_rows_with_uniform_heads(scene):
    rows = P.run_iter_study([scene], ParameterStore(2), CFG, uniform=True, with_fscore=False)
    assert [(r.outer, r.inner) for r in rows] == [(0, 0)] + [(lo, li) for lo in (1, 2) for li in (1, 2, 3)]
    assert len({(r.abs_rel, r.abs_diff, r.delta1) for r in rows}) == 1


# ---------------------------------------------------------------------------
# training


def test_training_step_reaches_every_parameter(scene):
    store = ParameterStore(0, np.float32)
    res = P.batch_loss(P.make_batch(scene, 0, 3), store, CFG, "full")
    assert np.isfinite(res.loss) and res.loss > 0
    assert len(res.stages) == 1 + 6 + 3
    missing = [k for k, p in store.items() if p.grad is None]
    assert not missing
    assert any(np.abs(store[k].grad).max() > 0 for k in store if k.startswith("unet/"))


def test_non_finite_loss_names_the_batch(scene):
    store = ParameterStore(0)
    P.batch_loss(P.make_batch(scene, 0, 3), store, CFG, "no3d", train=False)
    store.set("costreg/c2/b", np.array([np.inf]))
    with pytest.raises(NonFiniteLoss) as err:
        P.batch_loss(P.make_batch(scene, 0, 3), store, CFG, "no3d", batch_id=17)
    assert err.value.batch_id == 17
