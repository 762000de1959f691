"""End-to-end orchestration: scene loading, prediction, training and studies.

Prediction runs feature extraction, the plane sweep, nested refinement and
coarse-to-fine upsampling.  Training unrolls the same chain with a loss at
every stage.  Stages are detached from each other (each stage sees the
previous depths as constants), so backpropagation only ever holds one
frame's graph in memory; the scene volumes of an outer loop are the one
exception and collect gradient from all of that loop's inner passes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .costvolume import (COARSE_DEPTH, DepthHypothesisGrid, build_cost_volume, regularize_and_predict,
                         regularizer_scores, soft_argmin)
from .diffkern import Adam, ParameterStore, load_weights, save_weights
from .diffkern import tensor as T
from .errors import NonFiniteLoss, NoValidPixels, NumericError, ShapeMismatch, check_finite
from .evalmetrics import DepthMetricsReport, aggregate_scenes, depth_metrics, point_metrics
from .features import FeatureMapPair, extract_features, select_source_views
from .fusion import FusionParams, fuse
from .geometry import Camera, DepthMap, depth_to_points, read_intrinsics, read_poses
from .io import read_pfm, read_ppm, write_pfm
from .pointflow import MODES, RefinementSchedule, SceneEncoding, encode_depths, pointflow_pass, refine_all
from .scenemodel import SparseFeatureVolume
from .synthdata import SceneSpec, generate_scene, regenerate, render_depth, render_image, sample_gt_surface
from .upsample import STAGE_SIZES, coarse_to_fine, nn_source_index, propagation_smooth, nn_upsample

log = logging.getLogger("mvsr")

WEIGHTS_NAME = "weights.3dvw"


# ---------------------------------------------------------------------------
# scenes


@dataclass(eq=False)
class SceneData:
    """Posed images of one scene, with ground-truth depth where known."""

    name: str
    cameras: dict  # frame -> full-resolution Camera
    images: dict  # frame -> (256, 320, 3) in [0, 1]
    gt: dict = field(default_factory=dict)  # frame -> DepthMap
    spec: SceneSpec | None = None
    features: dict = field(default_factory=dict)  # frame -> FeatureMapPair

    @property
    def frames(self) -> list:
        return sorted(self.cameras)

    def viewsets(self, frames=None, m: int = 4) -> dict:
        frames = self.frames if frames is None else list(frames)
        return {f: select_source_views(frames, i, m) for i, f in enumerate(frames)}

    def with_features(self, cfg: PipelineConfig) -> "SceneData":
        for f in self.frames:
            if f not in self.features:
                self.features[f] = extract_features(self.images[f], cfg.extractor, cfg.extractor_seed)
        return self

    def compact(self) -> "SceneData":
        """Hold images and feature maps in float32 (training keeps ten scenes in memory)."""
        self.images = {f: np.asarray(a, np.float32) for f, a in self.images.items()}
        self.features = {f: FeatureMapPair(fm.coarse.astype(np.float32), fm.fine.astype(np.float32))
                         for f, fm in self.features.items()}
        return self


def scene_from_spec(spec: SceneSpec, name: str | None = None) -> SceneData:
    cams = {i: spec.camera(i) for i in range(spec.n_frames)}
    images = {i: render_image(spec, i) for i in cams}
    gt = {i: render_depth(spec, i) for i in cams}
    return SceneData(name or f"synth{spec.seed}", cams, images, gt, spec)


def load_scene_dir(path) -> SceneData:
    """Read a scene directory (intrinsics.txt, poses.txt, rgb/, optional depth/)."""
    path = Path(path)
    poses = read_poses(path / "poses.txt")
    intr = read_intrinsics(path / "intrinsics.txt")
    frames = sorted(poses)
    if len(intr) not in (1, len(frames)):
        raise ShapeMismatch(f"{len(intr)} intrinsics rows for {len(frames)} poses")
    cams, images, gt = {}, {}, {}
    for k, f in enumerate(frames):
        cams[f] = Camera(intr[k if len(intr) > 1 else 0], poses[f])
        images[f] = read_ppm(path / "rgb" / f"{f:04d}.ppm")
        dpath = path / "depth" / f"{f:04d}.pfm"
        if dpath.exists():
            d = read_pfm(dpath).astype(np.float64)
            gt[f] = DepthMap(d, d > 0)
    return SceneData(path.name, cams, images, gt, regenerate(path))


def synthetic_scenes(seeds, cfg: PipelineConfig, compact: bool = False) -> list:
    out = []
    for s in seeds:
        scene = scene_from_spec(generate_scene(s, cfg.data_boxes, cfg.data_frames, cfg.data_orbit_step_deg))
        out.append(scene.with_features(cfg).compact() if compact else scene.with_features(cfg))
    return out


def nn_downsample(depth: DepthMap, width: int, height: int) -> DepthMap:
    """Nearest-neighbor resampling with the same pixel-center rule as upsampling."""
    rows = nn_source_index(depth.height, height)
    cols = nn_source_index(depth.width, width)
    return DepthMap(depth.depth[np.ix_(rows, cols)], depth.valid[np.ix_(rows, cols)])


def sweep_grid(cfg: PipelineConfig) -> DepthHypothesisGrid:
    return DepthHypothesisGrid(cfg.sweep_start, cfg.sweep_step, cfg.sweep_count)


def schedule_of(cfg: PipelineConfig) -> RefinementSchedule:
    return RefinementSchedule(cfg.refine_outer, cfg.refine_steps_m, cfg.refine_h)


def infer_mode(store: ParameterStore, default: str = "full") -> str:
    """Ablation mode a trained store was built for, from its offset-head input width."""
    w = store.params.get("offset/c0/w")
    if w is None:
        return default
    channels = w.shape[-2]
    return {32: "no3d", 64: "single_scale"}.get(channels, default if default in ("full", "avg_feats") else "full")


def _check_finite(stage: str, fid, dm: DepthMap) -> None:
    bad = dm.valid & ~np.isfinite(dm.depth)
    if bad.any():
        v, u = np.argwhere(bad)[0]
        raise NumericError(f"non-finite depth at stage {stage}, frame {fid}: {int(bad.sum())} pixels, "
                           f"first at (u={u}, v={v})")


# ---------------------------------------------------------------------------
# prediction


@dataclass(eq=False)
class Prediction:
    initial: dict  # frame -> 56x56 D^0
    refinement: object  # RefinementResult
    final: dict  # frame -> 320x256 depth
    upsampled: dict  # frame -> [DepthMap per upsampling stage]


def initial_depths(scene: SceneData, store: ParameterStore, cfg: PipelineConfig, viewsets: dict) -> dict:
    grid = sweep_grid(cfg)
    maps = {f: scene.features[f].coarse for f in scene.frames}
    out = {}
    for f in sorted(viewsets):
        vol = build_cost_volume(viewsets[f], maps, scene.cameras, grid)
        out[f], _, _ = regularize_and_predict(vol, store)
        _check_finite("(0,0)", f, out[f])
    return out


def upsample_maps(depths: dict, scene: SceneData, store: ParameterStore, forced_weights=None):
    final, stages = {}, {}
    for f in sorted(depths):
        fm = scene.features[f]
        final[f], st = coarse_to_fine(depths[f], fm, scene.images[f], store, forced_weights=forced_weights)
        stages[f] = [s.smoothed.depth for s in st]
        for i, d in enumerate(stages[f]):
            _check_finite(f"upsample {i}", f, d)
    return final, stages


def predict_scene(scene: SceneData, store: ParameterStore, cfg: PipelineConfig, mode: str | None = None,
                  uniform: bool = False) -> Prediction:
    """extract -> plane sweep -> nested refinement -> upsampling for every frame."""
    mode = mode or infer_mode(store, cfg.train_mode)
    scene.with_features(cfg)
    viewsets = scene.viewsets(m=cfg.source_views)
    maps = {f: scene.features[f].coarse for f in scene.frames}
    d0 = initial_depths(scene, store, cfg, viewsets)
    ref = refine_all(d0, scene.cameras, viewsets, maps, schedule_of(cfg), store, mode, cfg.refine_direction,
                     uniform=uniform)
    for key, snap in ref.snapshots.items():
        for f, d in snap.items():
            _check_finite(str(key), f, d)
    final, stages = upsample_maps(ref.depths, scene, store)
    return Prediction(d0, ref, final, stages)


def _pfm(path: Path, dm: DepthMap) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_pfm(path, np.where(dm.valid, dm.depth, 0.0))


def write_prediction(pred: Prediction, out_dir, dump_iters: bool = False) -> Path:
    """Final depths to depth/%04d.pfm; with ``dump_iters`` every stage under iters/."""
    out = Path(out_dir)
    for f, d in pred.final.items():
        _pfm(out / "depth" / f"{f:04d}.pfm", d)
    if dump_iters:
        for (lo, li), snap in pred.refinement.snapshots.items():
            for f, d in snap.items():
                _pfm(out / "iters" / f"refine_{lo}_{li}" / f"{f:04d}.pfm", d)
        for f, st in pred.upsampled.items():
            for i, d in enumerate(st):
                _pfm(out / "iters" / f"upsample_{i}" / f"{f:04d}.pfm", d)
    return out


def run_predict(scene, cfg: PipelineConfig, store: ParameterStore, out_dir=None, dump_iters: bool = False,
                mode: str | None = None) -> Prediction:
    if not isinstance(scene, SceneData):
        scene = load_scene_dir(scene)
    pred = predict_scene(scene, store, cfg, mode)
    if out_dir is not None:
        write_prediction(pred, out_dir, dump_iters)
    return pred


# ---------------------------------------------------------------------------
# loss and augmentation


def _l1_term(values: T.Tensor, target: np.ndarray, mask: np.ndarray) -> T.Tensor:
    """Mean |values - target| over ``mask`` (flat arrays of equal length)."""
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise NoValidPixels("a loss stage has no pixel valid in both prediction and ground truth")
    v = T.getitem(T.reshape(values, (-1,)), idx)
    diff = T.sub(v, target.reshape(-1)[idx].astype(v.dtype))
    return T.mean(T.tabs(diff))


def stage_l1(values, valid: np.ndarray, gt: DepthMap) -> T.Tensor:
    """L1 of one (H, W) stage against ``gt`` resampled to its resolution."""
    values = T.as_tensor(values)
    h, w = values.shape
    g = gt if (gt.height, gt.width) == (h, w) else nn_downsample(gt, w, h)
    return _l1_term(values, g.depth, (valid & g.valid).reshape(-1))


def multi_stage_l1_loss(predictions, gt: DepthMap) -> T.Tensor:
    """Sum over stages of the mean absolute error on jointly valid pixels.

    Each prediction is a DepthMap or a ``(values, valid)`` pair whose values
    may be a tensor carrying gradient.
    """
    predictions = list(predictions)
    if not predictions:
        raise ValueError("need at least one stage")
    total = None
    for p in predictions:
        values, valid = (p.depth, p.valid) if isinstance(p, DepthMap) else p
        term = stage_l1(values, np.asarray(valid, bool), gt)
        total = term if total is None else T.add(total, term)
    return total


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(eq=False)
class TrainBatch:
    """One slice of consecutive frames with everything a training step needs."""

    frames: tuple
    cameras: dict
    images: dict
    features: dict
    gt: dict
    viewsets: dict
    scale: float = 1.0
    angle: float = 0.0


def make_batch(scene: SceneData, start: int, length: int, m: int = 4) -> TrainBatch:
    frames = tuple(scene.frames[start:start + length])
    if len(frames) != length:
        raise ValueError(f"slice at {start} has {len(frames)} frames, need {length}")
    pick = lambda d: {f: d[f] for f in frames if f in d}  # noqa: E731
    return TrainBatch(frames, pick(scene.cameras), pick(scene.images), pick(scene.features), pick(scene.gt),
                      scene.viewsets(frames, m))


def augment_with(batch: TrainBatch, scale: float, angle: float) -> TrainBatch:
    """Apply x -> scale * R_y(angle) x to the world; depths scale, images do not change."""
    r = rotation_y(angle)
    cams = {f: Camera(c.intrinsics, c.pose.transformed(r, np.zeros(3), scale)) for f, c in batch.cameras.items()}
    gt = {f: DepthMap(d.depth * scale, d.valid.copy()) for f, d in batch.gt.items()}
    return TrainBatch(batch.frames, cams, batch.images, batch.features, gt, batch.viewsets,
                      batch.scale * scale, batch.angle + angle)


def augment(batch: TrainBatch, rng: np.random.Generator, scale_range=(0.9, 1.1)) -> TrainBatch:
    scale = rng.uniform(*scale_range)
    angle = rng.uniform(0.0, 2 * np.pi)
    return augment_with(batch, float(scale), float(angle))


# ---------------------------------------------------------------------------
# training


@dataclass
class StepResult:
    loss: float
    stages: dict  # stage name -> mean L1 over frames


def _leaf_encoding(enc: SceneEncoding):
    """Copies of the volumes whose features are fresh leaves (gradient sinks)."""
    leaves = [T.Tensor(v.features.data, requires_grad=True) for v in enc.volumes]
    vols = [SparseFeatureVolume(v.resolution, v.origin, v.keys, leaf) for v, leaf in zip(enc.volumes, leaves)]
    return SceneEncoding.of(vols), leaves


def _initial_stage(vol, store: ParameterStore, grad_rows: np.ndarray):
    """Soft-argmin D^0 with a gradient graph only for the lattice pixels in ``grad_rows``.

    The regularizer treats every pixel independently, so the remaining
    pixels are evaluated forward-only.
    """
    s1, s2, L, c = vol.cost.shape
    x = vol.cost.reshape(s1 * s2, L, c).astype(store.dtype, copy=False)
    rest = np.setdiff1d(np.arange(s1 * s2), grad_rows)
    depth = np.empty(s1 * s2)
    if len(rest):
        with T.no_grad():
            prob = T.softmax(regularizer_scores(store, x[rest]), axis=-1)
            depth[rest] = soft_argmin(prob, vol.grid).data
    prob = T.softmax(regularizer_scores(store, x[grad_rows]), axis=-1)
    values = soft_argmin(prob, vol.grid)
    depth[grad_rows] = values.data
    check_finite("plane-sweep depth", depth)
    d = np.clip(depth.reshape(s1, s2), vol.grid.start, vol.grid.last)
    return DepthMap(d, np.ones((s1, s2), bool)), values


def _refine_stage(d: DepthMap, grad_mask: np.ndarray, *args):
    """One PointFlow pass; only pixels in ``grad_mask`` (flat) carry a graph.

    Returns (merged depth map, PassResult of the graph-carrying pixels or None).
    """
    keep = d.valid & grad_mask.reshape(d.valid.shape)
    if keep.all() or not d.valid.any():
        res = pointflow_pass(d, *args)
        return res.depth, res
    res = pointflow_pass(DepthMap(d.depth, keep), *args) if keep.any() else None
    with T.no_grad():
        other = pointflow_pass(DepthMap(d.depth, d.valid & ~keep), *args)
    if res is None:
        return other.depth, None
    merged = DepthMap(np.where(keep, res.depth.depth, other.depth.depth),
                      np.where(keep, res.depth.valid, other.depth.valid))
    return merged, res


def batch_loss(batch: TrainBatch, store: ParameterStore, cfg: PipelineConfig, mode: str = "full",
               train: bool = True, batch_id=None, rng: np.random.Generator | None = None) -> StepResult:
    """Forward every stage of one slice; with ``train`` also accumulate gradients into ``store``.

    With ``rng`` the gradient (and loss) of the per-pixel stages uses a random
    ``train_grad_pixels`` fraction of lattice pixels, and the upsampling
    stages a random ``train_upsample_frames`` subset of frames.  Without it
    every pixel and frame counts.
    """
    try:
        if not train:
            with T.no_grad():
                return _batch_loss(batch, store, cfg, mode, False, batch_id, None)
        return _batch_loss(batch, store, cfg, mode, True, batch_id, rng)
    except NonFiniteLoss:
        raise
    except NumericError as exc:
        raise NonFiniteLoss(f"batch {batch_id}: {exc}", batch_id=batch_id) from exc


def _batch_loss(batch, store, cfg, mode, train, batch_id, rng):
    frames = batch.frames
    n = len(frames)
    maps = {f: batch.features[f].coarse for f in frames}
    stages = {}
    lattice = COARSE_DEPTH * COARSE_DEPTH

    def pixel_mask():
        if rng is None:
            return np.ones(lattice, bool)
        return rng.random(lattice) < cfg.train_grad_pixels

    def add(name, term, weight):
        value = float(term.data)
        if not np.isfinite(value):
            raise NonFiniteLoss(f"non-finite loss at stage {name}", batch_id=batch_id)
        if train:
            T.backward(term, np.full_like(term.data, weight))
        stages[name] = stages.get(name, 0.0) + value * weight

    grid = sweep_grid(cfg)
    current = {}
    for f in frames:
        vol = build_cost_volume(batch.viewsets[f], maps, batch.cameras, grid)
        rows = np.flatnonzero(pixel_mask())
        dm, values = _initial_stage(vol, store, rows)
        g = nn_downsample(batch.gt[f], dm.width, dm.height)
        if len(rows):
            add("d0", _l1_term(values, g.depth.reshape(-1)[rows], g.valid.reshape(-1)[rows]), 1.0 / n)
        current[f] = dm
    sched = schedule_of(cfg)
    for lo, li, step in sched.stages():
        if li == 1:
            enc = encode_depths(current, batch.cameras, batch.viewsets, maps, store, mode)
            leaf_enc, leaves = (None, []) if enc is None or not train else _leaf_encoding(enc)
            if not train:
                leaf_enc = enc
        for f in frames:
            d = current[f]
            cam = batch.cameras[f].scaled(d.width, d.height)
            new, res = _refine_stage(d, pixel_mask(), cam, batch.viewsets[f], leaf_enc, maps, batch.cameras, store,
                                     step, sched.h, mode, cfg.refine_direction)
            if res is not None:
                g = nn_downsample(batch.gt[f], d.width, d.height)
                mask = g.valid.reshape(-1)[res.rows] & res.depth.valid.reshape(-1)[res.rows]
                if mask.any():
                    add(f"refine_{lo}_{li}", _l1_term(res.depth_tensor(), g.depth.reshape(-1)[res.rows], mask),
                        1.0 / n)
            current[f] = new
        if li == len(sched.steps) and leaves:
            pairs = [(v.features, leaf.grad) for v, leaf in zip(enc.volumes, leaves) if leaf.grad is not None]
            if pairs:
                T.backward([p[0] for p in pairs], [p[1] for p in pairs])
    up_frames = frames
    if rng is not None and cfg.train_upsample_frames < n:
        up_frames = tuple(sorted(rng.choice(frames, cfg.train_upsample_frames, replace=False).tolist()))
    for f in up_frames:
        fm = batch.features[f]
        guides = (fm.coarse, fm.fine, batch.images[f])
        cur = current[f]
        for i, ((w, h), guide) in enumerate(zip(STAGE_SIZES, guides)):
            sm = propagation_smooth(nn_upsample(cur, w, h), guide, store, f"upsample/s{i}")
            add(f"upsample_{i}", stage_l1(sm.values, sm.depth.valid, batch.gt[f]), 1.0 / len(up_frames))
            cur = sm.depth
    return StepResult(float(sum(stages.values())), stages)


def validation_batches(scenes, cfg: PipelineConfig) -> list:
    """One fixed, un-augmented middle slice per validation scene."""
    out = []
    for s in scenes:
        start = (len(s.frames) - cfg.train_slice) // 2
        out.append(make_batch(s, start, cfg.train_slice, cfg.source_views))
    return out


@dataclass(eq=False)
class TrainResult:
    store: ParameterStore
    history: list  # one dict per iteration
    validations: list  # (iteration, val loss, lr)


def run_train(train_scenes, val_scenes, cfg: PipelineConfig, out_dir=None, mode: str | None = None,
              progress=None) -> TrainResult:
    """Adam on random augmented slices, halving the rate when validation stalls.

    Deterministic given (config, seed, scenes).  With ``out_dir`` a
    checkpoint and the log are written at every validation ("epoch").
    """
    mode = mode or cfg.train_mode
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    store = ParameterStore(cfg.seed, np.dtype(cfg.train_dtype))
    opt = Adam(store, cfg.train_lr)
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    train_scenes = [s.with_features(cfg) for s in train_scenes]
    vbatches = validation_batches([s.with_features(cfg) for s in val_scenes], cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
    history, validations = [], []
    best, stall = np.inf, 0
    t0 = time.perf_counter()
    for it in range(cfg.train_iterations):
        scene = train_scenes[int(rng.integers(len(train_scenes)))]
        start = int(rng.integers(0, len(scene.frames) - cfg.train_slice + 1))
        batch = augment(make_batch(scene, start, cfg.train_slice, cfg.source_views), rng, cfg.train_scale_range)
        store.zero_grad()
        res = batch_loss(batch, store, cfg, mode, train=True, batch_id=it, rng=rng)
        opt.step()
        rec = dict(iteration=it, scene=scene.name, start=start, loss=res.loss, lr=opt.lr, stages=res.stages)
        history.append(rec)
        if progress:
            progress(rec)
        last = it + 1 == cfg.train_iterations
        out_of_time = cfg.train_max_seconds > 0 and time.perf_counter() - t0 > cfg.train_max_seconds
        if vbatches and ((it + 1) % cfg.train_val_every == 0 or last or out_of_time):
            val = float(np.mean([batch_loss(b, store, cfg, mode, train=False).loss for b in vbatches]))
            if val < best:
                best, stall = val, 0
            else:
                stall += 1
                if stall >= cfg.train_plateau_patience:
                    opt.lr *= 0.5
                    stall = 0
            validations.append((it, val, opt.lr))
            log.info("iteration %d: train %.4f val %.4f lr %.2e", it, res.loss, val, opt.lr)
            if out is not None:
                save_weights(store, out / "checkpoint.3dvw")
        if out_of_time:
            log.warning("stopping after %d iterations: time budget reached", it + 1)
            break
    store.zero_grad()
    if out is not None:
        save_weights(store, out / WEIGHTS_NAME)
        with open(out / "train_log.jsonl", "w") as f:
            for rec in history:
                f.write(json.dumps(rec) + "\n")
            for it, val, lr in validations:
                f.write(json.dumps(dict(validation=it, val_loss=val, lr=lr)) + "\n")
    return TrainResult(store, history, validations)


def source_digest() -> str:
    """Hash of the package sources (CLI excluded); part of every cached-weights key."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        if p.name == "cli.py":
            continue
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def cache_dir() -> Path:
    return Path(os.environ.get("MVSR_CACHE", Path.home() / ".cache" / "mvsr"))


def trained_store(cfg: PipelineConfig, mode: str | None = None, directory=None, progress=None):
    """Weights for (config, mode), trained on the configured synthetic seeds once and cached.

    Returns (store, path of the run directory).
    """
    mode = mode or cfg.train_mode
    key = hashlib.sha256((source_digest() + cfg.to_text() + mode).encode()).hexdigest()[:16]
    run = Path(directory or cache_dir()) / f"{mode}-{key}"
    if (run / WEIGHTS_NAME).exists():
        return load_weights(run / WEIGHTS_NAME), run
    t0 = time.perf_counter()
    train = synthetic_scenes(cfg.data_train_seeds, cfg, compact=True)
    val = synthetic_scenes(cfg.data_val_seeds, cfg, compact=True)
    tmp = run.with_name(run.name + ".partial")
    result = run_train(train, val, cfg, tmp, mode, progress)
    (tmp / "timing.json").write_text(json.dumps(dict(seconds=time.perf_counter() - t0,
                                                     iterations=len(result.history))))
    tmp.rename(run)
    return result.store, run


# ---------------------------------------------------------------------------
# studies


def _pooled(maps: dict) -> DepthMap:
    ids = sorted(maps)
    return DepthMap(np.concatenate([maps[f].depth for f in ids]), np.concatenate([maps[f].valid for f in ids]))


def coarse_metrics(depths: dict, scene: SceneData, cfg: PipelineConfig) -> DepthMetricsReport:
    """Depth metrics of 56x56 maps against nearest-downsampled ground truth, pooled over frames."""
    gt = {f: nn_downsample(scene.gt[f], COARSE_DEPTH, COARSE_DEPTH) for f in depths}
    return depth_metrics(_pooled(depths), _pooled(gt), cfg.eval_min_gt)


def reference_cloud(scene: SceneData, cfg: PipelineConfig) -> np.ndarray:
    if scene.spec is not None:
        return sample_gt_surface(scene.spec, cfg.eval_gt_density)
    pts = [depth_to_points(scene.cameras[f], scene.gt[f])[0] for f in sorted(scene.gt)]
    return np.concatenate(pts)


def fused_fscore(depths: dict, scene: SceneData, cfg: PipelineConfig, reference=None):
    params = FusionParams(cfg.fusion_rel_tol, cfg.fusion_min_consistent)
    cloud = fuse(depths, scene.cameras, params, cfg.fusion_average)
    ref = reference_cloud(scene, cfg) if reference is None else reference
    if len(cloud) == 0:
        return None
    return point_metrics(cloud.positions, ref, cfg.eval_tau)


@dataclass
class StudyRow:
    outer: int
    inner: int
    abs_rel: float
    abs_diff: float
    delta1: float
    fscore: float


def run_iter_study(scenes, store: ParameterStore, cfg: PipelineConfig, uniform: bool = False,
                   with_fscore: bool = True, mode: str | None = None) -> list:
    """Metrics after every refinement stage, averaged over scenes; one row per (lo, li)."""
    per_key = {}
    for scene in scenes:
        pred = predict_scene(scene, store, cfg, mode, uniform)
        ref = reference_cloud(scene, cfg) if with_fscore else None
        for key, snap in sorted(pred.refinement.snapshots.items()):
            m = coarse_metrics(snap, scene, cfg)
            f = np.nan
            if with_fscore:
                final, _ = upsample_maps(snap, scene, store)
                pm = fused_fscore(final, scene, cfg, ref)
                f = 0.0 if pm is None else pm.fscore
            per_key.setdefault(key, []).append((m, f))
    rows = []
    for (lo, li), items in sorted(per_key.items()):
        agg = aggregate_scenes([m for m, _ in items])
        rows.append(StudyRow(lo, li, agg.abs_rel, agg.abs_diff, agg.delta1, float(np.mean([f for _, f in items]))))
    return rows


@dataclass
class AblationResult:
    mode: str
    depth: DepthMetricsReport  # final refinement stage, coarse lattice
    fscore: float
    per_scene: list  # (scene name, abs_rel, fscore)


def run_ablation(scenes, store: ParameterStore, cfg: PipelineConfig, mode: str) -> AblationResult:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    reports, fs, per = [], [], []
    for scene in scenes:
        pred = predict_scene(scene, store, cfg, mode)
        m = coarse_metrics(pred.refinement.depths, scene, cfg)
        pm = fused_fscore(pred.final, scene, cfg)
        f = 0.0 if pm is None else pm.fscore
        reports.append(m)
        fs.append(f)
        per.append((scene.name, m.abs_rel, f))
    return AblationResult(mode, aggregate_scenes(reports), float(np.mean(fs)), per)


__all__ = [
    "AblationResult", "Prediction", "SceneData", "StepResult", "StudyRow", "TrainBatch", "TrainResult",
    "augment", "augment_with", "batch_loss", "cache_dir", "coarse_metrics", "fused_fscore", "infer_mode",
    "initial_depths", "load_scene_dir", "make_batch", "multi_stage_l1_loss", "nn_downsample", "predict_scene",
    "reference_cloud", "rotation_y", "run_ablation", "run_iter_study", "run_predict", "run_train",
    "scene_from_spec", "source_digest", "stage_l1", "synthetic_scenes", "trained_store", "upsample_maps",
    "validation_batches", "write_prediction",
]
