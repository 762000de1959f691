"""Command-line entry point: ``mvsr <command> [options]``.

Exit codes: 0 success, 2 validation failure (bad input, config or file),
3 numeric failure (non-finite values, degenerate geometry).
"""

from __future__ import annotations

import os

# worker caps must be in place before numpy loads its thread pools
_threads = os.environ.get("MVSR_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict  # noqa: E402
from pathlib import Path  # noqa: E402

log = logging.getLogger("mvsr")


def _config(args):
    from .config import PipelineConfig, load_config

    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    log.info("resolved configuration:\n%s", cfg.to_text().rstrip())
    return cfg


def _store(args, cfg, mode=None):
    from .diffkern import load_weights
    from .pipeline import trained_store

    if args.weights:
        return load_weights(args.weights)
    log.info("no --weights given; using cached or freshly trained %s weights", mode or cfg.train_mode)
    return trained_store(cfg, mode)[0]


def _scenes(paths, cfg):
    from .pipeline import load_scene_dir, synthetic_scenes

    if paths:
        return [load_scene_dir(p).with_features(cfg) for p in paths]
    log.info("no scene given; using synthetic test seeds %s", list(cfg.data_test_seeds))
    return synthetic_scenes(cfg.data_test_seeds, cfg)


def _out(args, default):
    out = Path(args.out or default)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args, cfg):
    from .synthdata import generate_scene, write_scene

    seeds = args.seeds or [cfg.seed]
    out = Path(args.out or "scenes")
    for s in seeds:
        spec = generate_scene(s, cfg.data_boxes, cfg.data_frames, cfg.data_orbit_step_deg)
        d = write_scene(spec, out / f"scene_{s:04d}" if len(seeds) > 1 or args.out is None else out)
        log.info("wrote %s", d)


def cmd_train(args, cfg):
    from .pipeline import run_train, synthetic_scenes

    out = Path(args.out or "run")
    train = synthetic_scenes(cfg.data_train_seeds, cfg, compact=True)
    val = synthetic_scenes(cfg.data_val_seeds, cfg, compact=True)
    res = run_train(train, val, cfg, out)
    log.info("trained %d iterations; final loss %.4f; weights in %s", len(res.history), res.history[-1]["loss"],
             out / "weights.3dvw")


def cmd_predict(args, cfg):
    from .pipeline import load_scene_dir, run_predict

    scene = load_scene_dir(args.scene)
    store = _store(args, cfg)
    out = Path(args.out or "prediction")
    run_predict(scene, cfg, store, out, args.dump_iters)
    log.info("wrote %d depth maps to %s", len(scene.frames), out / "depth")


def _read_depths(directory, frames):
    from .geometry import DepthMap
    from .io import read_pfm

    out = {}
    for f in frames:
        p = Path(directory) / f"{f:04d}.pfm"
        if p.exists():
            d = read_pfm(p).astype(float)
            out[f] = DepthMap(d, d > 0)
    if not out:
        from .errors import ValidationError
        raise ValidationError(f"no depth maps found in {directory}")
    return out


def cmd_fuse(args, cfg):
    import numpy as np

    from .fusion import FusionParams, fuse
    from .io import write_ply
    from .pipeline import load_scene_dir

    scene = load_scene_dir(args.scene)
    src = Path(args.depths) / "depth" if args.depths else Path(args.scene) / "depth"
    depths = _read_depths(src, scene.frames)
    cloud = fuse(depths, scene.cameras, FusionParams(cfg.fusion_rel_tol, cfg.fusion_min_consistent),
                 cfg.fusion_average)
    out = _out(args, "cloud.ply")
    write_ply(out, cloud.positions, support=cloud.support.astype(np.uint8), frame=cloud.frames.astype(np.int32))
    log.info("fused %d points into %s", len(cloud), out)


def cmd_eval(args, cfg):
    from .evalmetrics import aggregate_scenes, depth_metrics, point_metrics, write_jsonl
    from .io import read_ply
    from .pipeline import _pooled, load_scene_dir, reference_cloud

    scene = load_scene_dir(args.scene)
    pred = _read_depths(Path(args.depths) / "depth", scene.frames)
    rec = {"depth": depth_metrics(_pooled(pred), _pooled({f: scene.gt[f] for f in pred}), cfg.eval_min_gt)}
    cloud_path = Path(args.cloud) if args.cloud else None
    if cloud_path is not None:
        pts = read_ply(cloud_path)["points"]
        rec["points"] = point_metrics(pts, reference_cloud(scene, cfg), cfg.eval_tau)
    out = _out(args, "report.jsonl")
    agg = {k: aggregate_scenes([v]) for k, v in rec.items()}
    write_jsonl(out, [(scene.name, rec)], agg)
    print(out.read_text(), end="")


def cmd_iter_study(args, cfg):
    from .pipeline import run_iter_study

    scenes = _scenes(args.scenes, cfg)
    rows = run_iter_study(scenes, _store(args, cfg), cfg)
    out = _out(args, "iter_study.jsonl")
    with open(out, "w") as f:
        for r in rows:
            f.write(json.dumps(asdict(r)) + "\n")
    print(f"{'lo':>3} {'li':>3} {'abs_rel':>8} {'abs_diff':>9} {'d<1.25':>7} {'F':>6}")
    for r in rows:
        print(f"{r.outer:3d} {r.inner:3d} {r.abs_rel:8.4f} {r.abs_diff:9.4f} {r.delta1:7.3f} {r.fscore:6.3f}")


def cmd_ablate(args, cfg):
    from .diffkern import load_weights
    from .pipeline import run_ablation, trained_store

    scenes = _scenes(args.scenes, cfg)
    out = _out(args, "ablation.jsonl")
    modes = args.modes or ["full", "no3d", "single_scale", "avg_feats"]
    with open(out, "w") as f:
        for mode in modes:
            if args.weights:
                store = load_weights(Path(args.weights) / f"{mode}.3dvw")
            else:
                store = trained_store(cfg.replace(train_mode=mode), mode)[0]
            res = run_ablation(scenes, store, cfg, mode)
            f.write(json.dumps(dict(mode=mode, fscore=res.fscore, **asdict(res.depth))) + "\n")
            print(f"{mode:>12}  abs_rel {res.depth.abs_rel:.4f}  F {res.fscore:.3f}")


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "fuse": cmd_fuse, "eval": cmd_eval,
    "iter-study": cmd_iter_study, "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--weights", help="weight file (a directory of <mode>.3dvw files for ablate)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mvsr", description="Multi-view depth prediction, fusion and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="write synthetic scene directories")
    s.add_argument("--seeds", type=int, nargs="*", help="one scene per seed (default: --seed)")
    sub.add_parser("train", parents=[common], help="train on the configured synthetic seeds")
    s = sub.add_parser("predict", parents=[common], help="depth maps for every frame of a scene")
    s.add_argument("scene")
    s.add_argument("--dump-iters", action="store_true", help="also write every intermediate stage")
    s = sub.add_parser("fuse", parents=[common], help="fuse depth maps into a PLY point cloud")
    s.add_argument("scene")
    s.add_argument("depths", nargs="?", help="prediction directory (default: the scene's own depth/)")
    s = sub.add_parser("eval", parents=[common], help="depth (and point) metrics of a prediction")
    s.add_argument("scene")
    s.add_argument("depths", help="prediction directory")
    s.add_argument("--cloud", help="fused PLY to score against the reference surface")
    s = sub.add_parser("iter-study", parents=[common], help="metrics after every refinement stage")
    s.add_argument("scenes", nargs="*")
    s = sub.add_parser("ablate", parents=[common], help="compare scene-model ablation modes")
    s.add_argument("scenes", nargs="*")
    s.add_argument("--modes", nargs="*", choices=["full", "no3d", "single_scale", "avg_feats"])
    return p


def main(argv=None) -> int:
    from .errors import NumericError, ValidationError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 3
    except (ValidationError, ValueError, FileNotFoundError) as exc:
        log.error("validation failure: %s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
