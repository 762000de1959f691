"""
How much does each refinement pass help?
========================================

Train (or load the cached) desk-scale model, then score the depth maps
after every outer/inner refinement pass on two held-out scenes.  The first
call trains for roughly half an hour; later calls reuse the cached weights.
"""

import logging

from mvsr.config import PipelineConfig
from mvsr.pipeline import run_iter_study, synthetic_scenes, trained_store

logging.basicConfig(level=logging.INFO, format="%(message)s")
cfg = PipelineConfig()

store, run_dir = trained_store(cfg, "full")
print("weights from", run_dir)

scenes = synthetic_scenes(cfg.data_test_seeds, cfg)
rows = run_iter_study(scenes, store, cfg)

print(f"{'lo':>3} {'li':>3} {'abs_rel':>8} {'abs_diff':>9} {'d<1.25':>7} {'F':>6}")
for r in rows:
    print(f"{r.outer:3d} {r.inner:3d} {r.abs_rel:8.4f} {r.abs_diff:9.4f} {r.delta1:7.3f} {r.fscore:6.3f}")

first, last = rows[0], rows[-1]
print("refinement cuts abs_rel by %.0f%%" % (100 * (1 - last.abs_rel / first.abs_rel)))
