"""
Plane-sweep matching costs on a synthetic room
==============================================

Build the variance cost volume for one reference view and read a depth
off it by winner-take-all, before any learning is involved.
"""

import numpy as np

from mvsr.costvolume import build_cost_volume
from mvsr.evalmetrics import depth_metrics
from mvsr.features import coarse_maps, select_source_views
from mvsr.geometry import DepthMap
from mvsr.pipeline import nn_downsample, scene_from_spec
from mvsr.config import PipelineConfig
from mvsr.synthdata import generate_scene

cfg = PipelineConfig()
scene = scene_from_spec(generate_scene(300, n_frames=8)).with_features(cfg)

# reference frame 3 is matched against 2 previous and 2 next frames
views = select_source_views(scene.frames, 3)
print("reference", views.reference, "sources", views.sources)

vol = build_cost_volume(views, coarse_maps(scene.features), scene.cameras)
print("cost volume", vol.cost.shape)  # 56 x 56 lattice, 96 hypotheses, 32 channels

# mean channel variance per hypothesis; the lowest cost is the best match
mean_cost = vol.cost.mean(axis=-1)
print("hypotheses with zero cost (seen by the reference only): %.1f%%"
      % (100 * np.mean(mean_cost == 0)))
masked = np.where(mean_cost > 0, mean_cost, np.inf)
wta = vol.grid.values[np.argmin(masked, axis=-1)]

gt = nn_downsample(scene.gt[3], 56, 56)
m = depth_metrics(DepthMap(wta, np.isfinite(masked.min(axis=-1))), gt)
print("winner-take-all  abs_rel %.3f  abs_diff %.3f m  delta<1.25 %.3f" % (m.abs_rel, m.abs_diff, m.delta1))
