"""
Synthetic deformation pairs
===========================

Build source/target pairs from simple shapes, warp them with a thin-plate
spline, and optionally move the source rigidly. Run with ``python3 demos/01_synthetic_pairs.py``.
"""
import numpy as np

from unirit import geom, synth
from unirit.synth import PairSpec

# A thin-plate spline through 8 control points interpolates their offsets
# exactly and is smooth everywhere else.
rng = np.random.default_rng(0)
control = rng.normal(size=(8, 3)) * 50
offsets = rng.normal(size=(8, 3)) * 10
warp = synth.tps_fit(control, offsets)
print("max error at control points:", np.abs(warp(control) - (control + offsets)).max())

# Case A: pure non-rigid deformation, mean displacement 15 units on a
# 200-unit shape.
pair = synth.make_pair(PairSpec(shape_family="blob", deform_mm=15, n_points=1024, seed=1))
print("Case A mean |ground truth|:", np.linalg.norm(pair.ground_truth, axis=1).mean())

# Case B adds a rotation about the target centroid and a translation.
pair_b = synth.make_pair(PairSpec(shape_family="ellipsoid", case="B", deform_mm=15, n_points=1024, seed=2))
print("Case B rotation angle (deg):", geom.rotation_angle_deg(pair_b.rotation))
print("Case B translation:", pair_b.translation)

# The ground truth always maps the source onto the target, index by index.
print("source + gt == target:", np.allclose(pair_b.source + pair_b.ground_truth, pair_b.target))

# Dropout removes source points, so per-index ground truth no longer exists.
dropped = synth.make_pair(PairSpec(n_points=1024, dropout_fraction=0.2, seed=3))
print("dropout source size:", dropped.source.shape[0], "ground truth:", dropped.ground_truth)
