"""Assemble one synthetic object from its true correspondences.

Shows the geometric back end in isolation: pairwise RANSAC + Kabsch on the
stored matches, then pose-graph alignment, then scoring and PLY export.

    python demos/oracle_assembly.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from jigsaw import align, dataio, geom, metrics, synth

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

obj = synth.make_object(synth.SynthConfig(pieces_min=4, pieces_max=4, shape="superellipsoid"), 3)
print(f"{obj.n_pieces} pieces, {len(obj.scattered)} points, {int(obj.labels.sum())} on fracture surfaces")

result = align.assemble_from_pairs(obj.scattered, obj.piece_id, obj.gt_match)
for i, flag in enumerate(result.flags):
    print(f"  piece {i}: {int(np.sum(obj.piece_id == i))} points, {flag or 'aligned'}")
score = metrics.evaluate_object(obj, result.poses)
print(f"MAE(R) {score.mae_r:.3f} deg  MAE(T) {score.mae_t:.2e}  PA {score.pa:.2f}")

dataio.export_ply(obj, [geom.RigidTransform.identity()] * obj.n_pieces, out / "scattered.ply", source="scattered")
dataio.export_ply(obj, result.poses, out / "assembled.ply", source="scattered")
print(f"wrote {out / 'scattered.ply'} and {out / 'assembled.ply'}")
