"""From raw points to per-point features: voxelize, sparse encoder, then decode back to every point.

The decoder's point tables keep one row per raw point at every level, which is the
point of decoding voxels back to points instead of sampling a few key points.
"""
import numpy as np

from v2pdet.backbone import SparseEncoder
from v2pdet.decoder import VoxelToPointDecoder, knn_interpolate, seg_labels
from v2pdet.scene_io import SceneBounds, SynthSpec, synth_scene
from v2pdet.voxelizer import VoxelGridSpec, devoxelize, voxelize

rng = np.random.default_rng(1)
bounds = SceneBounds(0, 25.6, -12.8, 12.8, -3, 1)
pc, gt = synth_scene(SynthSpec(num_boxes=3, points_per_box=150, background_points=800, seed=3, bounds=bounds))
print(f"{len(pc)} points, {len(gt)} boxes, {seg_labels(pc, gt).sum()} foreground points")

grid = VoxelGridSpec((0.1, 0.1, 0.25), bounds)
vox = voxelize(pc, grid)
print(f"{len(vox)} occupied voxels on a {grid.grid_shape} grid")

levels = SparseEncoder((8, 16, 32, 32), rng)(vox)
for lv in levels:
    print(f"  stride {lv.spec.stride}: {len(lv):5d} voxels x {lv.width} channels")

# inverse-distance interpolation: a query between two sources at distances 1 and 2
mix = knn_interpolate([[0, 0, 0]], [[1, 0, 0], [-2, 0, 0]], np.eye(2), k=2).data[0]
print("\nweights for distances (1, 2):", mix)

decoder = VoxelToPointDecoder((8, 16, 32, 32), (256, 192, 160, 128, 128), rng, seg_hidden=32)
out = decoder(levels, pc)
for name, p in zip(("P4", "P3", "P2", "P1"), out.levels):
    print(f"  {name}: {p.shape}")
print(f"  P0: {out.p0.shape}, segmentation: {out.seg.shape}")
print("stride-8 voxel (1, 0, 0) center:", devoxelize([1, 0, 0], grid.at_stride(8)))
