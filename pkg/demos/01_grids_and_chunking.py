"""Walk through the volumetric grid layer: TDF normalization, the
window/chunk/patch hierarchy, sliding windows, and the RFG1 file format.
"""

import numpy as np

from retrivox import (ChunkLayout, ScalarGrid3, coarsen, fold, normalize_tdf,
                      occupancy_from_points, read_grid, reassemble_windows,
                      unfold, windows, write_grid)

# A scene window is 64^3 voxels at the default layout; retrieval works on
# 16^3 chunks and attention on 4^3 patches, so one window holds 4^3 = 64
# chunks and each chunk holds 4^3 patches.
layout = ChunkLayout()
print(f"layout: window {layout.scene_dim}^3, chunk {layout.chunk_dim}^3, "
      f"patch {layout.patch_dim}^3 -> {layout.chunks_per_window} chunks/window")

# Raw distances (in voxels) clamp at the truncation radius and rescale to
# [0, 1]: 0 on the surface, 1 in free space.
rng = np.random.default_rng(0)
raw = ScalarGrid3(rng.uniform(0, 6, size=(64, 64, 64)).astype(np.float32), 0.054)
tdf = normalize_tdf(raw, trunc=3.0)
print(f"normalized range: [{tdf.values.min():.3f}, {tdf.values.max():.3f}]")

# unfold/fold are exact inverses; chunk order is lexicographic (i, j, k).
chunks = unfold(tdf, layout)
back = fold(chunks, layout)
print("fold(unfold(x)) exact:", np.array_equal(back.values, tdf.values))

# Larger scenes tile into disjoint 64^3 windows (padding value 1.0 = empty).
big = ScalarGrid3(rng.uniform(0, 1, size=(70, 70, 70)).astype(np.float32), 0.054)
pairs = windows(big, layout, stride=64)
print(f"70^3 scene -> {len(pairs)} windows at stride 64")
restored = reassemble_windows(pairs, big.dims)
print("window round trip exact:", np.array_equal(restored.values, big.values))

# Point clouds become occupancy grids; out-of-bounds points are counted.
pts = rng.uniform(-0.1, 64 * 0.054, size=(1000, 3))
occ, dropped = occupancy_from_points(pts, (64, 64, 64), 0.054)
print(f"occupancy: {int(occ.values.sum())} voxels, {dropped} points outside")

# Min-pool coarsening preserves zero crossings of distance fields.
lowres = coarsen(tdf, 4)
print(f"coarsened to {lowres.dims}, voxel {lowres.voxel_size:.3f} m")

# RFG1 round trip is bit-exact.
write_grid("/tmp/demo_grid.rfg1", tdf)
again = read_grid("/tmp/demo_grid.rfg1")
print("file round trip exact:", np.array_equal(again.values, tdf.values))
