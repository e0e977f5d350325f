"""From raw points to patches.

A noisy torus is normalised, covered by farthest point sampling and grouped
into kNN patches. The covering radius printed at the end shrinks as the
anchor count grows, which is why 64 anchors suffice for 2,048 points.
"""

import numpy as np

from pointy.data import gen_synthetic
from pointy.geometry import fps, knn_group, normalize_unit_range

cloud = gen_synthetic(["torus"], per_class=1, n_points=2048, seed=0).clouds[0]
norm = normalize_unit_range(cloud)
pts = norm.points.astype(np.float64)
print(f"{len(cloud)} points, max |coord| after normalising: {np.abs(pts).max():.3f}")

anchors = fps(pts, 64)
patches = knn_group(pts, anchors, 32)
print("first anchors:", anchors[:8].tolist())
print("patch tensor:", patches.relative.shape, "(patches, neighbours, xyz)")

# Every relative offset plus its anchor gives back the absolute position exactly.
exact = np.array_equal(patches.relative + patches.anchors[:, None, :], patches.absolute)
print("relative + anchor == absolute:", exact)

print("\nanchors  covering radius")
for p in (1, 4, 16, 64, 256):
    idx = fps(pts, p)
    d = np.min([((pts - pts[j]) ** 2).sum(axis=1) for j in idx], axis=0)
    print(f"{p:7d}  {np.sqrt(d.max()):.3f}")
