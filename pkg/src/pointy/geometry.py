"""Point-cloud preprocessing and patch partitioning.

All kernels are exact: farthest point sampling and kNN grouping use brute
force distances and break every tie by the lowest point index, so results are
reproducible and agree index-for-index with naive reference implementations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class PointCloud:
    """``points`` is (N, 3) float32; ``extras`` optional (N, 3) normals or colours."""

    points: np.ndarray
    extras: np.ndarray | None = None
    extras_kind: str | None = None  # "normals" | "colors"
    label: int | None = None
    id: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be (N>=1, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError(f"cloud {self.id!r} has non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.extras is not None:
            ex = np.ascontiguousarray(self.extras, dtype=np.float32)
            if ex.shape != pts.shape:
                raise ValueError(f"extras shape {ex.shape} does not match points {pts.shape}")
            object.__setattr__(self, "extras", ex)
            if self.extras_kind not in ("normals", "colors"):
                object.__setattr__(self, "extras_kind", "normals")

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray, extras: np.ndarray | None = None) -> PointCloud:
        return replace(self, points=points, extras=extras)


@dataclass
class PatchSet:
    anchor_indices: np.ndarray  # (P,)
    anchors: np.ndarray  # (P, 3) float64
    neighbor_indices: np.ndarray  # (P, k)
    relative: np.ndarray  # (P, k, 3) neighbour - anchor
    absolute: np.ndarray  # (P, k, 3)
    extras: np.ndarray | None = None  # (P, k, 3) when the cloud carries extras

    @property
    def n_patches(self) -> int:
        return self.anchor_indices.shape[0]

    @property
    def k(self) -> int:
        return self.neighbor_indices.shape[1]


def normalize_unit_range(cloud: PointCloud) -> PointCloud:
    """Centre on the centroid and scale by the largest absolute coordinate.

    A single global scale keeps the aspect ratio; the result lies in [-1, 1]
    with at least one coordinate at +-1 unless all points coincide.
    """
    pts = cloud.points.astype(np.float64)
    centred = pts - pts.mean(axis=0)
    scale = np.abs(centred).max()
    if scale == 0.0:
        scale = 1.0
    return cloud.with_points(centred / scale, cloud.extras)


def rotate_z(cloud: PointCloud, angle: float) -> PointCloud:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pts = cloud.points.astype(np.float64) @ rot.T
    extras = cloud.extras
    if extras is not None and cloud.extras_kind == "normals":
        extras = extras.astype(np.float64) @ rot.T
    return cloud.with_points(pts, extras)


def sample_uniform(cloud: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Draw ``n`` points uniformly; with replacement only when ``n > N``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    size = len(cloud)
    idx = rng.choice(size, n, replace=n > size)
    extras = None if cloud.extras is None else cloud.extras[idx]
    return cloud.with_points(cloud.points[idx], extras)


def _sq_dist_to(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def fps(points: np.ndarray, n_anchors: int, start: str = "centroid",
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Farthest point sampling, O(N * P).

    The first anchor is the point farthest from the centroid (``start="centroid"``)
    or a uniformly random point (``start="random"``, needs ``rng``). Each later
    anchor maximises its distance to the nearest already chosen anchor. Ties go
    to the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= n_anchors <= n:
        raise ValueError(f"cannot pick {n_anchors} anchors from {n} points")
    if start == "centroid":
        first = int(np.argmax(_sq_dist_to(pts, pts.mean(axis=0))))
    elif start == "random":
        if rng is None:
            raise ValueError("random FPS start needs an rng")
        first = int(rng.integers(n))
    else:
        raise ValueError(f"unknown FPS start rule {start!r}")
    chosen = np.empty(n_anchors, dtype=np.int64)
    chosen[0] = first
    nearest = _sq_dist_to(pts, pts[first])
    for i in range(1, n_anchors):
        nxt = int(np.argmax(nearest))
        chosen[i] = nxt
        np.minimum(nearest, _sq_dist_to(pts, pts[nxt]), out=nearest)
    return chosen


def knn_group(points: np.ndarray, anchor_indices, k: int, extras: np.ndarray | None = None) -> PatchSet:
    """Group the ``k`` nearest points of every anchor, sorted by (distance, index)."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    anchor_indices = np.asarray(anchor_indices, dtype=np.int64)
    anchors = pts[anchor_indices]
    diff = pts[None, :, :] - anchors[:, None, :]
    d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    if k < n:
        # Candidates are everything within the k-th smallest distance; the
        # stable sort over that short list then settles ties by index.
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1:k]
        neighbours = np.empty((len(anchor_indices), k), dtype=np.int64)
        for row in range(len(anchor_indices)):
            cand = np.flatnonzero(d2[row] <= kth[row, 0])
            order = np.argsort(d2[row, cand], kind="stable")[:k]
            neighbours[row] = cand[order]
    else:
        neighbours = np.argsort(d2, axis=1, kind="stable")
    absolute = pts[neighbours]
    relative = absolute - anchors[:, None, :]
    patch_extras = None if extras is None else np.asarray(extras, dtype=np.float64)[neighbours]
    return PatchSet(anchor_indices, anchors, neighbours, relative, absolute, patch_extras)


def patchify(cloud: PointCloud, n_patches: int, k: int, fps_start: str = "centroid",
             rng: np.random.Generator | None = None) -> PatchSet:
    """normalize -> fps -> knn_group on one cloud."""
    if len(cloud) < n_patches:
        raise ValueError(f"cloud has {len(cloud)} points, fewer than {n_patches} patches")
    norm = normalize_unit_range(cloud)
    anchors = fps(norm.points, n_patches, start=fps_start, rng=rng)
    return knn_group(norm.points, anchors, k, extras=norm.extras)
