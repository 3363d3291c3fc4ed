"""Point cloud containers, normalization, voxelization, and exact KNN search.

Coordinates are float64 N x 3 arrays. The spatial index wraps a kd-tree but
re-ranks candidates by squared distance with index tie-breaking, so query
results are always identical to a brute-force scan.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class PointCloud:
    """A 3D scene: N points with optional per-point attributes (e.g. color)."""

    positions: np.ndarray          # (N, 3) float64, meters
    attributes: np.ndarray | None = None   # (N, A) float64 or None
    id: str = ""

    def __post_init__(self):
        pos = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {pos.shape}")
        if pos.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions contain non-finite values")
        object.__setattr__(self, "positions", pos)
        if self.attributes is not None:
            att = np.ascontiguousarray(np.asarray(self.attributes, dtype=np.float64))
            if att.ndim != 2 or att.shape[0] != pos.shape[0]:
                raise ValueError("attributes must be (N, A) aligned with positions")
            object.__setattr__(self, "attributes", att)

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class NormalizationTransform:
    """Affine map p -> (p - centroid) / scale taking a cloud into the unit cube."""

    centroid: np.ndarray   # (3,)
    scale: float

    def apply(self, positions: np.ndarray) -> np.ndarray:
        return (np.asarray(positions, dtype=np.float64) - self.centroid) / self.scale

    def invert(self, positions: np.ndarray) -> np.ndarray:
        return np.asarray(positions, dtype=np.float64) * self.scale + self.centroid


def normalize_cloud(cloud: PointCloud) -> tuple[PointCloud, NormalizationTransform]:
    """Center a cloud and scale it into [-0.5, 0.5]^3.

    The scale is the largest axis extent. A degenerate cloud (all points
    coincident) keeps scale 1 and emits a warning.
    """
    pos = cloud.positions
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    centroid = (lo + hi) / 2.0
    scale = float((hi - lo).max())
    if scale <= 0.0:
        warnings.warn("degenerate point cloud (all points coincident); scale set to 1")
        scale = 1.0
    tf = NormalizationTransform(centroid=centroid, scale=scale)
    out = PointCloud(positions=tf.apply(pos), attributes=cloud.attributes, id=cloud.id)
    return out, tf


@dataclass
class SpatialIndex:
    """Exact nearest-neighbor index over a cloud's positions.

    Candidate retrieval uses a kd-tree; final ranking recomputes squared
    distances and breaks ties by smaller point index, matching a brute-force
    scan exactly.
    """

    positions: np.ndarray
    _tree: cKDTree = field(repr=False)


def build_index(cloud: PointCloud) -> SpatialIndex:
    pos = cloud.positions
    return SpatialIndex(positions=pos, _tree=cKDTree(pos))


def knn(index: SpatialIndex, query: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points to `query`, ascending distance.

    Equal distances resolve to the smaller point index. Raises ValueError
    when k exceeds the number of indexed points.
    """
    pos = index.positions
    n = pos.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"insufficient points: k={k} > N={n}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    d, _ = index._tree.query(q, k=k)
    r = float(np.max(np.atleast_1d(d)))
    # Inflate the radius so sqrt rounding in the tree cannot drop a tied point.
    cand = index._tree.query_ball_point(q, r * (1.0 + 1e-9) + 1e-300)
    cand = np.asarray(sorted(cand), dtype=np.int64)
    d2 = np.sum((pos[cand] - q) ** 2, axis=1)
    order = np.argsort(d2, kind="stable")   # stable keeps ascending-index tie order
    return cand[order[:k]]


def knn_brute_force(positions: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    """Reference scan: sort all points by squared distance, ties by index."""
    q = np.asarray(query, dtype=np.float64).reshape(3)
    d2 = np.sum((positions - q) ** 2, axis=1)
    order = np.argsort(d2, kind="stable")
    return order[:k].astype(np.int64)


def voxel_downsample(
    cloud: PointCloud, voxel_size: float
) -> tuple[PointCloud, list[np.ndarray]]:
    """Collapse the cloud onto an occupied-voxel grid.

    Returns one point per occupied voxel at the centroid of its member
    points, plus a parent map: for each coarse point, the array of fine
    indices it aggregates. Voxels are ordered by their lexicographic grid
    key so the output is stable under input permutation.
    """
    if not np.isfinite(voxel_size) or voxel_size <= 0:
        raise ValueError(f"voxel_size must be a positive finite real, got {voxel_size}")
    pos = cloud.positions
    keys = np.floor(pos / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    n_vox = uniq.shape[0]
    counts = np.bincount(inverse, minlength=n_vox).astype(np.float64)
    centroids = np.zeros((n_vox, 3), dtype=np.float64)
    np.add.at(centroids, inverse, pos)
    centroids /= counts[:, None]
    order = np.argsort(inverse, kind="stable")
    bounds = np.cumsum(counts.astype(np.int64))[:-1]
    parent_map = [np.ascontiguousarray(g) for g in np.split(order, bounds)]
    coarse = PointCloud(positions=centroids, id=cloud.id)
    return coarse, parent_map


def parent_inverse(parent_map: list[np.ndarray], n_fine: int) -> np.ndarray:
    """Fine-index -> coarse-index array derived from a parent map."""
    inv = np.empty(n_fine, dtype=np.int64)
    for ci, fine in enumerate(parent_map):
        inv[fine] = ci
    return inv
