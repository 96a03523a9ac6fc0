"""Point-cloud container and generic cleaning primitives."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InsufficientPoints, InvalidArgument
from .spatial import SpatialIndex

NOISE_LABEL = -1


class Frame(enum.IntEnum):
    RAW = 0
    ALIGNED = 1
    SCALED = 2


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable set of 3D points with optional per-point attributes.

    ``positions`` is an (N, 3) float64 array. ``colors`` (uint8 RGB),
    ``normals`` (unit vectors) and ``labels`` (int32, -1 = noise) are either
    None or have N rows. Extra per-point scalar properties (e.g. ``point_id``)
    live in ``extra``.
    """

    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    frame: Frame = Frame.RAW
    scale_applied: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "positions", pos)
        n = len(pos)
        if self.colors is not None:
            col = np.asarray(self.colors)
            if col.shape != (n, 3):
                raise InvalidArgument(f"colors shape {col.shape} != ({n}, 3)")
            if col.dtype != np.uint8:
                if np.any(col < 0) or np.any(col > 255):
                    raise InvalidArgument("color channels must lie in [0, 255]")
                col = col.astype(np.uint8)
            object.__setattr__(self, "colors", col)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != (n, 3):
                raise InvalidArgument(f"normals shape {nrm.shape} != ({n}, 3)")
            object.__setattr__(self, "normals", nrm)
        if self.labels is not None:
            lab = np.asarray(self.labels).astype(np.int32).reshape(-1)
            if lab.shape != (n,):
                raise InvalidArgument(f"labels shape {lab.shape} != ({n},)")
            object.__setattr__(self, "labels", lab)
        extra = {}
        for key, val in dict(self.extra).items():
            arr = np.asarray(val)
            if arr.shape[:1] != (n,):
                raise InvalidArgument(f"extra property {key!r} has wrong length")
            extra[key] = arr
        object.__setattr__(self, "extra", extra)
        object.__setattr__(self, "frame", Frame(self.frame))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def is_empty(self) -> bool:
        return len(self.positions) == 0

    def subset(self, index) -> "PointCloud":
        """Return the points selected by a boolean mask or an index array."""
        idx = np.asarray(index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = idx.astype(np.intp)

        def take(a):
            return None if a is None else a[idx]

        return replace(
            self,
            positions=self.positions[idx],
            colors=take(self.colors),
            normals=take(self.normals),
            labels=take(self.labels),
            extra={k: v[idx] for k, v in self.extra.items()},
        )

    def with_positions(self, positions: np.ndarray, **changes) -> "PointCloud":
        return replace(self, positions=positions, **changes)

    def with_frame(self, frame: Frame, **changes) -> "PointCloud":
        if Frame(frame) < self.frame:
            raise InvalidArgument(f"frame cannot go back from {self.frame.name} to {Frame(frame).name}")
        return replace(self, frame=Frame(frame), **changes)

    def with_labels(self, labels) -> "PointCloud":
        return replace(self, labels=labels)

    def bbox_diagonal(self) -> float:
        if self.is_empty:
            return 0.0
        return float(np.linalg.norm(self.positions.max(axis=0) - self.positions.min(axis=0)))


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    Voxel keys are ``floor(p / voxel_size)`` per axis, so a point exactly on a
    boundary falls into the higher voxel. Colors are averaged (rounded to the
    nearest integer); normals and labels are dropped. Output is ordered by
    voxel key.
    """
    if not voxel_size > 0:
        raise InvalidArgument("voxel_size must be > 0")
    if cloud.is_empty:
        return replace(cloud, normals=None, labels=None, extra={})
    keys = np.floor(cloud.positions / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)
    sums = np.zeros((m, 3))
    np.add.at(sums, inverse, cloud.positions)
    centroids = sums / counts[:, None]
    colors = None
    if cloud.colors is not None:
        csum = np.zeros((m, 3))
        np.add.at(csum, inverse, cloud.colors.astype(np.float64))
        colors = np.clip(np.rint(csum / counts[:, None]), 0, 255).astype(np.uint8)
    return PointCloud(
        centroids,
        colors=colors,
        frame=cloud.frame,
        scale_applied=cloud.scale_applied,
    )


def estimate_normals(cloud: PointCloud, k: int = 20) -> PointCloud:
    """Attach PCA normals computed from each point and its k nearest neighbours.

    The normal is the eigenvector of the smallest covariance eigenvalue. Its
    sign is chosen so that z > 0; when z is zero the x component (then y) is
    made positive.
    """
    if k < 3:
        raise InvalidArgument("k must be >= 3")
    n = len(cloud)
    if n < k + 1:
        raise InsufficientPoints(f"need at least {k + 1} points for k={k}, got {n}")
    index = SpatialIndex(cloud.positions)
    _, nbr = index.query_many(cloud.positions, k + 1)
    local = cloud.positions[nbr]  # (n, k+1, 3)
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / (k + 1)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals = orient_normals(normals)
    return replace(cloud, normals=normals)


def orient_normals(normals: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Flip normals so the first non-zero of (z, x, y) is positive."""
    out = np.array(normals, dtype=np.float64, copy=True)
    if len(out) == 0:
        return out
    ordered = out[:, [2, 0, 1]]
    lead_axis = np.argmax(np.abs(ordered) > eps, axis=1)
    lead = ordered[np.arange(len(out)), lead_axis]
    out[lead < 0] *= -1.0
    return out


def remove_statistical_outliers(cloud: PointCloud, k: int = 20, std_ratio: float = 2.0):
    """Drop points whose mean k-NN distance is unusually large.

    A point is removed iff its mean distance to its k nearest neighbours
    (itself excluded) exceeds ``mean + std_ratio * std`` of that statistic
    over the whole cloud.

    Returns:
        (filtered cloud, sorted array of removed indices)
    """
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    if not std_ratio > 0:
        raise InvalidArgument("std_ratio must be > 0")
    n = len(cloud)
    if n < k + 1:
        raise InsufficientPoints(f"need at least {k + 1} points for k={k}, got {n}")
    stat = mean_knn_distance(cloud.positions, k)
    threshold = stat.mean() + std_ratio * stat.std()
    removed = np.flatnonzero(stat > threshold)
    keep = np.ones(n, dtype=bool)
    keep[removed] = False
    return cloud.subset(keep), removed


def mean_knn_distance(points: np.ndarray, k: int) -> np.ndarray:
    index = SpatialIndex(points)
    dist, _ = index.query_many(points, k + 1)
    return dist[:, 1:].mean(axis=1)
