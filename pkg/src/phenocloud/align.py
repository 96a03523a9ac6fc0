"""Centering, turntable-plane alignment, metric scaling and cleanup of raw clouds."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .cloud import Frame, PointCloud, orient_normals
from .errors import EmptyBand, EmptyCloud, InvalidArgument, NoPlaneFound

log = logging.getLogger(__name__)

TABLE_RADIUS_M = 0.199  # 39.8 cm diameter platform


@dataclass(frozen=True)
class Plane:
    """Plane ``a x + b y + c z + d = 0`` with unit normal (a, b, c)."""

    coefficients: np.ndarray
    inliers: np.ndarray
    distance_threshold: float

    @property
    def normal(self) -> np.ndarray:
        return self.coefficients[:3]

    @property
    def d(self) -> float:
        return float(self.coefficients[3])

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return points @ self.normal + self.d


@dataclass(frozen=True)
class RigidTransform:
    """``p' = rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def then(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying ``self`` first and ``other`` second."""
        return RigidTransform(other.rotation @ self.rotation, other.rotation @ self.translation + other.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


@dataclass(frozen=True)
class ScaleCalibration:
    peak_radius_raw: float
    known_radius: float = TABLE_RADIUS_M

    def __post_init__(self):
        if not (self.peak_radius_raw > 0 and self.known_radius > 0):
            raise InvalidArgument("calibration radii must be > 0")

    @property
    def scale_factor(self) -> float:
        return self.known_radius / self.peak_radius_raw


def center(cloud: PointCloud):
    """Translate the cloud so its mean is the origin. Returns (cloud, centroid)."""
    if cloud.is_empty:
        raise EmptyCloud("cannot center an empty cloud")
    centroid = cloud.positions.mean(axis=0)
    shifted = cloud.positions - centroid
    # a second pass removes the rounding residue of the first
    residual = shifted.mean(axis=0)
    return cloud.with_positions(shifted - residual), centroid + residual


def _fit_plane_lsq(points: np.ndarray):
    c = points.mean(axis=0)
    q = points - c
    _, vecs = np.linalg.eigh(q.T @ q)
    n = vecs[:, 0]
    return n, -float(n @ c)


def _canonical(normal: np.ndarray, d: float):
    flipped = orient_normals(normal[None, :])[0]
    if flipped @ normal < 0:
        return flipped, -d
    return normal, d


def segment_plane(
    cloud: PointCloud,
    distance_threshold: float,
    max_iterations: int = 1000,
    seed: int = 0,
    refine: bool = True,
    batch: int = 16,
) -> Plane:
    """RANSAC plane detection.

    Each iteration fits the plane through 3 random points and counts points
    strictly closer than ``distance_threshold``; the first plane with the
    largest count wins. Collinear or repeated samples are skipped. With
    ``refine`` the winner is re-fitted by total least squares over its
    inliers and the inlier set is recomputed.
    """
    if not distance_threshold > 0:
        raise InvalidArgument("distance_threshold must be > 0")
    pts = cloud.positions
    n = len(pts)
    if n < 3:
        raise NoPlaneFound(f"need at least 3 points, got {n}")
    rng = np.random.default_rng(seed)
    samples = rng.integers(0, n, size=(max_iterations, 3))
    p0, p1, p2 = pts[samples[:, 0]], pts[samples[:, 1]], pts[samples[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    norms = np.linalg.norm(normals, axis=1)
    scale = max(cloud.bbox_diagonal(), 1e-300)
    valid = norms > 1e-12 * scale * scale
    if not valid.any():
        raise NoPlaneFound("all samples were collinear or repeated")
    normals[valid] /= norms[valid, None]
    ds = -np.einsum("ij,ij->i", normals, p0)

    best_count, best_iter = -1, -1
    candidates = np.flatnonzero(valid)
    pts_t = np.ascontiguousarray(pts.T)
    for start in range(0, len(candidates), batch):
        ids = candidates[start:start + batch]
        dist = normals[ids] @ pts_t
        dist += ds[ids, None]
        np.abs(dist, out=dist)
        counts = np.count_nonzero(dist < distance_threshold, axis=1)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count, best_iter = int(counts[j]), int(ids[j])

    normal, d = normals[best_iter], float(ds[best_iter])
    inliers = np.flatnonzero(np.abs(pts @ normal + d) < distance_threshold)
    if refine and len(inliers) >= 3:
        rn, rd = _fit_plane_lsq(pts[inliers])
        if rn @ normal < 0:
            rn, rd = -rn, -rd
        normal, d = rn, rd
        inliers = np.flatnonzero(np.abs(pts @ normal + d) < distance_threshold)
    normal, d = _canonical(normal, d)
    return Plane(np.append(normal, d), inliers, float(distance_threshold))


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Proper rotation taking unit vector ``a`` onto unit vector ``b``."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    if c < -1 + 1e-12:
        # half turn about any axis orthogonal to a
        axis = np.cross(a, [1.0, 0, 0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0, 1.0, 0])
        axis /= np.linalg.norm(axis)
        return 2 * np.outer(axis, axis) - np.eye(3)
    k = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + k + (k @ k) / (1 + c)


def align_to_plane(cloud: PointCloud, plane: Plane):
    """Rotate the plane normal onto +z and shift the plane to z = 0.

    The normal is flipped first if most non-inlier points lie on its negative
    side, so the plant ends up above the table.

    Returns:
        (aligned cloud, RigidTransform)
    """
    normal, d = plane.normal.copy(), plane.d
    outside = np.ones(len(cloud), dtype=bool)
    outside[plane.inliers] = False
    if outside.any():
        s = cloud.positions[outside] @ normal + d
        if np.count_nonzero(s < 0) > np.count_nonzero(s > 0):
            normal, d = -normal, -d
    rot = rotation_between(normal, np.array([0.0, 0.0, 1.0]))
    transform = RigidTransform(rot, np.array([0.0, 0.0, d]))
    return apply_transform(cloud, transform).with_frame(Frame.ALIGNED), transform


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ transform.rotation.T
    return cloud.with_positions(transform.apply(cloud.positions), normals=normals)


def recenter_xy(cloud: PointCloud, indices):
    """Shift horizontally so the points at ``indices`` have zero mean x and y."""
    idx = np.asarray(indices)
    if len(idx) == 0:
        raise EmptyCloud("no reference points for recentering")
    cx, cy = cloud.positions[idx, :2].mean(axis=0)
    transform = RigidTransform(np.eye(3), np.array([-cx, -cy, 0.0]))
    return apply_transform(cloud, transform), transform


def segment_ring(cloud: PointCloud, num_bins: int, z_min: float, z_max: float, tolerance: float):
    """Find the turntable rim from a histogram of horizontal radii.

    Only points with ``z_min < z < z_max`` are used. The peak radius is the
    centre of the fullest bin (lowest bin on ties).

    Returns:
        (indices into ``cloud`` within ``tolerance`` of the peak, peak_radius)
    """
    if num_bins < 2:
        raise InvalidArgument("num_bins must be >= 2")
    if not z_min < z_max:
        raise InvalidArgument("z_min must be < z_max")
    z = cloud.positions[:, 2]
    band = np.flatnonzero((z > z_min) & (z < z_max))
    if len(band) == 0:
        raise EmptyBand(f"no points with {z_min} < z < {z_max}")
    pts = cloud.positions[band]
    r = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2)
    hist, edges = np.histogram(r, bins=num_bins)
    k = int(np.argmax(hist))
    peak = float((edges[k] + edges[k + 1]) / 2)
    ring = band[(r >= peak - tolerance) & (r <= peak + tolerance)]
    return ring, peak


def ring_defaults(cloud: PointCloud, distance_threshold: float, num_bins: int = 100,
                  band_factor: float = 2.0, tolerance_bins: float = 2.0):
    """Default z band and tolerance for :func:`segment_ring`.

    The band is ``±band_factor * distance_threshold`` and the tolerance is
    ``tolerance_bins`` histogram bin widths.
    """
    z_min, z_max = -band_factor * distance_threshold, band_factor * distance_threshold
    z = cloud.positions[:, 2]
    band = (z > z_min) & (z < z_max)
    if not band.any():
        raise EmptyBand(f"no points with {z_min} < z < {z_max}")
    r = np.hypot(cloud.positions[band, 0], cloud.positions[band, 1])
    width = (r.max() - r.min()) / num_bins if r.max() > r.min() else distance_threshold
    return z_min, z_max, tolerance_bins * width


def apply_scale(cloud: PointCloud, calib: ScaleCalibration) -> PointCloud:
    if cloud.frame != Frame.ALIGNED:
        raise InvalidArgument(f"apply_scale expects an aligned cloud, got frame {cloud.frame.name}")
    return cloud.with_positions(cloud.positions * calib.scale_factor).with_frame(Frame.SCALED, scale_applied=True)


def filter_color(cloud: PointCloud, lower, upper, mode: str = "all") -> PointCloud:
    """Colour-band filter for backdrop artifacts.

    ``mode="all"`` keeps a point iff every channel is outside
    ``[lower, upper]`` (the verbatim rule). ``mode="any"`` keeps it iff at
    least one channel is outside, i.e. drops exactly the points inside the
    colour box.
    """
    lower = np.asarray(lower, dtype=int)
    upper = np.asarray(upper, dtype=int)
    if lower.shape != (3,) or upper.shape != (3,) or np.any(lower > upper):
        raise InvalidArgument("lower and upper must be RGB triples with lower <= upper")
    if cloud.colors is None:
        raise InvalidArgument("cloud has no colors")
    col = cloud.colors.astype(int)
    outside = (col < lower) | (col > upper)
    if mode == "all":
        keep = outside.all(axis=1)
    elif mode == "any":
        keep = outside.any(axis=1)
    else:
        raise InvalidArgument(f"unknown filter mode {mode!r}")
    return cloud.subset(keep)


def crop_cylinder(cloud: PointCloud, radius: Optional[float], z_min: float, pot_top: Optional[float] = None) -> PointCloud:
    """Remove the table (``z < z_min``) and the pot (``z < pot_top`` inside ``radius``)."""
    p = cloud.positions
    drop = p[:, 2] < z_min
    if radius is not None and pot_top is not None:
        drop |= (p[:, 2] < pot_top) & (np.hypot(p[:, 0], p[:, 1]) <= radius)
    return cloud.subset(~drop)


@dataclass
class AlignConfig:
    seed: int = 0
    distance_threshold: Optional[float] = None  # raw units; None = 0.002 x bbox diagonal
    max_iterations: int = 1000
    refine: bool = True
    num_bins: int = 100
    band_factor: float = 2.0
    tolerance_bins: float = 2.0
    table_radius: float = TABLE_RADIUS_M
    filter_lower: Optional[tuple] = None
    filter_upper: Optional[tuple] = None
    filter_mode: str = "all"
    pot_radius: Optional[float] = None
    pot_top: Optional[float] = None
    crop_z_min: float = 0.005
    recenter: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AlignResult:
    cloud: PointCloud
    plane: Plane
    transform: RigidTransform  # raw -> aligned (before scaling)
    calibration: ScaleCalibration
    ring_indices: np.ndarray
    steps: dict

    def sidecar(self) -> dict:
        return {
            "plane": [float(v) for v in self.plane.coefficients],
            "plane_inliers": int(len(self.plane.inliers)),
            "distance_threshold": self.plane.distance_threshold,
            "transform": self.transform.to_dict(),
            "peak_radius_raw": self.calibration.peak_radius_raw,
            "known_radius": self.calibration.known_radius,
            "scale_factor": self.calibration.scale_factor,
            "ring_points": int(len(self.ring_indices)),
            "point_counts": dict(self.steps),
        }


def align_cloud(cloud: PointCloud, config: AlignConfig = AlignConfig()) -> AlignResult:
    """Raw cloud to centred, aligned, scaled and cropped plant cloud.

    Order: center, plane, align, (xy recenter on the table), ring, scale,
    colour filter, crop.
    """
    steps = {"input": len(cloud)}
    centered, centroid = center(cloud)
    to_center = RigidTransform(np.eye(3), -centroid)
    thr = config.distance_threshold
    if thr is None:
        thr = 0.002 * centered.bbox_diagonal()
    plane = segment_plane(centered, thr, config.max_iterations, config.seed, config.refine)
    aligned, to_plane = align_to_plane(centered, plane)
    transform = to_center.then(to_plane)
    if config.recenter:
        aligned, shift = recenter_xy(aligned, plane.inliers)
        transform = transform.then(shift)
    z_min, z_max, tol = ring_defaults(aligned, thr, config.num_bins, config.band_factor, config.tolerance_bins)
    ring, peak = segment_ring(aligned, config.num_bins, z_min, z_max, tol)
    calib = ScaleCalibration(peak, config.table_radius)
    scaled = apply_scale(aligned, calib)
    steps["scaled"] = len(scaled)
    if config.filter_lower is not None and config.filter_upper is not None:
        scaled = filter_color(scaled, config.filter_lower, config.filter_upper, config.filter_mode)
    steps["color_filtered"] = len(scaled)
    plant = crop_cylinder(scaled, config.pot_radius, config.crop_z_min, config.pot_top)
    steps["cropped"] = len(plant)
    log.debug("aligned cloud: %s", steps)
    return AlignResult(plant, plane, transform, calib, ring, steps)
