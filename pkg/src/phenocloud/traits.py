"""Scalar plant traits: height, radius, hull volumes and ground cover."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError

from .cloud import PointCloud
from .errors import DegenerateHull, DegenerateShape, EmptyCloud, InvalidArgument, SchemaError

DEFAULT_ALPHA = 100.0  # 1/m; triangles with circumradius >= 1 cm are dropped
DEFAULT_FRACTIONS = (1.0, 0.6, 0.4)

CSV_COLUMNS = [
    "plant_id", "H_max", "R_max", "V100", "V60", "V40", "G",
    "H_over_V100", "H_over_V60", "H_over_V40",
    "R_over_V100", "R_over_V60", "R_over_V40",
    "V100_over_V60", "V100_over_V40", "V60_over_V40",
]


def _require_points(cloud: PointCloud):
    if cloud.is_empty:
        raise EmptyCloud("trait of an empty cloud")


def height(cloud: PointCloud) -> float:
    """Vertical extent, lowest to highest point."""
    _require_points(cloud)
    z = cloud.positions[:, 2]
    return float(z.max() - z.min())


def radius(cloud: PointCloud):
    """Largest horizontal distance from the z axis.

    Returns:
        (radius, index of the farthest point; lowest index on ties)
    """
    _require_points(cloud)
    r = np.hypot(cloud.positions[:, 0], cloud.positions[:, 1])
    i = int(np.argmax(r))
    return float(r[i]), i


def top_fraction(cloud: PointCloud, f: float) -> PointCloud:
    """Points in the top ``f`` of the plant's height range."""
    if not 0 < f <= 1:
        raise InvalidArgument("fraction must lie in (0, 1]")
    _require_points(cloud)
    z = cloud.positions[:, 2]
    lo, hi = z.min(), z.max()
    cut = lo + (1.0 - f) * (hi - lo)
    return cloud.subset(z >= cut)


def _affine_rank(points: np.ndarray) -> int:
    q = points - points.mean(axis=0)
    s = np.linalg.svd(q, compute_uv=False)
    if len(s) == 0 or s[0] == 0:
        return 0
    return int(np.count_nonzero(s > 1e-12 * s[0]))


def hull_facets(points: np.ndarray) -> np.ndarray:
    """Triangles (m, 3) of the 3D convex hull, wound outward."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 4 or _affine_rank(pts) < 3:
        raise DegenerateHull("points do not span three dimensions")
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise DegenerateHull(str(exc)) from exc
    tri = hull.simplices.copy()
    a, b, c = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    normal = np.cross(b - a, c - a)
    flip = np.einsum("ij,ij->i", normal, hull.equations[:, :3]) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return tri


def convex_hull_volume(cloud_or_points) -> float:
    """Volume of the convex hull, as a fan of tetrahedra from an interior point.

    Raises:
        DegenerateHull: fewer than 4 points or all points coplanar.
    """
    pts = cloud_or_points.positions if isinstance(cloud_or_points, PointCloud) else np.asarray(cloud_or_points, float)
    tri = hull_facets(pts)
    apex = pts[np.unique(tri)].mean(axis=0)
    a, b, c = pts[tri[:, 0]] - apex, pts[tri[:, 1]] - apex, pts[tri[:, 2]] - apex
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


@dataclass(frozen=True)
class AlphaShape2D:
    boundaries: list  # closed loops of (x, y) vertices
    alpha: float
    area: float
    triangles: np.ndarray = field(repr=False, default=None)


def _circumradius(a, b, c):
    ab = np.linalg.norm(b - a, axis=1)
    bc = np.linalg.norm(c - b, axis=1)
    ca = np.linalg.norm(a - c, axis=1)
    cross = (b - a)[:, 0] * (c - a)[:, 1] - (b - a)[:, 1] * (c - a)[:, 0]
    twice_area = np.abs(cross)
    with np.errstate(divide="ignore"):
        return np.where(twice_area > 0, ab * bc * ca / (2 * twice_area), np.inf), twice_area / 2


def _boundary_loops(points2d, triangles):
    edges = np.sort(np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    border = uniq[counts == 1]
    adj: dict = {}
    for u, v in border:
        adj.setdefault(int(u), []).append(int(v))
        adj.setdefault(int(v), []).append(int(u))
    for nbrs in adj.values():
        nbrs.sort()
    used = set()
    loops = []
    for u, v in border:
        key = (int(u), int(v))
        if key in used:
            continue
        loop = [int(u)]
        cur = int(v)
        used.add(key)
        while cur != loop[0]:
            loop.append(cur)
            nxt = next((w for w in adj[cur] if (min(cur, w), max(cur, w)) not in used), None)
            if nxt is None:
                break
            used.add((min(cur, nxt), max(cur, nxt)))
            cur = nxt
        loops.append(points2d[loop])
    return loops


def alpha_shape(points2d, alpha: float) -> AlphaShape2D:
    """Alpha shape of planar points.

    ``alpha = 0`` gives the convex hull; a positive ``alpha`` keeps only
    Delaunay triangles with circumradius below ``1 / alpha``, so larger values
    give tighter shapes.
    """
    if alpha < 0:
        raise InvalidArgument("alpha must be >= 0")
    pts = np.unique(np.asarray(points2d, dtype=np.float64), axis=0)
    if len(pts) < 3 or _affine_rank(pts) < 2:
        raise DegenerateShape("projected points are collinear")
    tri = Delaunay(pts).simplices
    circ, area = _circumradius(pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]])
    keep = area > 0
    if alpha > 0:
        keep &= circ < 1.0 / alpha
    kept = tri[keep]
    return AlphaShape2D(_boundary_loops(pts, kept), float(alpha), float(area[keep].sum()), kept)


def ground_cover_area(cloud: PointCloud, alpha: float = DEFAULT_ALPHA):
    """Area of the alpha shape of the cloud projected onto the xy plane.

    Returns:
        (area, AlphaShape2D)
    """
    if len(cloud) < 3:
        raise DegenerateShape("ground cover needs at least 3 points")
    shape = alpha_shape(cloud.positions[:, :2], alpha)
    return shape.area, shape


def _ratio(num, den):
    if num is None or den is None or den == 0:
        return math.nan
    return num / den


@dataclass
class TraitRecord:
    plant_id: str
    H_max: float
    R_max: float
    V100: float
    V60: float
    V40: float
    G: Optional[float] = None
    R_max_index: int = -1
    flags: list = field(default_factory=list)

    @property
    def ratios(self) -> dict:
        v = {"V100": self.V100, "V60": self.V60, "V40": self.V40}
        out = {}
        for k in ("V100", "V60", "V40"):
            out[f"H_over_{k}"] = _ratio(self.H_max, v[k])
        for k in ("V100", "V60", "V40"):
            out[f"R_over_{k}"] = _ratio(self.R_max, v[k])
        out["V100_over_V60"] = _ratio(self.V100, self.V60)
        out["V100_over_V40"] = _ratio(self.V100, self.V40)
        out["V60_over_V40"] = _ratio(self.V60, self.V40)
        return out

    def row(self) -> dict:
        row = {"plant_id": self.plant_id, "H_max": self.H_max, "R_max": self.R_max,
               "V100": self.V100, "V60": self.V60, "V40": self.V40, "G": self.G}
        row.update(self.ratios)
        return row

    def features(self) -> dict:
        """Numeric columns only, for the rating models."""
        return {k: v for k, v in self.row().items() if k != "plant_id" and v is not None}


@dataclass(frozen=True)
class TraitConfig:
    alpha: float = DEFAULT_ALPHA
    fractions: Sequence[float] = DEFAULT_FRACTIONS
    ground_cover: bool = True


def compute_traits(cloud: PointCloud, config: TraitConfig = TraitConfig(), plant_id: str = "plant") -> TraitRecord:
    """All scalar traits of a cleaned, scaled plant cloud.

    Degenerate hulls or ground covers are reported as 0 with a flag instead of
    failing.
    """
    if len(config.fractions) != 3:
        raise InvalidArgument("expected three hull fractions (full, middle, top)")
    h = height(cloud)
    r, ri = radius(cloud)
    flags = []
    volumes = []
    for f in config.fractions:
        part = top_fraction(cloud, f)
        try:
            volumes.append(convex_hull_volume(part))
        except DegenerateHull:
            volumes.append(0.0)
            flags.append(f"degenerate_hull_{int(round(f * 100))}")
    g = None
    if config.ground_cover:
        try:
            g, _ = ground_cover_area(cloud, config.alpha)
        except DegenerateShape:
            g = 0.0
            flags.append("degenerate_ground_cover")
    return TraitRecord(plant_id, h, r, volumes[0], volumes[1], volumes[2], g, ri, flags)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_traits_csv(records: Sequence[TraitRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in records:
            row = rec.row()
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def read_traits_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            raise SchemaError(f"unexpected trait columns: {header}")
        out = []
        for row in reader:
            vals = dict(zip(header, row))
            g = vals["G"]
            out.append(TraitRecord(
                vals["plant_id"],
                float(vals["H_max"]), float(vals["R_max"]),
                float(vals["V100"]), float(vals["V60"]), float(vals["V40"]),
                float(g) if g != "" else None,
            ))
        return out


def read_feature_table(path):
    """Read a trait CSV as (plant ids, column names, float matrix)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "plant_id":
            raise SchemaError("feature table must start with a plant_id column")
        ids, rows = [], []
        for row in reader:
            ids.append(row[0])
            rows.append([float(v) if v != "" else math.nan for v in row[1:]])
    return ids, header[1:], np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
