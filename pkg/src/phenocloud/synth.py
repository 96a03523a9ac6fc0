"""Synthetic plants and turntable scenes with exact ground truth.

Plants are line segments (a stem plus straight leaves) sampled at a fixed
density per meter with Gaussian jitter. Scenes add a pot wall, a turntable
disk with a dense rim, optional blue backdrop artifacts, and are then tilted,
translated and shrunk to mimic an unscaled structure-from-motion cloud.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .cloud import PointCloud
from .errors import InvalidArgument

# truth source codes for non-plant points; plants use their index (>= 0)
POT = -2
TABLE = -3
RIM = -4
ARTIFACT = -5

PLANT_GREEN = (45, 165, 50)
BLUE_ARTIFACT = (35, 60, 190)


@dataclass(frozen=True)
class LeafSpec:
    attach_fraction: float
    angle_deg: float
    length: float
    azimuth_deg: float = 0.0


@dataclass(frozen=True)
class PlantSpec:
    stem_height: float = 0.3
    stem_tilt_deg: float = 0.0
    stem_tilt_azimuth_deg: float = 0.0
    leaves: tuple = ()
    density: float = 4000.0
    noise: float = 0.0005
    seed: int = 0

    def __post_init__(self):
        leaves = tuple(l if isinstance(l, LeafSpec) else LeafSpec(*l) for l in self.leaves)
        object.__setattr__(self, "leaves", leaves)
        if self.stem_height <= 0 or self.density <= 0 or self.noise < 0:
            raise InvalidArgument("stem_height and density must be > 0, noise >= 0")
        for leaf in leaves:
            if not 0 < leaf.attach_fraction < 1:
                raise InvalidArgument("attach fraction must lie in (0, 1)")
            if not 0 < leaf.angle_deg < 180:
                raise InvalidArgument("leaf angle must lie in (0, 180)")
            if leaf.length <= 0:
                raise InvalidArgument("leaf length must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "PlantSpec":
        d = dict(d)
        d["leaves"] = tuple(LeafSpec(**l) if isinstance(l, dict) else LeafSpec(*l) for l in d.get("leaves", ()))
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["leaves"] = [asdict(l) for l in self.leaves]
        return out


@dataclass
class PlantTruth:
    height: float  # z-extent of the generated points
    design_height: float  # z-extent of the noiseless skeleton
    radius: float  # max horizontal distance of generated points from the base axis
    radius_index: int
    leaf_angles: list  # degrees, one per leaf, in spec order
    attach_points: list
    part: np.ndarray  # 0 = stem, i = leaf i (1-based)
    stem_direction: np.ndarray


@dataclass
class SceneTruth:
    source: np.ndarray  # plant index (>= 0) or POT/TABLE/RIM/ARTIFACT
    plants: list  # PlantTruth per plant, in the scene's metric frame
    plant_offsets: list
    tilt_deg: float
    raw_scale: float
    rotation: np.ndarray  # metric -> tilted
    offset: np.ndarray  # metric translation applied after rotation
    table_normal_raw: np.ndarray
    table_d_raw: float
    pot_radius: float
    pot_height: float
    table_radius: float

    def plant_mask(self, plant: int | None = None) -> np.ndarray:
        return self.source >= 0 if plant is None else self.source == plant

    def to_dict(self) -> dict:
        return {
            "tilt_deg": self.tilt_deg,
            "raw_scale": self.raw_scale,
            "rotation": self.rotation.tolist(),
            "offset": self.offset.tolist(),
            "table_normal_raw": self.table_normal_raw.tolist(),
            "table_d_raw": self.table_d_raw,
            "pot_radius": self.pot_radius,
            "pot_height": self.pot_height,
            "table_radius": self.table_radius,
            "source_counts": {str(int(k)): int(v) for k, v in zip(*np.unique(self.source, return_counts=True))},
            "plants": [
                {
                    "height": p.height,
                    "design_height": p.design_height,
                    "radius": p.radius,
                    "leaf_angles": list(p.leaf_angles),
                    "offset": list(map(float, off)),
                }
                for p, off in zip(self.plants, self.plant_offsets)
            ],
        }


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _perp_basis(d):
    # for a vertical stem, azimuth 0 points along +x and 90 along +y
    helper = np.array([1.0, 0, 0]) if abs(d[0]) < 0.9 else np.array([0, 1.0, 0])
    u = _unit(helper - (helper @ d) * d)
    w = np.cross(d, u)
    return u, w


def _stem_direction(spec: PlantSpec) -> np.ndarray:
    t = np.radians(spec.stem_tilt_deg)
    az = np.radians(spec.stem_tilt_azimuth_deg)
    return np.array([np.sin(t) * np.cos(az), np.sin(t) * np.sin(az), np.cos(t)])


def leaf_direction(stem_dir, angle_deg: float, azimuth_deg: float) -> np.ndarray:
    """Unit vector at ``angle_deg`` from ``stem_dir``, rotated ``azimuth_deg`` around it."""
    u, w = _perp_basis(stem_dir)
    th, az = np.radians(angle_deg), np.radians(azimuth_deg)
    return _unit(np.cos(th) * stem_dir + np.sin(th) * (np.cos(az) * u + np.sin(az) * w))


def _sample_segment(rng, start, direction, length, density, noise):
    n = max(2, int(round(length * density)))
    t = np.sort(rng.uniform(0.0, length, size=n))
    pts = start + t[:, None] * direction
    if noise > 0:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    return pts


def gen_plant(spec: PlantSpec, base=(0.0, 0.0, 0.0)):
    """Sample a plant whose stem starts at ``base``.

    Returns:
        (PointCloud with green colors, PlantTruth)
    """
    rng = np.random.default_rng(spec.seed)
    base = np.asarray(base, dtype=np.float64)
    sdir = _stem_direction(spec)
    parts = [_sample_segment(rng, base, sdir, spec.stem_height, spec.density, spec.noise)]
    part_ids = [np.zeros(len(parts[0]), dtype=np.int32)]
    skeleton = [base, base + spec.stem_height * sdir]
    attach_points = []
    for i, leaf in enumerate(spec.leaves, start=1):
        attach = base + leaf.attach_fraction * spec.stem_height * sdir
        ldir = leaf_direction(sdir, leaf.angle_deg, leaf.azimuth_deg)
        seg = _sample_segment(rng, attach, ldir, leaf.length, spec.density, spec.noise)
        parts.append(seg)
        part_ids.append(np.full(len(seg), i, dtype=np.int32))
        skeleton += [attach, attach + leaf.length * ldir]
        attach_points.append(attach)
    pts = np.vstack(parts)
    # nothing grows below the soil surface: mirror jitter that dips under the base
    below = pts[:, 2] < base[2]
    pts[below, 2] = 2 * base[2] - pts[below, 2]
    part = np.concatenate(part_ids)
    jitter = rng.integers(-12, 13, size=(len(pts), 3))
    colors = np.clip(np.array(PLANT_GREEN) + jitter, 0, 255).astype(np.uint8)
    skeleton = np.array(skeleton)
    r = np.hypot(pts[:, 0] - base[0], pts[:, 1] - base[1])
    truth = PlantTruth(
        height=float(pts[:, 2].max() - pts[:, 2].min()),
        design_height=float(skeleton[:, 2].max() - skeleton[:, 2].min()),
        radius=float(r.max()),
        radius_index=int(np.argmax(r)),
        leaf_angles=[float(l.angle_deg) for l in spec.leaves],
        attach_points=attach_points,
        part=part,
        stem_direction=sdir,
    )
    return PointCloud(pts, colors=colors), truth


@dataclass(frozen=True)
class SceneSpec:
    table_radius: float = 0.199
    table_points: int = 20000
    rim_points: int = 6000
    rim_width: float = 0.0008
    plane_noise: float = 0.0005
    pot_radius: float = 0.06
    pot_height: float = 0.10
    pot_points: int = 3000
    tilt_deg: float = 0.0
    tilt_azimuth_deg: float = 0.0
    raw_scale: float = 1.0
    blue_fraction: float = 0.0
    offset_range: float = 0.5
    seed: int = 0


def _rotation_about(axis, angle_rad):
    axis = _unit(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1 - np.cos(angle_rad)) * (k @ k)


def gen_scene(plants: Sequence, scene: SceneSpec = SceneSpec()):
    """Build a raw-looking turntable scene.

    Args:
        plants: sequence of ``PlantSpec`` or ``(PlantSpec, (x, y))`` pairs;
            bases sit on the pot top at the given horizontal offset.
        scene: table, pot, tilt, scale and artifact settings.

    Returns:
        (PointCloud in raw units, SceneTruth)
    """
    rng = np.random.default_rng(scene.seed)
    chunks, colors, source = [], [], []
    plant_truths, offsets = [], []

    for idx, item in enumerate(plants):
        spec, xy = (item, (0.0, 0.0)) if isinstance(item, PlantSpec) else item
        base = np.array([xy[0], xy[1], scene.pot_height])
        cloud, truth = gen_plant(spec, base=base)
        chunks.append(cloud.positions)
        colors.append(cloud.colors)
        source.append(np.full(len(cloud), idx, dtype=np.int32))
        plant_truths.append(truth)
        offsets.append(np.asarray(xy, dtype=np.float64))

    # turntable disk, uniform by area
    r = scene.table_radius * np.sqrt(rng.uniform(size=scene.table_points))
    phi = rng.uniform(0, 2 * np.pi, size=scene.table_points)
    disk = np.column_stack([r * np.cos(phi), r * np.sin(phi), rng.normal(scale=scene.plane_noise, size=scene.table_points)])
    chunks.append(disk)
    colors.append(np.clip(rng.normal(130, 8, size=(len(disk), 3)), 0, 255).astype(np.uint8))
    source.append(np.full(len(disk), TABLE, dtype=np.int32))

    # dense rim at the platform edge
    phi = rng.uniform(0, 2 * np.pi, size=scene.rim_points)
    rr = scene.table_radius + rng.normal(scale=scene.rim_width / 2, size=scene.rim_points)
    rim = np.column_stack([rr * np.cos(phi), rr * np.sin(phi), rng.normal(scale=scene.plane_noise, size=scene.rim_points)])
    chunks.append(rim)
    colors.append(np.clip(rng.normal(70, 6, size=(len(rim), 3)), 0, 255).astype(np.uint8))
    source.append(np.full(len(rim), RIM, dtype=np.int32))

    # pot wall
    if scene.pot_points:
        phi = rng.uniform(0, 2 * np.pi, size=scene.pot_points)
        z = rng.uniform(0, scene.pot_height, size=scene.pot_points)
        pr = scene.pot_radius + rng.normal(scale=scene.plane_noise, size=scene.pot_points)
        pot = np.column_stack([pr * np.cos(phi), pr * np.sin(phi), z])
        chunks.append(pot)
        colors.append(np.tile(np.array([[150, 75, 40]], dtype=np.uint8), (len(pot), 1)))
        source.append(np.full(len(pot), POT, dtype=np.int32))

    # blue backdrop artifacts hugging the plant silhouette
    plant_pts = np.vstack(chunks[: len(plant_truths)]) if plant_truths else np.zeros((0, 3))
    n_art = int(round(scene.blue_fraction * len(plant_pts)))
    if n_art and len(plant_pts):
        anchor = plant_pts[rng.integers(0, len(plant_pts), size=n_art)]
        direction = rng.normal(size=(n_art, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        art = anchor + direction * rng.uniform(0.001, 0.004, size=(n_art, 1))
        chunks.append(art)
        jitter = rng.integers(-15, 16, size=(n_art, 3))
        colors.append(np.clip(np.array(BLUE_ARTIFACT) + jitter, 0, 255).astype(np.uint8))
        source.append(np.full(n_art, ARTIFACT, dtype=np.int32))

    metric = np.vstack(chunks)
    col = np.vstack(colors)
    src = np.concatenate(source)

    az = np.radians(scene.tilt_azimuth_deg)
    rot = _rotation_about([np.cos(az), np.sin(az), 0.0], np.radians(scene.tilt_deg))
    offset = rng.uniform(-scene.offset_range, scene.offset_range, size=3)
    raw = (metric @ rot.T + offset) / scene.raw_scale

    normal_raw = rot @ np.array([0.0, 0, 1])
    d_raw = -float(normal_raw @ (offset / scene.raw_scale))
    truth = SceneTruth(
        source=src,
        plants=plant_truths,
        plant_offsets=offsets,
        tilt_deg=scene.tilt_deg,
        raw_scale=scene.raw_scale,
        rotation=rot,
        offset=offset,
        table_normal_raw=normal_raw,
        table_d_raw=d_raw,
        pot_radius=scene.pot_radius,
        pot_height=scene.pot_height,
        table_radius=scene.table_radius,
    )
    return PointCloud(raw, colors=col), truth


def two_leaf_spec(seed: int, angles=None, **overrides) -> PlantSpec:
    """Young two-leaf plant with random but well-posed geometry.

    Leaves attach at distinct heights, point in roughly opposite directions
    and stay below the stem top and above the stem base.
    """
    rng = np.random.default_rng(seed)
    height = float(rng.uniform(0.25, 0.35))
    if angles is None:
        angles = rng.uniform(20.0, 120.0, size=2)
    fractions = (float(rng.uniform(0.35, 0.45)), float(rng.uniform(0.6, 0.7)))
    az0 = float(rng.uniform(0, 360))
    leaves = []
    for i, (frac, ang) in enumerate(zip(fractions, angles)):
        attach_z = frac * height
        length = float(rng.uniform(0.10, 0.14))
        cosang = np.cos(np.radians(ang))
        # keep the tip between 10% and 90% of the stem height
        if cosang > 0:
            length = min(length, (0.9 * height - attach_z) / cosang)
        elif cosang < 0:
            length = min(length, (attach_z - 0.1 * height) / -cosang)
        leaves.append(LeafSpec(frac, float(ang), length, az0 + 180.0 * i + float(rng.uniform(-30, 30))))
    params = dict(stem_height=height, leaves=tuple(leaves), seed=seed)
    params.update(overrides)
    return PlantSpec(**params)


def seedling_pot(seed: int, n_plants: int, spacing: float = 0.03, **overrides):
    """Plant specs and base offsets for a multi-seedling pot.

    Bases lie on a circle so every pair is at least ``spacing`` apart.
    """
    rng = np.random.default_rng(seed)
    if n_plants == 1:
        offsets = [(0.0, 0.0)]
    else:
        ring = spacing / (2 * np.sin(np.pi / n_plants))
        start = rng.uniform(0, 2 * np.pi)
        offsets = [
            (ring * np.cos(start + 2 * np.pi * i / n_plants), ring * np.sin(start + 2 * np.pi * i / n_plants))
            for i in range(n_plants)
        ]
    out = []
    for i, xy in enumerate(offsets):
        outward = np.degrees(np.arctan2(xy[1], xy[0])) if n_plants > 1 else rng.uniform(0, 360)
        height = float(rng.uniform(0.10, 0.16))
        leaves = []
        for j in range(int(rng.integers(1, 3))):
            leaves.append(
                LeafSpec(
                    float(rng.uniform(0.3, 0.7)),
                    float(rng.uniform(25, 70)),
                    float(rng.uniform(0.04, 0.07)),
                    float(outward + rng.uniform(-60, 60)),
                )
            )
        params = dict(stem_height=height, leaves=tuple(leaves), seed=int(seed * 100 + i), density=6000.0)
        params.update(overrides)
        out.append((PlantSpec(**params), xy))
    return out


def gen_seedling_cloud(seed: int, n_plants: int, spacing: float = 0.03, **overrides):
    """Plant points of a multi-seedling pot with the soil surface at z = 0.

    Returns:
        (PointCloud, per-point plant index, list of PlantTruth)
    """
    chunks, colors, source, truths = [], [], [], []
    for i, (spec, xy) in enumerate(seedling_pot(seed, n_plants, spacing, **overrides)):
        cloud, truth = gen_plant(spec, base=(xy[0], xy[1], 0.0))
        chunks.append(cloud.positions)
        colors.append(cloud.colors)
        source.append(np.full(len(cloud), i, dtype=np.int32))
        truths.append(truth)
    return PointCloud(np.vstack(chunks), colors=np.vstack(colors)), np.concatenate(source), truths


def save_truth(truth: SceneTruth, path) -> None:
    with open(path, "w") as fh:
        json.dump(truth.to_dict(), fh, indent=2, sort_keys=True)
