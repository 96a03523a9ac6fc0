import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phenocloud.align import (
    AlignConfig,
    Plane,
    RigidTransform,
    ScaleCalibration,
    align_cloud,
    align_to_plane,
    apply_scale,
    center,
    crop_cylinder,
    filter_color,
    rotation_between,
    segment_plane,
    segment_ring,
)
from phenocloud.cloud import Frame, PointCloud
from phenocloud.errors import EmptyBand, EmptyCloud, InvalidArgument, NoPlaneFound
from phenocloud.synth import ARTIFACT, SceneSpec, gen_scene, two_leaf_spec


def test_center_cube():
    corners = np.array([[x, y, z] for x in (4, 6) for y in (4, 6) for z in (4, 6)], dtype=float)
    out, c = center(PointCloud(corners))
    np.testing.assert_allclose(c, [5, 5, 5])
    np.testing.assert_allclose(np.abs(out.positions), 1.0)


def test_center_single_point():
    out, _ = center(PointCloud(np.array([[3.0, -7.0, 1e5]])))
    np.testing.assert_allclose(out.positions, 0, atol=1e-9)


def test_center_random_cloud():
    pts = np.random.default_rng(0).normal(loc=100.0, size=(10_000, 3))
    out, _ = center(PointCloud(pts))
    assert np.abs(out.positions.mean(axis=0)).max() < 1e-9


def test_center_empty():
    with pytest.raises(EmptyCloud):
        center(PointCloud(np.zeros((0, 3))))


def planted_plane():
    rng = np.random.default_rng(1)
    on = np.column_stack([rng.uniform(-1, 1, 1000), rng.uniform(-1, 1, 1000), np.full(1000, 3.0)])
    off = rng.uniform(-1, 1, size=(50, 3)) * [1, 1, 2] + [0, 0, 6]
    return PointCloud(np.vstack([on, off]))


def test_plane_planted_z3():
    plane = segment_plane(planted_plane(), 0.01, 500, seed=0)
    np.testing.assert_allclose(plane.normal, [0, 0, 1], atol=1e-9)
    assert plane.d == pytest.approx(-3.0)
    np.testing.assert_array_equal(plane.inliers, np.arange(1000))


def test_plane_all_on_z0():
    pts = np.random.default_rng(2).uniform(-1, 1, size=(200, 3))
    pts[:, 2] = 0
    plane = segment_plane(PointCloud(pts), 0.01, 50, seed=0)
    np.testing.assert_allclose(plane.coefficients, [0, 0, 1, 0], atol=1e-12)
    assert len(plane.inliers) == 200


def test_plane_deterministic():
    cloud = planted_plane()
    a = segment_plane(cloud, 0.05, 100, seed=7)
    b = segment_plane(cloud, 0.05, 100, seed=7)
    assert a.coefficients.tobytes() == b.coefficients.tobytes()
    np.testing.assert_array_equal(a.inliers, b.inliers)


def test_plane_raw_mode_is_a_sampled_plane():
    plane = segment_plane(planted_plane(), 0.01, 200, seed=0, refine=False)
    assert np.linalg.norm(plane.normal) == pytest.approx(1.0)
    assert len(plane.inliers) == 1000


def test_plane_degenerate():
    line = PointCloud(np.column_stack([np.arange(20.0), np.zeros(20), np.zeros(20)]))
    with pytest.raises(NoPlaneFound):
        segment_plane(line, 0.1, 50)
    with pytest.raises(NoPlaneFound):
        segment_plane(PointCloud(np.zeros((2, 3))), 0.1)
    with pytest.raises(InvalidArgument):
        segment_plane(planted_plane(), 0.0)


def test_inliers_strictly_within_threshold():
    cloud, _ = gen_scene([two_leaf_spec(1)], SceneSpec(tilt_deg=10, seed=2))
    plane = segment_plane(cloud, 0.002, 300, seed=1)
    assert np.all(np.abs(plane.signed_distance(cloud.positions[plane.inliers])) < 0.002)


def test_align_identity_when_already_aligned():
    rng = np.random.default_rng(3)
    table = np.column_stack([rng.uniform(-1, 1, 500), rng.uniform(-1, 1, 500), np.zeros(500)])
    plant = rng.uniform(0, 1, size=(100, 3)) * [0.1, 0.1, 1] + [0, 0, 0.1]
    cloud = PointCloud(np.vstack([table, plant]))
    plane = segment_plane(cloud, 0.01, 200, seed=0)
    out, tf = align_to_plane(cloud, plane)
    np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(tf.translation, 0, atol=1e-9)
    assert out.frame == Frame.ALIGNED


def test_align_plane_below_is_translation():
    rng = np.random.default_rng(4)
    table = np.column_stack([rng.uniform(-1, 1, 500), rng.uniform(-1, 1, 500), np.full(500, -2.0)])
    plant = rng.uniform(0, 1, size=(100, 3)) + [0, 0, -1.5]
    cloud = PointCloud(np.vstack([table, plant]))
    _, tf = align_to_plane(cloud, segment_plane(cloud, 0.01, 200, seed=0))
    np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(tf.translation, [0, 0, 2], atol=1e-9)


def test_align_flips_when_plant_below():
    rng = np.random.default_rng(5)
    table = np.column_stack([rng.uniform(-1, 1, 500), rng.uniform(-1, 1, 500), np.zeros(500)])
    plant = rng.uniform(0, 1, size=(100, 3)) * [0.1, 0.1, -1] - [0, 0, 0.1]
    out, _ = align_to_plane(PointCloud(np.vstack([table, plant])), segment_plane(PointCloud(np.vstack([table, plant])), 0.01, 200))
    assert out.positions[500:, 2].min() > 0


def test_align_tilted_scene():
    cloud, truth = gen_scene([two_leaf_spec(3)], SceneSpec(tilt_deg=30, tilt_azimuth_deg=0, seed=5))
    plane = segment_plane(cloud, 0.002, 500, seed=0)
    out, tf = align_to_plane(cloud, plane)
    z_in = out.positions[plane.inliers, 2]
    assert np.sqrt(np.mean(z_in**2)) <= 0.002
    assert out.positions[truth.plant_mask(), 2].mean() > 0
    np.testing.assert_allclose(tf.rotation @ plane.normal, [0, 0, 1], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_transform_is_rigid(seed):
    rng = np.random.default_rng(seed)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    pts = rng.normal(size=(60, 3))
    plane = Plane(np.append(n, rng.normal()), np.arange(10), 0.01)
    out, tf = align_to_plane(PointCloud(pts), plane)
    np.testing.assert_allclose(tf.rotation.T @ tf.rotation, np.eye(3), atol=1e-9)
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    d1 = np.linalg.norm(out.positions[:, None] - out.positions[None], axis=2)
    np.testing.assert_allclose(d1, d0, rtol=1e-6, atol=1e-12)


def test_rotation_between_antiparallel():
    r = rotation_between(np.array([0, 0, -1.0]), np.array([0, 0, 1.0]))
    np.testing.assert_allclose(r @ [0, 0, -1.0], [0, 0, 1], atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_transform_composition():
    rng = np.random.default_rng(0)
    a = RigidTransform(rotation_between(np.array([1.0, 0, 0]), np.array([0, 1.0, 0])), rng.normal(size=3))
    b = RigidTransform(rotation_between(np.array([0, 0, 1.0]), np.array([1.0, 1, 1])), rng.normal(size=3))
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(a.then(b).apply(p), b.apply(a.apply(p)), atol=1e-12)


def annulus(rng, radius, n, sigma):
    phi = rng.uniform(0, 2 * np.pi, n)
    r = radius + rng.normal(scale=sigma, size=n)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), rng.normal(scale=0.001, size=n)])


def test_ring_annulus_with_plant():
    rng = np.random.default_rng(0)
    ring = annulus(rng, 0.5, 3000, 0.005)
    plant = rng.uniform(-0.05, 0.05, size=(500, 3)) + [0, 0, 0.2]
    inner = annulus(rng, 0.1, 200, 0.01)
    cloud = PointCloud(np.vstack([ring, inner, plant]))
    idx, peak = segment_ring(cloud, 100, -0.01, 0.01, 0.02)
    r = np.hypot(ring[:, 0], ring[:, 1])
    z_ok = np.abs(ring[:, 2]) < 0.01
    width = (r[z_ok].max() - np.hypot(inner[:, 0], inner[:, 1])[np.abs(inner[:, 2]) < 0.01].min()) / 100
    assert abs(peak - 0.5) <= width / 2 + 1e-12
    assert np.isin(np.arange(3000), idx).mean() >= 0.99


def test_ring_denser_wins():
    rng = np.random.default_rng(1)
    cloud = PointCloud(np.vstack([annulus(rng, 0.3, 200, 0.002), annulus(rng, 0.5, 2000, 0.002)]))
    _, peak = segment_ring(cloud, 50, -0.01, 0.01, 0.01)
    assert abs(peak - 0.5) < 0.01


def test_ring_tie_goes_to_lower_bin():
    # radii 1 and 3 fill the first and last bins of [1, 3] with two bins
    pts = np.array([[1.0, 0, 0], [0, 1.0, 0], [3.0, 0, 0], [0, 3.0, 0]])
    _, peak = segment_ring(PointCloud(pts), 2, -1, 1, 0.1)
    assert peak == pytest.approx(1.5)


def test_ring_band_is_strict_and_errors():
    pts = np.array([[1.0, 0, 0.5], [2.0, 0, -0.5]])
    with pytest.raises(EmptyBand):
        segment_ring(PointCloud(pts), 10, -0.5, 0.5, 0.1)
    with pytest.raises(InvalidArgument):
        segment_ring(PointCloud(pts), 1, -1, 1, 0.1)


def test_scale_calibration():
    cal = ScaleCalibration(0.5, 0.199)
    assert cal.scale_factor == pytest.approx(0.398)
    cloud = PointCloud(np.array([[1.0, 0, 0]]), frame=Frame.ALIGNED)
    np.testing.assert_allclose(apply_scale(cloud, cal).positions, [[0.398, 0, 0]])
    same = apply_scale(cloud, ScaleCalibration(0.199, 0.199))
    np.testing.assert_array_equal(same.positions, cloud.positions)
    assert same.frame == Frame.SCALED
    with pytest.raises(InvalidArgument):
        ScaleCalibration(0.0)
    with pytest.raises(InvalidArgument):
        apply_scale(PointCloud(np.zeros((1, 3))), cal)


def test_scale_height_linear_volume_cubic():
    from phenocloud.traits import convex_hull_volume, height

    pts = np.random.default_rng(3).normal(size=(200, 3))
    cloud = PointCloud(pts, frame=Frame.ALIGNED)
    s = 0.37
    scaled = apply_scale(cloud, ScaleCalibration(1.0, s))
    assert height(scaled) == pytest.approx(s * height(cloud), rel=1e-12)
    assert convex_hull_volume(scaled) == pytest.approx(s**3 * convex_hull_volume(cloud), rel=1e-6)


BAND = ((10, 10, 90), (200, 200, 255))


def one_point(rgb):
    return PointCloud(np.zeros((1, 3)), colors=np.array([rgb], dtype=np.uint8))


def test_filter_all_mode_predicate():
    assert len(filter_color(one_point((0, 0, 255)), *BAND)) == 0
    assert len(filter_color(one_point((30, 200, 40)), *BAND)) == 0
    assert len(filter_color(one_point((5, 5, 5)), *BAND)) == 1


def test_filter_any_mode_predicate():
    assert len(filter_color(one_point((0, 0, 255)), *BAND, mode="any")) == 1
    assert len(filter_color(one_point((30, 100, 100)), *BAND, mode="any")) == 0
    with pytest.raises(InvalidArgument):
        filter_color(one_point((1, 1, 1)), *BAND, mode="some")
    with pytest.raises(InvalidArgument):
        filter_color(one_point((1, 1, 1)), (5, 5, 5), (4, 9, 9))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), mode=st.sampled_from(["all", "any"]))
def test_filter_subset_and_idempotent(seed, mode):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.normal(size=(300, 3)), colors=rng.integers(0, 256, size=(300, 3)).astype(np.uint8))
    lo = rng.integers(0, 128, 3)
    hi = lo + rng.integers(0, 128, 3)
    once = filter_color(cloud, lo, hi, mode)
    twice = filter_color(once, lo, hi, mode)
    assert once.positions.tobytes() == twice.positions.tobytes()
    kept = {tuple(p) for p in cloud.positions}
    assert all(tuple(p) in kept for p in once.positions)


def test_filter_blue_artifacts():
    cloud, truth = gen_scene([two_leaf_spec(4)], SceneSpec(blue_fraction=0.05, seed=4))
    art = truth.source == ARTIFACT
    plant = truth.plant_mask()
    marker = np.arange(len(cloud), dtype=np.int32)
    tagged = cloud.with_labels(marker)
    out = filter_color(tagged, (0, 0, 140), (90, 110, 255), mode="any")
    kept = np.zeros(len(cloud), bool)
    kept[out.labels] = True
    assert (~kept[art]).mean() >= 0.95
    assert (~kept[plant]).mean() <= 0.01


def test_crop_cylinder():
    plant = np.array([[0.0, 0, 0.2], [0.05, 0, 0.15]])
    out = crop_cylinder(PointCloud(plant), 0.06, 0.005, 0.1)
    assert len(out) == 2
    table = np.column_stack([np.linspace(-0.2, 0.2, 9), np.zeros(9), np.zeros(9)])
    assert len(crop_cylinder(PointCloud(table), None, 0.001)) == 0
    assert len(crop_cylinder(PointCloud(np.zeros((0, 3))), 0.1, 0.0, 0.1)) == 0


def test_crop_synth_scene_matches_plant_subset():
    cloud, truth = gen_scene([two_leaf_spec(6)], SceneSpec(seed=6, offset_range=0.0))
    tagged = cloud.with_labels(np.arange(len(cloud), dtype=np.int32))
    out = crop_cylinder(tagged, truth.pot_radius + 0.005, 0.005, truth.pot_height)
    n_plant = truth.plant_mask().sum()
    assert abs(len(out) - n_plant) <= 0.005 * n_plant
    assert truth.plant_mask()[out.labels].mean() > 0.995


def scene(seed, **kw):
    rng = np.random.default_rng(seed)
    params = dict(
        tilt_deg=float(rng.uniform(0, 30)),
        tilt_azimuth_deg=float(rng.uniform(0, 360)),
        raw_scale=float(rng.uniform(0.2, 2.0)),
        seed=seed,
    )
    params.update(kw)
    return gen_scene([two_leaf_spec(seed)], SceneSpec(**params))


def test_pipeline_tilt0_scale1_identity():
    cloud, truth = scene(0, tilt_deg=0.0, raw_scale=1.0, offset_range=0.0)
    res = align_cloud(cloud, AlignConfig(seed=0, pot_radius=0.065, pot_top=0.1))
    np.testing.assert_allclose(res.transform.rotation, np.eye(3), atol=1e-3)
    assert res.calibration.scale_factor == pytest.approx(1.0, rel=0.01)


def test_pipeline_recovers_height():
    cloud, truth = scene(11, raw_scale=1 / 0.398)
    res = align_cloud(cloud, AlignConfig(seed=0, pot_radius=0.065, pot_top=0.1))
    h = np.ptp(res.cloud.positions[:, 2])
    assert h == pytest.approx(truth.plants[0].height, rel=0.01)
    assert res.cloud.frame == Frame.SCALED


def test_realigned_plane_is_horizontal():
    cloud, _ = scene(12)
    cfg = AlignConfig(seed=0)
    res = align_cloud(cloud, cfg)
    # rebuild the full scaled scene to re-run the plane fit
    full = res.transform.apply(cloud.positions) * res.calibration.scale_factor
    thr = res.plane.distance_threshold * res.calibration.scale_factor
    again = segment_plane(PointCloud(full), thr, 300, seed=1)
    assert np.degrees(np.arccos(again.normal[2])) < 0.1
    assert abs(again.d) <= thr


def test_sidecar_keys():
    cloud, _ = scene(13)
    res = align_cloud(cloud, AlignConfig(seed=0))
    side = res.sidecar()
    assert {"plane", "transform", "scale_factor"} <= side.keys()
    assert len(side["plane"]) == 4


def test_runtime_100k_points():
    cloud, truth = scene(14, table_points=72_000, rim_points=20_000, pot_points=7_000)
    assert len(cloud) >= 100_000
    t0 = time.perf_counter()
    plane = segment_plane(cloud, 0.002 * cloud.bbox_diagonal(), 1000, seed=0)
    align_to_plane(cloud, plane)
    assert time.perf_counter() - t0 < 1.0
