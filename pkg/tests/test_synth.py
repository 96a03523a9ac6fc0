import numpy as np
import pytest

from phenocloud.errors import InvalidArgument
from phenocloud.synth import (
    ARTIFACT,
    POT,
    RIM,
    TABLE,
    LeafSpec,
    PlantSpec,
    SceneSpec,
    gen_plant,
    gen_scene,
    leaf_direction,
    save_truth,
    seedling_pot,
    two_leaf_spec,
)


def test_leafless_vertical_column():
    cloud, truth = gen_plant(PlantSpec(stem_height=0.3, noise=0.0005, seed=1))
    assert truth.design_height == pytest.approx(0.3)
    assert abs(truth.height - 0.3) < 0.005
    assert truth.radius < 0.003
    assert cloud.positions[:, 2].min() >= 0.0


def test_leaf_angle_is_exact_by_construction():
    _, truth = gen_plant(PlantSpec(leaves=(LeafSpec(0.5, 45.0, 0.1),), seed=0))
    assert truth.leaf_angles == [45.0]
    d = leaf_direction(np.array([0.0, 0, 1]), 45.0, 0.0)
    assert np.degrees(np.arccos(d[2])) == pytest.approx(45.0)
    np.testing.assert_allclose(leaf_direction(np.array([0.0, 0, 1]), 90.0, 0.0), [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(leaf_direction(np.array([0.0, 0, 1]), 90.0, 90.0), [0, 1, 0], atol=1e-12)


def test_leaf_direction_on_tilted_stem():
    s = np.array([np.sin(0.3), 0.0, np.cos(0.3)])
    for ang in (20.0, 75.0, 130.0):
        for az in (0.0, 111.0, 250.0):
            d = leaf_direction(s, ang, az)
            assert np.degrees(np.arccos(d @ s)) == pytest.approx(ang)


def test_plant_is_deterministic():
    a, _ = gen_plant(two_leaf_spec(5))
    b, _ = gen_plant(two_leaf_spec(5))
    assert a.positions.tobytes() == b.positions.tobytes()
    assert a.colors.tobytes() == b.colors.tobytes()


def test_scene_is_deterministic():
    sc = SceneSpec(tilt_deg=12, raw_scale=0.5, blue_fraction=0.05, seed=4)
    a, ta = gen_scene([two_leaf_spec(1)], sc)
    b, tb = gen_scene([two_leaf_spec(1)], sc)
    assert a.positions.tobytes() == b.positions.tobytes()
    np.testing.assert_array_equal(ta.source, tb.source)


def test_every_point_has_one_source():
    cloud, truth = gen_scene([two_leaf_spec(2)], SceneSpec(blue_fraction=0.05, seed=1))
    assert len(truth.source) == len(cloud)
    assert set(np.unique(truth.source)) == {0, POT, TABLE, RIM, ARTIFACT}


def test_untilted_unscaled_table_at_offset():
    cloud, truth = gen_scene([two_leaf_spec(2)], SceneSpec(seed=3))
    table = cloud.positions[truth.source == TABLE]
    np.testing.assert_allclose(truth.table_normal_raw, [0, 0, 1])
    assert abs(np.mean(table @ truth.table_normal_raw + truth.table_d_raw)) < 1e-4


def test_tilted_scaled_plane_truth():
    sc = SceneSpec(tilt_deg=25, tilt_azimuth_deg=40, raw_scale=0.4, seed=9)
    cloud, truth = gen_scene([two_leaf_spec(2)], sc)
    table = cloud.positions[truth.source == TABLE]
    dist = table @ truth.table_normal_raw + truth.table_d_raw
    # jitter is 0.5 mm metric, i.e. 1.25 mm raw at this scale
    assert np.abs(dist).max() < 6 * 0.0005 / 0.4
    assert np.degrees(np.arccos(truth.table_normal_raw[2])) == pytest.approx(25)


def test_two_leaf_spec_domain():
    for seed in range(30):
        spec = two_leaf_spec(seed)
        assert 0.25 <= spec.stem_height <= 0.35
        assert len(spec.leaves) == 2
        for leaf in spec.leaves:
            assert 20 <= leaf.angle_deg <= 120
            tip_z = spec.stem_height * leaf.attach_fraction + leaf.length * np.cos(np.radians(leaf.angle_deg))
            assert 0.1 * spec.stem_height - 1e-12 <= tip_z <= 0.9 * spec.stem_height + 1e-12


def test_seedling_spacing():
    for n in (2, 3):
        specs = seedling_pot(7, n, spacing=0.03)
        xy = np.array([o for _, o in specs])
        d = np.linalg.norm(xy[:, None] - xy[None], axis=2)
        assert d[np.triu_indices(n, 1)].min() >= 0.03 - 1e-12


def test_spec_validation_and_round_trip():
    with pytest.raises(InvalidArgument):
        PlantSpec(leaves=((1.2, 40, 0.1),))
    with pytest.raises(InvalidArgument):
        PlantSpec(stem_height=0)
    spec = two_leaf_spec(3)
    assert PlantSpec.from_dict(spec.to_dict()) == spec


def test_save_truth(tmp_path):
    import json

    _, truth = gen_scene([two_leaf_spec(1)], SceneSpec(seed=1))
    save_truth(truth, tmp_path / "t.json")
    data = json.loads((tmp_path / "t.json").read_text())
    assert data["plants"][0]["leaf_angles"] == truth.plants[0].leaf_angles
