import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from oracles import brute_force_assignment, brute_force_min_path
from phenocloud.cloud import PointCloud
from phenocloud.errors import AngleUndefined, InvalidArgument, NoDagOrder
from phenocloud.stemgraph import (
    ClusterNode,
    NodeLabel,
    SliceGraph,
    StemDag,
    StemGraphParams,
    angle_between,
    bridge_components,
    build_graph,
    build_stem_dag,
    cluster_slice,
    cluster_slices,
    dbscan,
    edge_cost,
    extract_stem,
    fit_direction,
    junction_angles,
    match_bipartite,
    match_trunk_axis,
    measure_leaf_angles,
    principal_axis,
    refine_labels,
    select_adjacency,
    slice_cloud,
)
from phenocloud.synth import LeafSpec, PlantSpec, gen_plant, two_leaf_spec

UP = np.array([0.0, 0.0, 1.0])


def nodes_at(points, slice_index=0):
    return [ClusterNode(slice_index, np.asarray(p, dtype=float), np.array([i])) for i, p in enumerate(points)]


def graph_of(points, edges):
    g = SliceGraph(nodes_at(points), {}, UP.copy())
    for u, v in edges:
        g.add_edge(u, v)
    return g


# slicing

def test_slice_uniform_column():
    z = np.linspace(0, 1, 401)
    slices = slice_cloud(PointCloud(np.column_stack([np.zeros_like(z), np.zeros_like(z), z])), 4)
    sizes = [len(s.members) for s in slices]
    assert max(sizes) - min(sizes) <= 1
    assert 400 in slices[3].members
    assert slices[0].z_lo == 0 and slices[3].z_hi == pytest.approx(1.0)


def test_slice_rejects_too_few():
    with pytest.raises(InvalidArgument):
        slice_cloud(PointCloud(np.zeros((3, 3))), 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 40))
def test_slices_partition_the_cloud(seed, n):
    pts = np.random.default_rng(seed).normal(size=(300, 3))
    slices = slice_cloud(PointCloud(pts), n)
    allm = np.concatenate([s.members for s in slices])
    assert len(allm) == 300 and len(np.unique(allm)) == 300
    for s in slices:
        z = pts[s.members, 2]
        assert np.all(z >= s.z_lo - 1e-12)
        if s.index < n - 1:
            assert np.all(z < s.z_hi)


# clustering

def blob(rng, centre, n, spread):
    return np.asarray(centre) + rng.uniform(-spread, spread, size=(n, 3))


def test_two_blobs_two_clusters():
    rng = np.random.default_rng(0)
    eps = 0.01
    a, b = blob(rng, [0, 0, 0], 30, eps / 4), blob(rng, [10 * eps, 0, 0], 30, eps / 4)
    pts = np.vstack([a, b])
    nodes = cluster_slice(pts, np.arange(60), eps, 5)
    assert len(nodes) == 2
    np.testing.assert_allclose(nodes[0].centroid, a.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(nodes[1].centroid, b.mean(axis=0), atol=1e-12)
    np.testing.assert_array_equal(nodes[1].members, np.arange(30, 60))


def test_single_blob_and_lone_point():
    rng = np.random.default_rng(1)
    assert len(cluster_slice(blob(rng, [0, 0, 0], 40, 0.01), np.arange(40), 0.01, 5)) == 1
    assert cluster_slice(np.zeros((1, 3)), [7], 0.01, 4) == []
    assert cluster_slice(np.zeros((0, 3)), [], 0.01, 4) == []


def test_dbscan_rejects_bad_parameters():
    with pytest.raises(InvalidArgument):
        dbscan(np.zeros((3, 3)), 0.0, 3)
    with pytest.raises(InvalidArgument):
        dbscan(np.zeros((3, 3)), 1.0, 0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.floats(0.1, 0.6), min_pts=st.integers(1, 6))
def test_dbscan_core_points_follow_connectivity(seed, eps, min_pts):
    pts = np.random.default_rng(seed).uniform(0, 3, size=(120, 3))
    labels = dbscan(pts, eps, min_pts)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    near = d <= eps
    core = near.sum(axis=1) >= min_pts
    ci = np.flatnonzero(core)
    _, comp = connected_components(csr_matrix(near[np.ix_(ci, ci)]), directed=False)
    # core points share a label exactly when they are eps-connected through cores
    same_label = labels[ci][:, None] == labels[ci][None]
    same_comp = comp[:, None] == comp[None]
    assert np.array_equal(same_label, same_comp)
    # border points join some neighbouring core cluster; the rest is noise
    for p in np.flatnonzero(~core):
        hood = np.flatnonzero(near[p] & core)
        if len(hood):
            assert labels[p] in set(labels[hood])
        else:
            assert labels[p] == -1


# matching

def test_bipartite_identity_and_forced_pairs():
    pts = np.random.default_rng(2).normal(size=(5, 3))
    assert match_bipartite(nodes_at(pts), nodes_at(pts), 10.0) == [(i, i) for i in range(5)]
    # centroid distances [[1, 10], [10, 1]]
    a = nodes_at([[0, 0, 0], [11, 0, 0]])
    b = nodes_at([[1, 0, 0], [10, 0, 0]])
    assert match_bipartite(a, b, 100.0) == [(0, 0), (1, 1)]


def test_bipartite_drops_long_pairs_and_handles_rectangles():
    a = nodes_at([[0, 0, 0], [5, 0, 0], [9, 0, 0]])
    b = nodes_at([[0.1, 0, 0], [8.9, 0, 0]])
    assert match_bipartite(a, b, 1.0) == [(0, 0), (2, 1)]
    assert match_bipartite(a, [], 1.0) == []


@pytest.mark.parametrize("seed", range(20))
def test_bipartite_equals_permutation_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    pairs = match_bipartite(nodes_at(a), nodes_at(b), np.inf)
    cost = np.linalg.norm(a[:, None] - b[None], axis=2)
    best, _ = brute_force_assignment(cost)
    assert len(pairs) == 6
    assert sum(cost[i, j] for i, j in pairs) == pytest.approx(best, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_trunk_beta_zero_is_mutual_nearest_in_xy(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(5, 3)) + [0, 0, 1]
    got = match_trunk_axis(nodes_at(a), nodes_at(b), UP, beta=0.0)
    d = np.linalg.norm(a[:, None, :2] - b[None, :, :2], axis=2)
    want = [(i, int(np.argmin(d[i]))) for i in range(6) if np.argmin(d[:, np.argmin(d[i])]) == i]
    assert got == want


@pytest.mark.parametrize("beta", [0.0, 0.5, 1.0, 10.0])
def test_trunk_prefers_vertical_partner(beta):
    xy = np.array([[0, 0], [0.3, 0.1], [-0.2, 0.4]])
    lower = np.column_stack([xy, np.zeros(3)])
    upper = np.column_stack([xy[::-1], np.ones(3)])
    assert sorted(match_trunk_axis(nodes_at(lower), nodes_at(upper), UP, beta)) == [(0, 2), (1, 1), (2, 0)]


def test_tilted_stem_chain_recovered_by_trunk_matching():
    cloud, _ = gen_plant(PlantSpec(stem_tilt_deg=15.0, seed=1))
    params = StemGraphParams()
    per_slice, thickness = cluster_slices(cloud, params)
    assert all(len(c) == 1 for c in per_slice)
    axis = principal_axis(np.array([c[0].centroid for c in per_slice]))
    g = build_graph(per_slice, "trunk", 5 * thickness, beta=1.0, axis=axis)
    assert len(g.edges) == len(g.nodes) - 1
    assert g.components().max() == 0
    assert math.degrees(math.acos(axis @ UP)) == pytest.approx(15.0, abs=1.0)


# bridging

def test_bridge_connected_graph_unchanged():
    g = graph_of([[0, 0, i] for i in range(4)], [(0, 1), (1, 2), (2, 3)])
    out = bridge_components(g, 0.5)
    assert out.edges.keys() == g.edges.keys()
    assert not any(e.bridged for e in out.edges.values())


def test_bridge_gap_adds_one_edge_of_gap_length():
    pts = [[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 5.5], [0, 0, 6.5]]
    g = graph_of(pts, [(0, 1), (1, 2), (3, 4)])
    out = bridge_components(g, 1.0)
    bridged = [(k, e) for k, e in out.edges.items() if e.bridged]
    assert len(bridged) == 1
    assert bridged[0][0] == (2, 3) and bridged[0][1].length == pytest.approx(3.5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 8))
def test_bridge_adds_components_minus_one(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 10, size=(k * 3, 3))
    g = graph_of(pts, [(3 * c, 3 * c + 1) for c in range(k)] + [(3 * c + 1, 3 * c + 2) for c in range(k)])
    assert g.components().max() + 1 == k
    out = bridge_components(g, 0.01)
    assert sum(e.bridged for e in out.edges.values()) == k - 1
    assert out.components().max() == 0


def test_bridge_rejects_growth_at_most_one():
    with pytest.raises(InvalidArgument):
        bridge_components(graph_of([[0, 0, 0]], []), 1.0, growth=1.0)


# stem DAG

def test_edge_cost_vertical_pair_is_minus_gamma():
    assert edge_cost([0, 0, 1], [0, 0, 0], UP, 0, 0, (1, 1, 3, 2)) == pytest.approx(-3.0)


def test_edge_cost_diagonal_step():
    h = 0.25
    cost = edge_cost([h, 0, h], [0, 0, 0], UP, 1, 2, (1, 1, 1, 2))
    p_v = 1 - h / (h + h)
    assert p_v == 0.5
    assert cost == pytest.approx(-(h + math.pi / 4 + p_v + 2 * 3))


def test_dag_directs_edges_down_and_counts_branches():
    g = graph_of([[0, 0, 0], [0, 0, 1], [0, 0, 2], [1, 0, 1.5]], [(0, 1), (1, 2), (1, 3)])
    dag = build_stem_dag(g)
    assert set(dag.edges) == {(1, 0), (2, 1), (3, 1)}
    # node 1 has degree 3, so every edge touching it carries b = 1
    assert dag.edges[(2, 1)] == pytest.approx(edge_cost([0, 0, 2], [0, 0, 1], UP, 0, 1))
    assert dag.source == 2


def test_dag_flat_graph_raises():
    g = graph_of([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [(0, 1), (1, 2)])
    with pytest.raises(NoDagOrder):
        build_stem_dag(g)


def test_extract_stem_chain_and_diamond():
    chain = StemDag(np.array([3.0, 2.0, 1.0, 0.0]), {(0, 1): -1.0, (1, 2): -1.0, (2, 3): -1.0})
    assert extract_stem(chain) == ([0, 1, 2, 3], -3.0)
    diamond = StemDag(np.array([3.0, 2.0, 2.0, 0.0]), {(0, 1): -1.0, (0, 2): -5.0, (1, 3): -1.0, (2, 3): -1.0})
    assert extract_stem(diamond) == ([0, 2, 3], -6.0)


def random_dag(rng, n):
    z = rng.permutation(n).astype(float)
    edges = {}
    for u in range(n):
        for v in range(n):
            if z[u] > z[v] and rng.uniform() < 0.35:
                edges[(u, v)] = float(rng.normal(-0.5, 1.0))
    return StemDag(z, edges)


@pytest.mark.parametrize("seed", range(60))
def test_extract_stem_equals_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 13))
    dag = random_dag(rng, n)
    path, cost = extract_stem(dag)
    want_cost, want_path = brute_force_min_path(n, list(dag.edges), dag.edges, dag.source)
    assert cost == pytest.approx(want_cost, abs=1e-9)
    assert path == want_path
    z = dag.z[path]
    assert np.all(np.diff(z) < 0)


def test_select_adjacency_ties_go_to_bipartite():
    g = graph_of([[0, 0, i] for i in range(5)], [(i, i + 1) for i in range(4)])
    g2 = g.copy()
    g2.method = "trunk"
    g.method = "bipartite"
    chosen, path, costs = select_adjacency(g, g2)
    assert chosen is g and costs["bipartite"] == costs["trunk"]
    assert path == [4, 3, 2, 1, 0]


def test_select_adjacency_picks_cheaper_graph():
    pts = [[0, 0, i] for i in range(5)]
    short = graph_of(pts, [(2, 3), (3, 4)])
    full = graph_of(pts, [(i, i + 1) for i in range(4)])
    chosen, path, costs = select_adjacency(short, full)
    assert chosen is full and costs["trunk"] < costs["bipartite"]


# label refinement

def y_graph():
    stem = [[0, 0, z] for z in range(6)]
    leaf = [[1, 0, 3], [2, 0, 4]]
    return graph_of(stem + leaf, [(i, i + 1) for i in range(5)] + [(2, 6), (6, 7)])


def test_refine_clean_y():
    g = y_graph()
    lab = refine_labels(g, [5, 4, 3, 2, 1, 0])
    assert lab.branch_nodes == [2]
    assert lab.labels[6] == lab.labels[7] == NodeLabel.LEAF
    assert all(lab.labels[i] == NodeLabel.STEM for i in range(6))
    assert g.nodes[2].branch_count == 1 and g.nodes[3].branch_count == 0


def test_refine_demotes_duplicate_junction():
    stem = [[0, 0, z] for z in range(6)]
    leaf = [[0.6, 0, 3.2], [1.5, 0, 4]]
    g = graph_of(stem + leaf, [(i, i + 1) for i in range(5)] + [(2, 6), (3, 6), (6, 7)])
    lab = refine_labels(g, [5, 4, 3, 2, 1, 0])
    # node 3 is nearer to the shared leaf node 6 and stays
    assert lab.branch_nodes == [3] and lab.demoted == [2]
    assert lab.labels[2] == NodeLabel.STEM


def test_refine_majority_relabel_and_outlier():
    # the junction has 2 stem neighbours but only 1 leaf: with min 2 it keeps the majority label
    lab = refine_labels(y_graph(), [5, 4, 3, 2, 1, 0], min_neighbors=2)
    assert lab.branch_nodes == [] and lab.labels[2] == NodeLabel.STEM
    # an off-path branch node whose neighbours are all leaves stays a leaf
    pts = [[0, 0, 0], [0, 0, 1], [1, 0, 1], [2, 0, 2], [2, 0, 0], [3, 0, 1], [9, 9, 9]]
    lab = refine_labels(graph_of(pts, [(0, 1), (2, 3), (2, 4), (2, 5)]), [1, 0])
    assert lab.branch_nodes == [] and lab.labels[2] == NodeLabel.LEAF
    assert lab.labels[6] == NodeLabel.OUTLIER


def test_refine_requires_path():
    with pytest.raises(InvalidArgument):
        refine_labels(y_graph(), [])


# angles

def test_angle_examples():
    assert angle_between([0, 0, 1], [0, 0, 2]) == pytest.approx(0.0, abs=1e-6)
    assert angle_between([0, 0, 1], [1, 0, 0]) == pytest.approx(90.0, abs=1e-6)
    assert angle_between([0, 0, 1], [0, 0, -1]) == pytest.approx(180.0)
    with pytest.raises(AngleUndefined):
        angle_between([0, 0, 0], [1, 0, 0])


vec = st.tuples(*[st.floats(-10, 10)] * 3).filter(lambda v: np.linalg.norm(v) > 1e-3)


@settings(max_examples=60, deadline=None)
@given(a=vec, b=vec, s=st.floats(0.01, 100))
def test_angle_symmetric_and_scale_free(a, b, s):
    a, b = np.array(a), np.array(b)
    ang = angle_between(a, b)
    assert 0 <= ang <= 180
    assert angle_between(b, a) == ang
    # compare cosines: arccos amplifies rounding near 0 and 180 degrees
    ua, ub = a / np.linalg.norm(a), b / np.linalg.norm(b)
    assert math.cos(math.radians(angle_between(s * a, b))) == pytest.approx(ua @ ub, abs=1e-12)
    assert math.cos(math.radians(ang)) == pytest.approx(ua @ ub, abs=1e-12)


def test_fit_direction_needs_two_distinct_points():
    with pytest.raises(AngleUndefined):
        fit_direction(np.zeros((1, 3)))
    with pytest.raises(AngleUndefined):
        fit_direction(np.zeros((4, 3)))
    d = fit_direction([[0, 0, 0], [1, 1, 0], [2, 2, 0]])
    assert abs(d @ np.array([1, 1, 0]) / math.sqrt(2)) == pytest.approx(1.0)


def angle_graph(theta_deg, arm_nodes=5):
    stem = [[0, 0, z] for z in range(11)]
    t = math.radians(theta_deg)
    leaf = [[k * math.sin(t), 0, 5 + k * math.cos(t)] for k in range(1, arm_nodes + 1)]
    edges = [(i, i + 1) for i in range(10)] + [(5, 11)] + [(11 + k, 12 + k) for k in range(arm_nodes - 1)]
    g = graph_of(stem + leaf, edges)
    return refine_labels(g, list(range(10, -1, -1)))


@pytest.mark.parametrize("theta", [30.0, 90.0, 135.0])
def test_junction_angle_on_constructed_graph(theta):
    angles, undefined = junction_angles(angle_graph(theta))
    assert undefined == [] and len(angles) == 1
    a = angles[0]
    assert a.branch_node == 5 and a.angle_deg == pytest.approx(theta, abs=1e-6)
    assert a.angle_deg == pytest.approx(math.degrees(math.acos(np.clip(a.v_stem @ a.v_leaf, -1, 1))), abs=1e-9)
    assert not a.low_confidence


def test_short_arm_is_low_confidence_or_undefined():
    angles, _ = junction_angles(angle_graph(60.0, arm_nodes=3))
    assert angles[0].low_confidence and angles[0].leaf_window == 3
    angles, undefined = junction_angles(angle_graph(60.0, arm_nodes=1))
    assert angles == [] and undefined[0][:2] == (5, 11)


def test_arm_along_the_stem_is_not_a_leaf():
    lab = angle_graph(179.0)
    angles, undefined = junction_angles(lab, fragment_radius=0.5)
    assert angles == [] and "along the stem" in undefined[0][2]
    assert len(junction_angles(lab)[0]) == 1


# full pipeline

def test_y_plant_45_degrees():
    cloud, truth = gen_plant(PlantSpec(leaves=(LeafSpec(0.45, 45.0, 0.12),), seed=3))
    res = measure_leaf_angles(cloud)
    assert res.junction_count == 1
    assert res.angles[0].angle_deg == pytest.approx(45.0, abs=2.0)
    assert res.angles[0].z == pytest.approx(truth.attach_points[0][2], abs=0.02)


def test_y_plant_branch_costs_dominate_with_large_delta():
    cloud, _ = gen_plant(PlantSpec(leaves=(LeafSpec(0.45, 45.0, 0.12),), seed=3))
    light = measure_leaf_angles(cloud, StemGraphParams(weights=(1, 1, 1, 0)))
    heavy = measure_leaf_angles(cloud, StemGraphParams(weights=(1, 1, 1, 50)))
    junction = heavy.labeled.branch_nodes[0]
    branch_edges = [c for (u, v), c in heavy.edge_costs.items() if junction in (u, v)]
    assert len(branch_edges) == 3 and all(c < -50 for c in branch_edges)
    # the stem path enters and leaves the junction: two edges with b = 1 each
    assert min(heavy.path_costs.values()) == pytest.approx(min(light.path_costs.values()) - 2 * 50)


@pytest.mark.parametrize("seed", [0, 7, 19])
def test_two_leaf_plants(seed):
    cloud, truth = gen_plant(two_leaf_spec(seed))
    res = measure_leaf_angles(cloud)
    assert res.junction_count == 2
    est = sorted(res.angles, key=lambda a: a.z)
    order = np.argsort([p[2] for p in truth.attach_points])
    for a, k in zip(est, order):
        assert a.angle_deg == pytest.approx(truth.leaf_angles[k], abs=5.0)


def test_outputs_are_deterministic_and_serialisable():
    cloud, _ = gen_plant(two_leaf_spec(4))
    a, b = measure_leaf_angles(cloud), measure_leaf_angles(cloud)
    assert a.rows("p") == b.rows("p")
    data = json.loads(a.graph_json())
    assert data["method"] in ("bipartite", "trunk")
    assert {"u", "v", "length", "cost", "bridged"} <= set(data["edges"][0])
    assert len(data["nodes"]) == len(a.labeled.graph.nodes)
    rows = a.rows("p")
    assert [r["z"] for r in rows] == sorted((r["z"] for r in rows), reverse=True)
