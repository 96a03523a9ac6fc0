"""Leaf angles from a slice graph of cluster centroids.

The plant is cut into horizontal slices and each slice is clustered with
DBSCAN. Cluster centroids in neighbouring slices are linked, separate pieces
are bridged into one tree-like graph, and the stem is the minimum-cost
top-down path through a DAG whose edge costs reward vertical,
axis-aligned steps through branch points. Branch nodes on that path are
junctions; the angle at a junction is measured between line fits through
the stem centroids above it and the leaf centroids leading away from it.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cloud import PointCloud
from .errors import AngleUndefined, EmptyCloud, InvalidArgument, NoDagOrder
from .spatial import SpatialIndex

log = logging.getLogger(__name__)

DEFAULT_SLICES = 80
DEFAULT_MIN_PTS = 5
DEFAULT_WEIGHTS = (1.0, 1.0, 1.0, 2.0)  # alpha, beta, gamma, delta


class NodeLabel(str, Enum):
    STEM = "stem"
    LEAF = "leaf"
    OUTLIER = "outlier"
    UNASSIGNED = "unassigned"


@dataclass(frozen=True)
class Slice:
    index: int
    z_lo: float
    z_hi: float
    members: np.ndarray  # point ids, ascending


@dataclass
class ClusterNode:
    slice_index: int
    centroid: np.ndarray
    members: np.ndarray
    degree: int = 0
    branch_count: int = 0
    label: NodeLabel = NodeLabel.UNASSIGNED


@dataclass
class Edge:
    length: float
    bridged: bool = False


@dataclass
class SliceGraph:
    nodes: list
    edges: dict  # (u, v) with u < v -> Edge
    axis: np.ndarray
    method: str = ""

    @property
    def centroids(self) -> np.ndarray:
        return np.array([n.centroid for n in self.nodes]).reshape(-1, 3)

    def add_edge(self, u: int, v: int, bridged: bool = False) -> None:
        if u == v:
            return
        key = (min(u, v), max(u, v))
        if key not in self.edges:
            c = self.centroids
            self.edges[key] = Edge(float(np.linalg.norm(c[u] - c[v])), bridged)

    def neighbors(self) -> list:
        adj = [[] for _ in self.nodes]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        for a in adj:
            a.sort()
        return adj

    def degrees(self) -> np.ndarray:
        deg = np.zeros(len(self.nodes), dtype=int)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def components(self) -> np.ndarray:
        comp = np.full(len(self.nodes), -1, dtype=int)
        adj = self.neighbors()
        c = 0
        for start in range(len(self.nodes)):
            if comp[start] >= 0:
                continue
            comp[start] = c
            queue = deque([start])
            while queue:
                u = queue.popleft()
                for v in adj[u]:
                    if comp[v] < 0:
                        comp[v] = c
                        queue.append(v)
            c += 1
        return comp

    def copy(self) -> "SliceGraph":
        return SliceGraph(list(self.nodes), dict(self.edges), self.axis.copy(), self.method)

    def refresh_degrees(self) -> None:
        for node, d in zip(self.nodes, self.degrees()):
            node.degree = int(d)
            node.branch_count = max(0, int(d) - 2)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "axis": [float(a) for a in self.axis],
            "nodes": [
                {
                    "id": i,
                    "slice": n.slice_index,
                    "centroid": [float(x) for x in n.centroid],
                    "size": int(len(n.members)),
                    "label": n.label.value,
                }
                for i, n in enumerate(self.nodes)
            ],
            "edges": [
                {"u": u, "v": v, "length": e.length, "bridged": e.bridged}
                for (u, v), e in sorted(self.edges.items())
            ],
        }


def slice_cloud(cloud: PointCloud, n: int = DEFAULT_SLICES) -> list:
    """Cut the cloud into ``n`` equal-thickness horizontal slices.

    Slice ``i`` holds ``z_lo <= z < z_hi``; the topmost slice also holds
    ``z == z_max``.
    """
    if n < 2:
        raise InvalidArgument("need at least 2 slices")
    if cloud.is_empty:
        raise EmptyCloud("cannot slice an empty cloud")
    z = cloud.positions[:, 2]
    lo, hi = float(z.min()), float(z.max())
    thickness = (hi - lo) / n
    if thickness > 0:
        idx = np.minimum(np.floor((z - lo) / thickness).astype(np.int64), n - 1)
    else:
        idx = np.zeros(len(z), dtype=np.int64)
    order = np.argsort(idx, kind="stable")
    bounds = np.searchsorted(idx[order], np.arange(n + 1))
    return [
        Slice(i, lo + i * thickness, lo + (i + 1) * thickness, np.sort(order[bounds[i]:bounds[i + 1]]))
        for i in range(n)
    ]


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN labels (``-1`` = noise), visiting seeds in ascending index order.

    ``min_pts`` counts the point itself, and a point is a neighbour when its
    distance is ``<= eps``.
    """
    if eps <= 0 or min_pts < 1:
        raise InvalidArgument("eps must be > 0 and min_pts >= 1")
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    hoods = SpatialIndex(points).radius_many(points, eps)
    core = np.array([len(h) >= min_pts for h in hoods])
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for seed in range(n):
        if visited[seed] or not core[seed]:
            continue
        visited[seed] = True
        labels[seed] = cluster
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            for q in hoods[p]:
                if labels[q] < 0:
                    labels[q] = cluster
                if core[q] and not visited[q]:
                    visited[q] = True
                    queue.append(q)
        cluster += 1
    return labels


def default_eps(points: np.ndarray, factor: float = 1.5, k: int = 1) -> Optional[float]:
    """``factor`` times the median distance to the k-th nearest neighbour.

    Returns None when fewer than ``k + 1`` points exist or the spacing is 0.
    """
    if len(points) < k + 1:
        return None
    d, _ = SpatialIndex(points).query_many(points, k + 1)
    spacing = float(np.median(d[:, k]))
    return factor * spacing if spacing > 0 else None


def _pad(points: np.ndarray, dims: int) -> np.ndarray:
    """Positions with z zeroed when clustering in the horizontal plane only."""
    if dims == 3:
        return points
    out = points.copy()
    out[:, 2] = 0.0
    return out


def cluster_slice(points: np.ndarray, ids, eps: Optional[float], min_pts: int = DEFAULT_MIN_PTS,
                  slice_index: int = 0, planar: bool = False) -> list:
    """DBSCAN one slice and return a ClusterNode per cluster, in discovery order.

    Args:
        points: (m, 3) positions of the slice members.
        ids: the members' point ids in the full cloud.
        eps: neighbourhood radius; None uses :func:`default_eps`.
        planar: cluster on (x, y) only, so a slice is never split by height.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ids = np.asarray(ids)
    if len(pts) == 0:
        return []
    flat = _pad(pts, 2 if planar else 3)
    if eps is None:
        eps = default_eps(flat, k=min_pts - 1 if min_pts > 1 else 1)
        if eps is None:
            return [ClusterNode(slice_index, pts.mean(axis=0), ids.copy())] if len(pts) >= min_pts else []
    labels = dbscan(flat, eps, min_pts)
    nodes = []
    for c in range(labels.max() + 1):
        sel = labels == c
        nodes.append(ClusterNode(slice_index, pts[sel].mean(axis=0), ids[sel]))
    return nodes


def principal_axis(centroids: np.ndarray) -> np.ndarray:
    """Total-least-squares line direction through the centroids, pointing up."""
    c = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    if len(c) < 2:
        return np.array([0.0, 0.0, 1.0])
    q = c - c.mean(axis=0)
    _, s, vt = np.linalg.svd(q, full_matrices=False)
    if s[0] == 0:
        return np.array([0.0, 0.0, 1.0])
    axis = vt[0]
    return -axis if axis[2] < 0 else axis


def _axis_angle(upper: np.ndarray, lower: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Angle between the upward step ``upper - lower`` and the axis, in radians."""
    v = np.atleast_2d(upper - lower)
    norm = np.linalg.norm(v, axis=-1)
    cos = np.where(norm > 0, (v @ axis) / np.where(norm > 0, norm, 1.0), 1.0)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def match_bipartite(nodes_i, nodes_j, max_dist: float) -> list:
    """Minimum-total-distance one-to-one matching between two node lists.

    Pairs farther apart than ``max_dist`` are dropped after the assignment.

    Returns:
        list of (index into nodes_i, index into nodes_j)
    """
    if not nodes_i or not nodes_j:
        return []
    a = np.array([n.centroid for n in nodes_i])
    b = np.array([n.centroid for n in nodes_j])
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] <= max_dist]


def match_trunk_axis(nodes_i, nodes_j, axis, beta: float = 1.0, max_dist: Optional[float] = None) -> list:
    """Mutual-best matching under ``d_h + beta * theta_a``.

    ``nodes_i`` is the lower slice. Each node picks its cheapest partner
    (lowest index on ties); a pair is kept only when the choice is mutual.
    """
    if not nodes_i or not nodes_j:
        return []
    a = np.array([n.centroid for n in nodes_i])
    b = np.array([n.centroid for n in nodes_j])
    d_h = np.linalg.norm(a[:, None, :2] - b[None, :, :2], axis=2)
    diff = b[None, :, :] - a[:, None, :]
    norm = np.linalg.norm(diff, axis=2)
    cos = np.where(norm > 0, (diff @ np.asarray(axis)) / np.where(norm > 0, norm, 1.0), 1.0)
    theta = np.arccos(np.clip(cos, -1.0, 1.0))
    cost = d_h + beta * theta
    best_j = np.argmin(cost, axis=1)
    best_i = np.argmin(cost, axis=0)
    pairs = []
    for i, j in enumerate(best_j):
        if best_i[j] == i and (max_dist is None or norm[i, j] <= max_dist):
            pairs.append((i, int(j)))
    return pairs


def _flatten(clusters_per_slice):
    nodes, offsets = [], []
    for clusters in clusters_per_slice:
        offsets.append(len(nodes))
        nodes.extend(clusters)
    return nodes, offsets


def build_graph(clusters_per_slice, method: str, max_dist: float, beta: float = 1.0,
                axis: Optional[np.ndarray] = None) -> SliceGraph:
    """Link clusters of consecutive non-empty slices with the chosen matcher."""
    nodes, offsets = _flatten(clusters_per_slice)
    if axis is None:
        axis = principal_axis(np.array([n.centroid for n in nodes]).reshape(-1, 3))
    graph = SliceGraph(nodes, {}, np.asarray(axis, dtype=np.float64), method)
    for s in range(len(clusters_per_slice) - 1):
        lower, upper = clusters_per_slice[s], clusters_per_slice[s + 1]
        if method == "bipartite":
            pairs = match_bipartite(lower, upper, max_dist)
        elif method == "trunk":
            pairs = match_trunk_axis(lower, upper, graph.axis, beta, max_dist)
        else:
            raise InvalidArgument(f"unknown matching method {method!r}")
        for i, j in pairs:
            graph.add_edge(offsets[s] + i, offsets[s + 1] + j)
    return graph


def bridge_components(graph: SliceGraph, max_dist: float, growth: float = 1.5) -> SliceGraph:
    """Join components by repeatedly adding the cheapest inter-component edge.

    The distance threshold starts at ``max_dist`` and grows by ``growth``
    each round until the cheapest remaining link fits under it; exactly
    ``components - 1`` edges are added, each flagged as bridged.
    """
    if growth <= 1:
        raise InvalidArgument("growth factor must be > 1")
    out = graph.copy()
    n = len(out.nodes)
    if n == 0:
        return out
    c = out.centroids
    dist = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=2)
    comp = out.components()
    threshold = max(float(max_dist), 1e-300)
    while comp.max() > 0:
        cross = comp[:, None] != comp[None, :]
        masked = np.where(cross, dist, np.inf)
        flat = int(np.argmin(masked))
        u, v = divmod(flat, n)
        while masked[u, v] > threshold:
            threshold *= growth
        out.add_edge(u, v, bridged=True)
        comp[comp == comp[v]] = comp[u]
        _, comp = np.unique(comp, return_inverse=True)
    return out


@dataclass
class StemDag:
    z: np.ndarray
    edges: dict  # (u, v) with z[u] > z[v] -> cost

    @property
    def source(self) -> int:
        """Topmost node; the lowest id wins ties."""
        return int(np.lexsort((np.arange(len(self.z)), -self.z))[0])


def edge_cost(cu, cv, axis, bc_u: int, bc_v: int, weights=DEFAULT_WEIGHTS) -> float:
    """Cost of the downward step ``u -> v`` (``z_u > z_v``)."""
    alpha, beta, gamma, delta = weights
    cu = np.asarray(cu, dtype=np.float64)
    cv = np.asarray(cv, dtype=np.float64)
    d_h = float(np.hypot(cu[0] - cv[0], cu[1] - cv[1]))
    vertical = float(cu[2] - cv[2])
    theta = float(_axis_angle(cu, cv, axis)[0])
    p_v = 1.0 - d_h / (vertical + d_h) if vertical + d_h > 0 else 1.0
    b = bc_u + bc_v
    return -(alpha * d_h + beta * theta + gamma * p_v + delta * b)


def build_stem_dag(graph: SliceGraph, weights=DEFAULT_WEIGHTS) -> StemDag:
    """Direct every edge downward and attach its cost.

    Branch counts are ``max(0, degree - 2)``; edges between nodes at equal
    height are dropped.
    """
    c = graph.centroids
    z = c[:, 2].copy() if len(c) else np.zeros(0)
    if len(z) > 1 and np.all(z == z[0]):
        raise NoDagOrder("all centroids lie at the same height")
    bc = np.maximum(graph.degrees() - 2, 0)
    edges = {}
    for u, v in graph.edges:
        if z[u] == z[v]:
            continue
        hi, lo = (u, v) if z[u] > z[v] else (v, u)
        edges[(hi, lo)] = edge_cost(c[hi], c[lo], graph.axis, int(bc[hi]), int(bc[lo]), weights)
    return StemDag(z, edges)


def extract_stem(dag: StemDag):
    """Minimum-cost path from the topmost node, by DP in descending-z order.

    Returns:
        (path as a list of node ids from top to bottom, total cost)
    """
    n = len(dag.z)
    if n == 0:
        return [], 0.0
    order = np.lexsort((np.arange(n), -dag.z))
    out = [[] for _ in range(n)]
    for (u, v), w in dag.edges.items():
        out[u].append((v, w))
    src = dag.source
    best = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=np.int64)
    best[src] = 0.0
    for u in order:
        if not np.isfinite(best[u]):
            continue
        for v, w in sorted(out[u]):
            if best[u] + w < best[v]:
                best[v] = best[u] + w
                pred[v] = u
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    reachable = np.flatnonzero(np.isfinite(best))
    end = int(reachable[np.lexsort((rank[reachable], best[reachable]))[0]])
    path = [end]
    while pred[path[-1]] >= 0:
        path.append(int(pred[path[-1]]))
    return path[::-1], float(best[end])


def select_adjacency(graph_bipartite: SliceGraph, graph_trunk: SliceGraph, weights=DEFAULT_WEIGHTS):
    """Keep the graph whose stem path is cheaper; the bipartite graph wins ties.

    Returns:
        (graph, stem path, {"bipartite": cost, "trunk": cost})
    """
    pb, cb = extract_stem(build_stem_dag(graph_bipartite, weights))
    pt, ct = extract_stem(build_stem_dag(graph_trunk, weights))
    costs = {"bipartite": cb, "trunk": ct}
    if ct < cb:
        return graph_trunk, pt, costs
    return graph_bipartite, pb, costs


@dataclass
class LabeledGraph:
    graph: SliceGraph
    stem_path: list
    labels: list  # NodeLabel per node
    branch_nodes: list  # junctions on the stem path, top to bottom
    demoted: list = field(default_factory=list)


def _leaf_set(adj, labels, start_nodes, blocked):
    seen = set()
    queue = deque(n for n in start_nodes if labels[n] == NodeLabel.LEAF)
    seen.update(queue)
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen and v not in blocked and labels[v] == NodeLabel.LEAF:
                seen.add(v)
                queue.append(v)
    return seen


def refine_labels(graph: SliceGraph, stem_path, min_neighbors: int = 1, overlap_threshold: float = 0.5,
                  trunk_window: int = 3) -> LabeledGraph:
    """Stem/leaf labels for every node plus the surviving branch nodes.

    Nodes on the stem path are stems and the rest leaves. A branch node
    (degree >= 3) keeps its status only with at least ``min_neighbors``
    stem and leaf neighbours; otherwise it takes the majority label of its
    neighbours (stem on ties). Branch nodes within ``trunk_window`` path
    steps whose reachable leaf sets overlap by more than
    ``overlap_threshold`` (relative to the smaller set) are reduced to one:
    the node nearer to the shared leaves stays. Nodes without edges become
    outliers.
    """
    if not stem_path:
        raise InvalidArgument("stem path is empty")
    graph.refresh_degrees()
    adj = graph.neighbors()
    on_path = set(stem_path)
    labels = [NodeLabel.STEM if i in on_path else NodeLabel.LEAF for i in range(len(graph.nodes))]
    deg = graph.degrees()

    branches = []
    for i in range(len(graph.nodes)):
        if deg[i] < 3:
            continue
        n_stem = sum(labels[v] == NodeLabel.STEM for v in adj[i])
        n_leaf = len(adj[i]) - n_stem
        if n_stem >= min_neighbors and n_leaf >= min_neighbors:
            branches.append(i)
        elif n_stem != n_leaf:
            labels[i] = NodeLabel.STEM if n_stem > n_leaf else NodeLabel.LEAF
    # only branch nodes on the stem path are leaf junctions
    pos = {u: k for k, u in enumerate(stem_path)}
    junctions = sorted((b for b in branches if b in pos and labels[b] == NodeLabel.STEM), key=pos.get)

    demoted = []
    c = graph.centroids
    leaf_sets = {j: _leaf_set(adj, labels, adj[j], on_path) for j in junctions}
    alive = list(junctions)
    changed = True
    while changed:
        changed = False
        for a_i in range(len(alive)):
            for b_i in range(a_i + 1, len(alive)):
                a, b = alive[a_i], alive[b_i]
                if abs(pos[a] - pos[b]) > trunk_window:
                    continue
                sa, sb = leaf_sets[a], leaf_sets[b]
                if not sa or not sb:
                    continue
                overlap = len(sa & sb) / min(len(sa), len(sb))
                if overlap <= overlap_threshold:
                    continue
                shared = sa & sb
                da = min(np.linalg.norm(c[a] - c[s]) for s in shared)
                db = min(np.linalg.norm(c[b] - c[s]) for s in shared)
                loser = b if da <= db else a
                alive.remove(loser)
                demoted.append(loser)
                changed = True
                break
            if changed:
                break

    for i in range(len(graph.nodes)):
        if deg[i] == 0:
            labels[i] = NodeLabel.OUTLIER
    for node, lab in zip(graph.nodes, labels):
        node.label = lab
    return LabeledGraph(graph, list(stem_path), labels, alive, demoted)


@dataclass(frozen=True)
class LeafAngle:
    branch_node: int
    leaf_node: int  # first node of the measured arm
    v_stem: np.ndarray
    v_leaf: np.ndarray
    angle_deg: float
    stem_window: int
    leaf_window: int
    low_confidence: bool
    z: float


def angle_between(v_s, v_l) -> float:
    v_s = np.asarray(v_s, dtype=np.float64)
    v_l = np.asarray(v_l, dtype=np.float64)
    ns, nl = np.linalg.norm(v_s), np.linalg.norm(v_l)
    if ns == 0 or nl == 0:
        raise AngleUndefined("zero-length direction")
    return float(np.degrees(np.arccos(np.clip(v_s @ v_l / (ns * nl), -1.0, 1.0))))


def fit_direction(points: np.ndarray) -> np.ndarray:
    """Unit direction of the total-least-squares line through the points."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        raise AngleUndefined("need at least 2 points for a line fit")
    q = pts - pts.mean(axis=0)
    _, s, vt = np.linalg.svd(q, full_matrices=False)
    if s[0] == 0:
        raise AngleUndefined("coincident centroids")
    return vt[0]


def _walk_arm(adj, labels, centroids, junction, first, window, blocked):
    arm = [first]
    seen = {junction, first}
    cur = first
    while len(arm) < window:
        options = [v for v in adj[cur] if v not in seen and v not in blocked and labels[v] == NodeLabel.LEAF]
        if not options:
            break
        # continue outward: the candidate farthest from the junction
        far = [np.linalg.norm(centroids[v] - centroids[junction]) for v in options]
        cur = options[int(np.argmax(far))]
        arm.append(cur)
        seen.add(cur)
    return arm


def junction_angles(labeled: LabeledGraph, window: int = 5, include_junction: bool = False,
                    stem_side: str = "both", fragment_radius: float = 0.0) -> tuple:
    """Leaf angles at every junction.

    With ``stem_side="both"`` the stem window is up to ``window`` stem-path
    nodes on each side of the junction; with ``"above"`` it is up to
    ``window`` nodes above it (below it when fewer than 2 exist above). The
    stem fit is oriented upward. Each leaf
    neighbour of the junction starts an arm of up to ``window`` leaf nodes
    walking outward; its fit is oriented away from the junction. With
    ``include_junction`` the junction centroid anchors both fits. An arm whose
    centroids all stay within ``fragment_radius`` of the fitted stem line is a
    split-off piece of the stem, not a leaf, and is reported as undefined.

    Returns:
        (list of LeafAngle, list of (junction, leaf node, reason) for arms
        whose angle is undefined)
    """
    graph = labeled.graph
    adj = graph.neighbors()
    c = graph.centroids
    labels = labeled.labels
    path = labeled.stem_path
    pos = {u: k for k, u in enumerate(path)}
    stem_nodes = set(path)
    angles, undefined = [], []
    for j in labeled.branch_nodes:
        p = pos[j]
        above = path[max(0, p - window):p]
        below = path[p + 1:p + 1 + window]
        if stem_side == "both":
            stem_ids = above + below
        else:
            stem_ids = above if len(above) >= 2 else below
        anchor = [j] if include_junction else []
        for first in adj[j]:
            if labels[first] != NodeLabel.LEAF:
                continue
            arm = _walk_arm(adj, labels, c, j, first, window, stem_nodes)
            try:
                if len(stem_ids) < 2:
                    raise AngleUndefined("stem window shorter than 2 nodes")
                if len(arm) < 2 and not include_junction:
                    raise AngleUndefined("leaf arm shorter than 2 nodes")
                v_s = fit_direction(c[anchor + list(stem_ids)])
                if v_s[2] < 0:
                    v_s = -v_s
                v_l = fit_direction(c[anchor + arm])
                if v_l @ (c[arm].mean(axis=0) - c[j]) < 0:
                    v_l = -v_l
                if fragment_radius > 0:
                    rel = c[arm] - c[list(stem_ids)].mean(axis=0)
                    off = np.linalg.norm(rel - np.outer(rel @ v_s, v_s), axis=1)
                    if off.max() < fragment_radius:
                        raise AngleUndefined("arm runs along the stem")
            except AngleUndefined as exc:
                undefined.append((j, first, str(exc)))
                continue
            angles.append(LeafAngle(
                j, first, v_s, v_l, angle_between(v_s, v_l), len(stem_ids), len(arm),
                len(stem_ids) < window or len(arm) < window, float(c[j, 2]),
            ))
    return angles, undefined


@dataclass(frozen=True)
class StemGraphParams:
    slices: int = DEFAULT_SLICES
    eps: Optional[float] = None
    eps_factor: float = 1.5
    eps_neighbor: int = DEFAULT_MIN_PTS - 1  # rank of the neighbour distance behind eps
    planar: bool = False  # cluster slices on (x, y) only
    min_pts: int = DEFAULT_MIN_PTS
    weights: tuple = DEFAULT_WEIGHTS
    max_dist_factor: float = 5.0  # matching distance limit, in slice thicknesses
    growth: float = 1.5
    trunk_beta: Optional[float] = None  # defaults to the beta weight
    min_neighbors: int = 1
    overlap_threshold: float = 0.5
    trunk_window: int = 3
    window: int = 5
    include_junction: bool = False
    stem_side: str = "both"  # "both" or "above"
    fragment_factor: float = 1.0  # stem-fragment radius, in slice thicknesses


@dataclass
class AngleResult:
    angles: list
    undefined: list
    labeled: LabeledGraph
    method: str
    path_costs: dict
    edge_costs: dict = field(default_factory=dict)  # directed (upper, lower) -> DAG cost

    @property
    def junction_count(self) -> int:
        return len({a.branch_node for a in self.angles})

    def rows(self, plant_id: str = "plant") -> list:
        return [
            {
                "plant_id": plant_id,
                "junction": a.branch_node,
                "z": a.z,
                "angle_deg": a.angle_deg,
                "stem_window": a.stem_window,
                "leaf_window": a.leaf_window,
                "low_confidence": int(a.low_confidence),
            }
            for a in sorted(self.angles, key=lambda a: (-a.z, a.branch_node, a.leaf_node))
        ]

    def graph_json(self) -> str:
        data = self.labeled.graph.to_dict()
        for e in data["edges"]:
            key = next((k for k in ((e["u"], e["v"]), (e["v"], e["u"])) if k in self.edge_costs), None)
            e["cost"] = self.edge_costs[key] if key else None
            e["direction"] = list(key) if key else None
        data["stem_path"] = list(self.labeled.stem_path)
        data["junctions"] = list(self.labeled.branch_nodes)
        data["path_costs"] = self.path_costs
        return json.dumps(data, indent=2, sort_keys=True)


def cluster_slices(cloud: PointCloud, params: StemGraphParams = StemGraphParams()):
    """Slice and cluster; returns (clusters per slice, slice thickness)."""
    slices = slice_cloud(cloud, params.slices)
    per_slice = []
    dims = 2 if params.planar else 3
    for s in slices:
        pts = cloud.positions[s.members]
        eps = params.eps
        if eps is None:
            eps = default_eps(_pad(pts, dims), params.eps_factor, max(1, params.eps_neighbor))
        if eps is None and len(pts) >= params.min_pts:
            per_slice.append([ClusterNode(s.index, pts.mean(axis=0), s.members.copy())])
            continue
        per_slice.append(cluster_slice(pts, s.members, eps, params.min_pts, s.index, planar=params.planar) if eps else [])
    thickness = slices[0].z_hi - slices[0].z_lo
    return per_slice, thickness


def measure_leaf_angles(cloud: PointCloud, params: StemGraphParams = StemGraphParams()) -> AngleResult:
    """Full slice-graph pipeline from a cleaned, aligned plant cloud."""
    per_slice, thickness = cluster_slices(cloud, params)
    nodes, _ = _flatten(per_slice)
    if not nodes:
        raise EmptyCloud("no clusters found in any slice")
    axis = principal_axis(np.array([n.centroid for n in nodes]))
    max_dist = params.max_dist_factor * thickness if thickness > 0 else 1.0
    beta = params.weights[1] if params.trunk_beta is None else params.trunk_beta
    g_bip = bridge_components(build_graph(per_slice, "bipartite", max_dist, axis=axis), max_dist, params.growth)
    g_trunk = bridge_components(build_graph(per_slice, "trunk", max_dist, beta, axis=axis), max_dist, params.growth)
    graph, path, costs = select_adjacency(g_bip, g_trunk, params.weights)
    # nodes are shared between the two graphs; work on private copies
    graph = SliceGraph(
        [ClusterNode(n.slice_index, n.centroid, n.members) for n in graph.nodes],
        dict(graph.edges), graph.axis, graph.method,
    )
    labeled = refine_labels(graph, path, params.min_neighbors, params.overlap_threshold, params.trunk_window)
    angles, undefined = junction_angles(labeled, params.window, params.include_junction, params.stem_side,
                                        params.fragment_factor * thickness)
    log.debug("stem graph: %d nodes, method %s, %d angles", len(graph.nodes), graph.method, len(angles))
    dag = build_stem_dag(graph, params.weights)
    return AngleResult(angles, undefined, labeled, graph.method, costs, dict(dag.edges))
