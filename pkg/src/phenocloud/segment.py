"""Split a multi-seedling pot cloud into individually labeled plants.

The cloud is downsampled and cleaned, z is stretched so vertical structure
dominates distances, and a pruned k-nearest-neighbour graph gives the
initial components. Unusually large components are split by cutting the
longest edges of their minimum spanning tree, small ones become noise, and
the labels are carried back to the full-resolution cloud by nearest
neighbour. Clusters can be exported to PLY for manual edits and re-imported.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay, QhullError

from .cloud import PointCloud, estimate_normals, remove_statistical_outliers, voxel_downsample
from .errors import ConfigError, ImportConflict, InvalidArgument, NoSplit, SchemaError
from .ply import load_ply, write_ply
from .spatial import SpatialIndex

log = logging.getLogger(__name__)

NOISE = -1
LARGE_METHODS = ("percentile", "stddev", "kmeans")
POINT_ID = "point_id"


@dataclass(frozen=True)
class LabelMap:
    """Per-point integer labels; ``-1`` marks noise."""

    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64).reshape(-1))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def census(self) -> dict:
        """Label -> point count, in ascending label order (noise included)."""
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    @property
    def clusters(self) -> list:
        """Non-noise labels in ascending order."""
        return [k for k in self.census if k != NOISE]


@dataclass(frozen=True)
class SegmentationParams:
    voxel_size: float = 0.0025
    normal_k: int = 20
    outlier_k: int = 20
    std_ratio: float = 3.0
    z_scale: float = 2.0
    graph_k: int = 10
    edge_threshold: Optional[float] = None  # None = 3 x voxel size
    mst_cuts: int = 1
    min_cluster_size: int = 50
    large_method: str = "stddev"
    large_param: Optional[float] = 1.5  # percentile P or stddev multiple m

    def __post_init__(self):
        for name in ("voxel_size", "std_ratio"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be > 0")
        for name in ("normal_k", "outlier_k", "graph_k", "min_cluster_size"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if self.z_scale < 1:
            raise InvalidArgument("z_scale must be >= 1")
        if self.mst_cuts < 0:
            raise InvalidArgument("mst_cuts must be >= 0")
        if self.edge_threshold is not None and not self.edge_threshold > 0:
            raise InvalidArgument("edge_threshold must be > 0")
        if self.large_method not in LARGE_METHODS:
            raise InvalidArgument(f"large_method must be one of {LARGE_METHODS}")

    @property
    def threshold(self) -> float:
        return self.edge_threshold if self.edge_threshold is not None else 3.0 * self.voxel_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SegmentationParams":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown segmentation keys: {', '.join(unknown)}")
        return cls(**data)


def _by_size(labels: np.ndarray) -> np.ndarray:
    """Renumber non-noise labels 0..C-1 by descending size, old id breaking ties."""
    out = np.full(len(labels), NOISE, dtype=np.int64)
    ids, counts = np.unique(labels[labels != NOISE], return_counts=True)
    order = np.lexsort((ids, -counts))
    remap = {int(ids[k]): new for new, k in enumerate(order)}
    for old, new in remap.items():
        out[labels == old] = new
    return out


def knn_components(points: np.ndarray, k: int, threshold: float) -> np.ndarray:
    """Connected components of the k-NN graph after dropping edges longer than ``threshold``.

    Components are numbered by descending size.
    """
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    kk = min(k + 1, n)
    dist, nbr = SpatialIndex(points).query_many(points, kk)
    keep = dist[:, 1:] <= threshold
    rows = np.repeat(np.arange(n), kk - 1)[keep.ravel()]
    cols = nbr[:, 1:].ravel()[keep.ravel()]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    return _by_size(comp.astype(np.int64))


def initial_segment(cloud: PointCloud, params: SegmentationParams = SegmentationParams()):
    """Downsample, clean and split into connected components.

    Returns:
        (cleaned downsampled cloud, LabelMap over it with labels 0..C-1 by
        descending size)
    """
    down = voxel_downsample(cloud, params.voxel_size)
    if len(down) > params.normal_k:
        down = estimate_normals(down, params.normal_k)
    if len(down) > params.outlier_k:
        down, removed = remove_statistical_outliers(down, params.outlier_k, params.std_ratio)
        log.debug("segment: removed %d outliers", len(removed))
    stretched = down.positions * np.array([1.0, 1.0, params.z_scale])
    labels = knn_components(stretched, params.graph_k, params.threshold)
    return down, LabelMap(labels)


def _mst_edges(points: np.ndarray):
    """Euclidean minimum spanning tree edges as (weights, u, v), by Kruskal.

    Candidate edges come from the Delaunay triangulation, which contains the
    Euclidean MST; degenerate inputs fall back to the complete graph.
    """
    n = len(points)
    try:
        if n < 5:
            raise QhullError("too few points")
        simplices = Delaunay(points).simplices
        pairs = np.vstack([simplices[:, [a, b]] for a in range(4) for b in range(a + 1, 4)])
        pairs = np.unique(np.sort(pairs, axis=1), axis=0)
        if len(pairs) < n - 1:
            raise QhullError("triangulation misses points")
    except (QhullError, ValueError):
        iu = np.triu_indices(n, 1)
        pairs = np.column_stack(iu)
    w = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
    order = np.lexsort((pairs[:, 1], pairs[:, 0], w))
    parent = np.arange(n)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    tree = []
    for e in order:
        u, v = int(pairs[e, 0]), int(pairs[e, 1])
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
            tree.append((float(w[e]), u, v))
            if len(tree) == n - 1:
                break
    return tree


def mst_weight(points: np.ndarray) -> float:
    """Total weight of the Euclidean minimum spanning tree."""
    return float(sum(w for w, _, _ in _mst_edges(np.asarray(points, dtype=np.float64))))


def mst_refine(cloud: PointCloud, labels: LabelMap, target: int, cuts: int = 1) -> LabelMap:
    """Split cluster ``target`` by removing the ``cuts`` longest MST edges.

    The largest piece keeps ``target``; the others get fresh labels after
    the current maximum, in descending size. Equal-length edges are cut in
    (u, v) order, so the last edges in (weight, u, v) order go first.
    """
    members = np.flatnonzero(labels.labels == target)
    if len(members) == 0:
        raise InvalidArgument(f"label {target} does not exist")
    if len(members) < 2:
        raise NoSplit(f"label {target} has a single point")
    if cuts <= 0:
        return labels
    pts = cloud.positions[members]
    tree = _mst_edges(pts)
    kept = tree[: max(0, len(tree) - cuts)]
    n = len(members)
    if kept:
        _, u, v = zip(*kept)
        graph = coo_matrix((np.ones(len(u)), (u, v)), shape=(n, n))
    else:
        graph = coo_matrix((n, n))
    _, comp = connected_components(graph, directed=False)
    comp = _by_size(comp.astype(np.int64))
    out = labels.labels.copy()
    top = int(out.max())
    out[members] = np.where(comp == 0, target, top + comp)
    return LabelMap(out)


def mark_noise(labels: LabelMap, min_size: int) -> LabelMap:
    """Turn clusters smaller than ``min_size`` into noise and renumber by size."""
    out = labels.labels.copy()
    for lab, count in labels.census.items():
        if lab != NOISE and count < min_size:
            out[out == lab] = NOISE
    return LabelMap(_by_size(out))


def _two_means(values: np.ndarray) -> np.ndarray:
    """1D 2-means seeded at the minimum and maximum; True marks the upper group."""
    lo, hi = float(values.min()), float(values.max())
    upper = values > (lo + hi) / 2
    while True:
        if upper.all() or not upper.any():
            return upper
        lo, hi = values[~upper].mean(), values[upper].mean()
        nxt = values > (lo + hi) / 2
        if np.array_equal(nxt, upper):
            return upper
        upper = nxt


def flag_large_clusters(labels: LabelMap, method: str = "kmeans", param: Optional[float] = None) -> list:
    """Labels of clusters that are unusually large.

    Args:
        method: ``percentile`` (size above the P-th percentile, P default
            90), ``stddev`` (size above mean + m * std, m default 2) or
            ``kmeans`` (upper group of a 2-means split of the sizes).

    Returns:
        flagged labels in ascending order
    """
    census = {k: v for k, v in labels.census.items() if k != NOISE}
    if not census:
        raise InvalidArgument("no clusters to inspect")
    ids = np.array(list(census))
    sizes = np.array([census[k] for k in ids], dtype=np.float64)
    if method == "percentile":
        p = 90.0 if param is None else float(param)
        flagged = sizes > np.percentile(sizes, p)
    elif method == "stddev":
        m = 2.0 if param is None else float(param)
        flagged = sizes > sizes.mean() + m * sizes.std()
    elif method == "kmeans":
        flagged = _two_means(sizes)
    else:
        raise InvalidArgument(f"unknown method {method!r}")
    return [int(i) for i in ids[flagged]]


def export_cluster(cloud: PointCloud, labels: LabelMap, label: int, path) -> int:
    """Write the points of ``label`` to PLY with their ids and labels.

    Returns:
        number of points written
    """
    members = np.flatnonzero(labels.labels == label)
    if len(members) == 0:
        raise InvalidArgument(f"label {label} does not exist")
    part = replace(
        cloud.subset(members),
        labels=labels.labels[members].astype(np.int32),
        extra={POINT_ID: members.astype(np.int32)},
    )
    write_ply(part, path)
    return len(members)


def read_label_edits(path):
    """Point ids and labels from an edited export.

    Returns:
        (ids, labels) as int64 arrays
    """
    edited = load_ply(path)
    if POINT_ID not in edited.extra or edited.labels is None:
        raise SchemaError(f"{path}: needs '{POINT_ID}' and 'label' vertex properties")
    return edited.extra[POINT_ID].astype(np.int64), edited.labels.astype(np.int64)


def import_labels(path, labels: LabelMap) -> LabelMap:
    """Apply the labels of an edited export; points absent from the file are unchanged."""
    ids, new = read_label_edits(path)
    n = len(labels)
    bad = set(ids[(ids < 0) | (ids >= n)].tolist())
    uniq, counts = np.unique(ids, return_counts=True)
    bad |= set(uniq[counts > 1].tolist())
    if bad:
        raise ImportConflict(bad)
    out = labels.labels.copy()
    out[ids] = new
    return LabelMap(out)


def transfer_labels(down: PointCloud, labels: LabelMap, full: PointCloud) -> LabelMap:
    """Give every full-resolution point the label of its nearest downsampled point."""
    if down.is_empty or full.is_empty:
        raise InvalidArgument("both clouds must be nonempty")
    if len(labels) != len(down):
        raise InvalidArgument("labels do not match the downsampled cloud")
    nearest = SpatialIndex(down.positions).nearest(full.positions)
    return LabelMap(labels.labels[nearest])


@dataclass
class SegmentResult:
    down: PointCloud
    down_labels: LabelMap
    labels: LabelMap  # full resolution
    initial_census: dict
    split: list  # labels that were MST-refined

    def labeled_cloud(self, cloud: PointCloud) -> PointCloud:
        return cloud.with_labels(self.labels.labels.astype(np.int32))


def segment_pot(cloud: PointCloud, params: SegmentationParams = SegmentationParams()) -> SegmentResult:
    """Initial components, MST split of flagged large clusters, noise, full-resolution transfer."""
    down, labels = initial_segment(cloud, params)
    initial = labels.census
    # size statistics only make sense over clusters that are not noise-sized
    sized = mark_noise(labels, params.min_cluster_size)
    split = []
    if sized.clusters and params.mst_cuts > 0 and len(sized.clusters) > 1:
        for lab in flag_large_clusters(sized, params.large_method, params.large_param):
            if sized.census.get(lab, 0) < 2:
                continue
            refined = mst_refine(down, sized, lab, params.mst_cuts)
            # a cut that only trims a few stray points is not a plant boundary
            pieces = [c for k, c in refined.census.items() if k == lab or k not in sized.census]
            if min(pieces) >= params.min_cluster_size:
                sized = refined
                split.append(lab)
    final = mark_noise(sized, params.min_cluster_size)
    full = transfer_labels(down, final, cloud)
    return SegmentResult(down, final, full, initial, split)


def purity(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Share of points whose cluster's majority truth label equals their own.

    Noise points count as wrong.
    """
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if len(predicted) == 0:
        return 1.0
    good = 0
    for lab in np.unique(predicted):
        if lab == NOISE:
            continue
        t = truth[predicted == lab]
        good += int(np.bincount(t - t.min()).max())
    return good / len(predicted)
