"""Top-down Euclidean-clustering hierarchies and their vertex cuts."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _csgraph_components

from .errors import InvalidParameterError, SizeOverflowError
from .geometry import PointCloud, PointIndexSet, Segmentation

DEFAULT_SCHEDULE = (2.0, 1.0, 0.5, 0.25)
SCHEDULE_PRESETS = {
    "default": DEFAULT_SCHEDULE,
    "coarse3": (2.7, 0.9, 0.3),
    "fine4": (2.4, 1.2, 0.6, 0.3),
    "deep5": (3.2, 1.6, 0.8, 0.4, 0.2),
}
ENUMERATION_CAP = 10**6

# Cell side is eps/sqrt(3), so two points sharing a cell are always linked.
# Linked points can then sit at most two cells apart along each axis.
_OFFSETS = sorted(
    (d for d in itertools.product(range(-2, 3), repeat=3) if d > (0, 0, 0)),
    key=lambda d: (d[0] ** 2 + d[1] ** 2 + d[2] ** 2, d),
)
_PAIR_CHUNK = 4_000_000


def _check_epsilon(epsilon) -> float:
    try:
        eps = float(epsilon)
    except (TypeError, ValueError):
        raise InvalidParameterError(f"epsilon must be a number, got {epsilon!r}") from None
    if not math.isfinite(eps) or eps <= 0:
        raise InvalidParameterError(f"epsilon must be positive and finite, got {epsilon!r}")
    return eps


def _cell_graph_labels(ncell: int, ea: list, eb: list) -> np.ndarray:
    if not ea:
        return np.arange(ncell)
    a = np.concatenate(ea)
    b = np.concatenate(eb)
    g = coo_matrix((np.ones(a.size, dtype=np.int8), (a, b)), shape=(ncell, ncell))
    return _csgraph_components(g, directed=False)[1]


def _any_close(pts, start_a, start_b, count_a, count_b, eps2) -> np.ndarray:
    """For each cell pair, whether some cross pair lies within sqrt(eps2)."""
    npair = count_a * count_b
    out = np.zeros(npair.size, dtype=bool)
    cum = np.cumsum(npair)
    lo = 0
    while lo < npair.size:
        base = cum[lo] - npair[lo]
        hi = int(np.searchsorted(cum, base + _PAIR_CHUNK, side="right"))
        hi = max(hi, lo + 1)
        sel = slice(lo, hi)
        n = npair[sel]
        pid = np.repeat(np.arange(n.size), n)
        k = np.arange(int(n.sum())) - np.repeat(np.cumsum(n) - n, n)
        cb = count_b[sel][pid]
        ia = start_a[sel][pid] + k // cb
        ib = start_b[sel][pid] + k % cb
        d = pts[ia] - pts[ib]
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        out[sel] = np.bincount(pid[d2 <= eps2], minlength=n.size) > 0
        lo = hi
    return out


def component_labels(xyz: np.ndarray, epsilon: float) -> np.ndarray:
    """Label rows of ``xyz`` by connected component of the eps-distance graph.

    Labels are numbered in order of each component's first row. Two points
    are linked when their squared distance is at most ``epsilon**2``.
    """
    eps = _check_epsilon(epsilon)
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    n = xyz.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)

    side = eps / math.sqrt(3.0)
    cell = np.floor((xyz - xyz.min(axis=0)) / side).astype(np.int64) + 2
    dims = cell.max(axis=0) + 3
    key = (cell[:, 0] * dims[1] + cell[:, 1]) * dims[2] + cell[:, 2]

    order = np.argsort(key, kind="stable")
    ukeys, starts, counts = np.unique(key[order], return_index=True, return_counts=True)
    pts = xyz[order]
    ncell = ukeys.size
    eps2 = eps * eps

    comp = np.arange(ncell)
    ea: list[np.ndarray] = []
    eb: list[np.ndarray] = []
    for dx, dy, dz in _OFFSETS:
        if ncell == 1:
            break
        target = ukeys + (dx * dims[1] + dy) * dims[2] + dz
        pos = np.minimum(np.searchsorted(ukeys, target), ncell - 1)
        a = np.flatnonzero(ukeys[pos] == target)
        b = pos[a]
        pending = comp[a] != comp[b]
        a, b = a[pending], b[pending]
        if a.size == 0:
            continue
        close = _any_close(pts, starts[a], starts[b], counts[a], counts[b], eps2)
        if close.any():
            ea.append(a[close])
            eb.append(b[close])
            comp = _cell_graph_labels(ncell, ea, eb)

    cell_of_sorted = np.repeat(np.arange(ncell), counts)
    raw = np.empty(n, dtype=np.int64)
    raw[order] = comp[cell_of_sorted]
    # renumber by first occurrence
    _, first = np.unique(raw, return_index=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    uniq = np.unique(raw)
    return rank[np.searchsorted(uniq, raw)]


def _groups(labels: np.ndarray, members: np.ndarray) -> list[np.ndarray]:
    """Split ``members`` (ascending) by label; groups ordered by label."""
    order = np.argsort(labels, kind="stable")
    _, starts = np.unique(labels[order], return_index=True)
    return np.split(members[order], starts[1:])


def connected_components(
    cloud: PointCloud, subset: PointIndexSet, epsilon: float
) -> list[PointIndexSet]:
    """Euclidean clusters of ``subset`` at threshold ``epsilon``.

    Components are ordered by their smallest point index.
    """
    eps = _check_epsilon(epsilon)
    if len(subset) == 0:
        return []
    labels = component_labels(cloud.xyz[subset.indices], eps)
    return [PointIndexSet(g, check=False) for g in _groups(labels, subset.indices)]


@dataclass(frozen=True, eq=False)
class TreeNode:
    points: PointIndexSet
    children: tuple["TreeNode", ...] = ()
    node_id: tuple[int, ...] = ()
    epsilon_level: float | None = None
    tree: int = 0

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def label(self) -> str:
        """Printable id: tree index followed by the child-ordinal path."""
        return ".".join(str(i) for i in (self.tree, *self.node_id))

    def iter_nodes(self) -> Iterator["TreeNode"]:
        """Pre-order traversal."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def node_count(self) -> int:
        return sum(1 for _ in self.iter_nodes())

    def leaves(self) -> list["TreeNode"]:
        return [n for n in self.iter_nodes() if n.is_leaf]

    def check(self) -> None:
        """Assert that every node's children partition its points."""
        for node in self.iter_nodes():
            if node.children:
                merged = np.concatenate([c.points.indices for c in node.children])
                merged.sort()
                if not np.array_equal(merged, node.points.indices):
                    raise AssertionError(f"children of node {node.label} do not partition it")


@dataclass(frozen=True)
class Forest:
    trees: tuple[TreeNode, ...]
    epsilon_schedule: tuple[float, ...]
    cloud_size: int
    frame_id: str = ""

    def iter_nodes(self) -> Iterator[TreeNode]:
        for t in self.trees:
            yield from t.iter_nodes()

    def node_count(self) -> int:
        return sum(t.node_count() for t in self.trees)


def _check_schedule(schedule: Sequence[float]) -> tuple[float, ...]:
    sched = tuple(_check_epsilon(e) for e in schedule)
    if not sched:
        raise InvalidParameterError("epsilon schedule must not be empty")
    if any(b >= a for a, b in zip(sched, sched[1:])):
        raise InvalidParameterError(f"epsilon schedule must be strictly decreasing: {list(sched)}")
    return sched


def build_forest(cloud: PointCloud, schedule: Sequence[float] = DEFAULT_SCHEDULE) -> Forest:
    """Recursive Euclidean clustering with a decreasing threshold schedule.

    Every level is clustered over the whole cloud at once. An eps-path at a
    finer threshold is also a path at every coarser one, so each finer
    component lies inside exactly one coarser component and this matches
    re-clustering inside each parent.
    """
    sched = _check_schedule(schedule)
    n = len(cloud)
    if n == 0:
        return Forest((), sched, 0, cloud.frame_id)

    all_idx = np.arange(n, dtype=np.int64)
    labels = [component_labels(cloud.xyz, eps) for eps in sched]
    groups = [_groups(lab, all_idx) for lab in labels]

    def make(level: int, comp: int, tree: int, path: tuple[int, ...]) -> TreeNode:
        members = groups[level][comp]
        children: tuple[TreeNode, ...] = ()
        if level + 1 < len(sched):
            sub = np.unique(labels[level + 1][members])
            children = tuple(
                make(level + 1, int(c), tree, path + (k,)) for k, c in enumerate(sub)
            )
        return TreeNode(PointIndexSet(members, check=False), children, path, sched[level], tree)

    trees = tuple(make(0, c, c, ()) for c in range(len(groups[0])))
    forest = Forest(trees, sched, n, cloud.frame_id)
    for t in trees:
        t.check()
    return forest


def count_tree_consistent(node: TreeNode) -> int:
    """Number of vertex cuts of the subtree: 1 for a leaf, else 1 + prod(children)."""
    if node.is_leaf:
        return 1
    return 1 + math.prod(count_tree_consistent(c) for c in node.children)


def count_forest_cuts(forest: Forest) -> int:
    return math.prod(count_tree_consistent(t) for t in forest.trees)


def _cuts(node: TreeNode) -> list[tuple[TreeNode, ...]]:
    out: list[tuple[TreeNode, ...]] = [(node,)]
    if node.children:
        per_child = [_cuts(c) for c in node.children]
        for combo in itertools.product(*per_child):
            out.append(tuple(itertools.chain.from_iterable(combo)))
    return out


def iter_vertex_cuts(node: TreeNode, cap: int = ENUMERATION_CAP) -> Iterator[tuple[TreeNode, ...]]:
    """Every vertex cut of the subtree, coarsest ``(node,)`` first.

    Each cut is listed once. Single-child chains give distinct cuts with
    the same point sets, matching ``count_tree_consistent``.
    """
    total = count_tree_consistent(node)
    if total > cap:
        raise SizeOverflowError(total, cap)
    yield (node,)
    if node.children:
        per_child = [_cuts(c) for c in node.children]
        for combo in itertools.product(*per_child):
            yield tuple(itertools.chain.from_iterable(combo))


def enumerate_cuts(node: TreeNode, cap: int = ENUMERATION_CAP) -> Iterator[Segmentation]:
    for cut in iter_vertex_cuts(node, cap):
        yield Segmentation(tuple(n.points for n in cut))


def _level_index(schedule: Sequence[float], epsilon: float) -> int:
    for k, e in enumerate(schedule):
        if math.isclose(e, float(epsilon), rel_tol=1e-9, abs_tol=0.0):
            return k
    raise InvalidParameterError(f"epsilon {epsilon} is not in the schedule {list(schedule)}")


def level_nodes(forest: Forest, epsilon: float) -> list[TreeNode]:
    k = _level_index(forest.epsilon_schedule, epsilon)
    out = []
    for t in forest.trees:
        out.extend(n for n in t.iter_nodes() if len(n.node_id) == k)
    return out


def level_cut(forest: Forest, epsilon: float) -> Segmentation:
    """Global segmentation formed by every node at one threshold."""
    return Segmentation(tuple(n.points for n in level_nodes(forest, epsilon)))


def tree_from_nested(spec, *, start: int = 0, tree: int = 0) -> TreeNode:
    """Hand-build a tree: an int is a leaf with that many points, a list is an
    internal node over its children. Points are numbered consecutively.

    >>> count_tree_consistent(tree_from_nested([1, [1, 1]]))
    3
    """
    counter = [start]

    def build(s, path):
        if isinstance(s, int):
            if s < 1:
                raise InvalidParameterError("leaves need at least one point")
            idx = np.arange(counter[0], counter[0] + s, dtype=np.int64)
            counter[0] += s
            return TreeNode(PointIndexSet(idx, check=False), (), path, None, tree)
        if not s:
            raise InvalidParameterError("internal nodes need at least one child")
        kids = tuple(build(c, path + (k,)) for k, c in enumerate(s))
        idx = np.concatenate([c.points.indices for c in kids])
        return TreeNode(PointIndexSet(idx, check=False), kids, path, None, tree)

    return build(spec, ())


def balanced_binary(depth: int, *, start: int = 0, tree: int = 0) -> TreeNode:
    """Balanced binary tree with ``2**depth`` single-point leaves."""
    def nest(d):
        return 1 if d == 0 else [nest(d - 1), nest(d - 1)]

    return tree_from_nested(nest(depth), start=start, tree=tree)


def is_tree_consistent(forest: Forest, seg: Segmentation) -> bool:
    """True when every segment of ``seg`` is the point set of some node."""
    digests = {n.points.digest for n in forest.iter_nodes()}
    return all(s.digest in digests for s in seg.segments)
