"""Search over tree-consistent segmentations.

``opt_min_seg`` is the exact worst-case dynamic program; ``greedy_avg_seg``
applies the same bottom-up coarse-vs-fine decision to the mean, which is not
guaranteed optimal. ``brute_force_opt`` enumerates every vertex cut and is
only meant as an oracle for small trees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

from .errors import InvalidInputError, ScoringError
from .geometry import PointIndexSet, Segmentation
from .hierarchy import ENUMERATION_CAP, Forest, TreeNode, iter_vertex_cuts
from .parallel import pmap

AGGREGATORS = ("min", "avg")


def aggregate(scores: Sequence[float], aggregator: str) -> float:
    if not scores:
        return math.nan
    if aggregator == "min":
        return min(scores)
    if aggregator == "avg":
        return math.fsum(scores) / len(scores)
    raise InvalidInputError(f"unknown aggregator {aggregator!r}")


@dataclass(frozen=True)
class SearchResult:
    segmentation: Segmentation
    score: float
    aggregator: str
    nodes_visited: int
    nodes_scored: int
    nodes: tuple[TreeNode, ...] = ()
    segment_scores: tuple[float, ...] = ()


class _Run:
    """Scores nodes with error context and counts work for one search."""

    def __init__(self, scorer: Callable[[PointIndexSet], float]):
        self.scorer = scorer
        self.visited = 0
        self.scored = 0

    def score(self, node: TreeNode) -> float:
        self.scored += 1
        try:
            value = float(self.scorer(node.points))
        except ScoringError as exc:
            if exc.node_id is None:
                exc.node_id = node.label
            raise
        except Exception as exc:
            raise ScoringError(f"scorer failed: {exc}", node.label) from exc
        if not 0.0 <= value <= 1.0:
            raise ScoringError(f"score {value!r} outside [0, 1]", node.label)
        return value

    def result(self, nodes, scores, aggregator) -> SearchResult:
        seg = Segmentation(tuple(n.points for n in nodes))
        return SearchResult(
            seg, aggregate(scores, aggregator), aggregator,
            self.visited, self.scored, tuple(nodes), tuple(scores),
        )


def _opt_min(node: TreeNode, run: _Run, prune: bool):
    run.visited += 1
    coarse = run.score(node)
    if node.is_leaf:
        return [node], [coarse], coarse
    nodes: list[TreeNode] = []
    scores: list[float] = []
    worst = math.inf
    for child in node.children:
        c_nodes, c_scores, c_best = _opt_min(child, run, prune)
        if prune and c_best <= coarse:
            # the fine option can no longer beat the coarse one
            return [node], [coarse], coarse
        nodes += c_nodes
        scores += c_scores
        worst = min(worst, c_best)
    if worst > coarse:
        return nodes, scores, worst
    return [node], [coarse], coarse


def opt_min_seg(
    node: TreeNode, scorer: Callable[[PointIndexSet], float], *, prune: bool = True
) -> SearchResult:
    """Tree-consistent segmentation maximizing the worst segment score.

    Ties keep the coarser segmentation. With ``prune`` the remaining
    siblings are skipped as soon as one child's optimum is no better than
    the node's own score.
    """
    run = _Run(scorer)
    nodes, scores, _ = _opt_min(node, run, prune)
    return run.result(nodes, scores, "min")


def _greedy_avg(node: TreeNode, run: _Run):
    run.visited += 1
    coarse = run.score(node)
    if node.is_leaf:
        return [node], [coarse]
    nodes: list[TreeNode] = []
    scores: list[float] = []
    for child in node.children:
        c_nodes, c_scores = _greedy_avg(child, run)
        nodes += c_nodes
        scores += c_scores
    if aggregate(scores, "avg") > coarse:
        return nodes, scores
    return [node], [coarse]


def greedy_avg_seg(node: TreeNode, scorer: Callable[[PointIndexSet], float]) -> SearchResult:
    """Bottom-up greedy choice between ``{node}`` and the union of the
    children's greedy results, compared by mean score (ties keep coarse)."""
    run = _Run(scorer)
    nodes, scores = _greedy_avg(node, run)
    return run.result(nodes, scores, "avg")


def brute_force_opt(
    node: TreeNode,
    scorer: Callable[[PointIndexSet], float],
    aggregator: str = "min",
    *,
    cap: int = ENUMERATION_CAP,
) -> SearchResult:
    """Exhaustive maximizer over all vertex cuts; first cut wins ties."""
    aggregate([], aggregator)  # validates the name
    run = _Run(scorer)
    memo: dict[int, float] = {}

    def score(n: TreeNode) -> float:
        v = memo.get(id(n))
        if v is None:
            run.visited += 1
            v = memo[id(n)] = run.score(n)
        return v

    best_cut: tuple[TreeNode, ...] | None = None
    best_scores: list[float] = []
    best = -math.inf
    for cut in iter_vertex_cuts(node, cap):
        scores = [score(n) for n in cut]
        value = aggregate(scores, aggregator)
        if value > best:
            best, best_cut, best_scores = value, cut, scores
    assert best_cut is not None
    return run.result(best_cut, best_scores, aggregator)


def search_tree(node: TreeNode, scorer, mode: str) -> SearchResult:
    if mode == "min":
        return opt_min_seg(node, scorer)
    if mode == "avg":
        return greedy_avg_seg(node, scorer)
    raise InvalidInputError(f"unknown mode {mode!r}; expected 'min' or 'avg'")


def segment_forest(
    forest: Forest,
    scorer: Callable[[PointIndexSet], float],
    mode: str = "min",
    *,
    threads: int | None = None,
) -> SearchResult:
    """Search every tree independently and union the per-tree results.

    For ``min`` the union is optimal over the forest's whole cut space,
    since the global minimum is the minimum of per-tree minima. For ``avg``
    each tree is searched greedily on its own and the reported score is the
    mean over all returned segments.
    """
    if mode not in AGGREGATORS:
        raise InvalidInputError(f"unknown mode {mode!r}; expected 'min' or 'avg'")
    if not getattr(scorer, "thread_safe", False):
        threads = 1
    per_tree = pmap(lambda t: search_tree(t, scorer, mode), list(forest.trees), threads)
    nodes = tuple(n for r in per_tree for n in r.nodes)
    scores = tuple(s for r in per_tree for s in r.segment_scores)
    return SearchResult(
        Segmentation(tuple(n.points for n in nodes)),
        aggregate(scores, mode),
        mode,
        sum(r.nodes_visited for r in per_tree),
        sum(r.nodes_scored for r in per_tree),
        nodes,
        scores,
    )


def is_vertex_cut(root: TreeNode, nodes: Sequence[TreeNode]) -> bool:
    """True when every root-to-leaf path meets exactly one of ``nodes``."""
    chosen = {id(n) for n in nodes}
    if len(chosen) != len(nodes):
        return False
    found = 0

    def walk(n: TreeNode, covered: bool) -> bool:
        nonlocal found
        here = id(n) in chosen
        if here:
            if covered:
                return False
            found += 1
        if n.is_leaf:
            return covered or here
        return all(walk(c, covered or here) for c in n.children)

    return walk(root, False) and found == len(chosen)
