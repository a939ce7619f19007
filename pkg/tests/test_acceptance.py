"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` to see the summary lines.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from oracles import brute_components, nested_paths, random_nested
from treecut import io
from treecut.cli import main
from treecut.evaluation import EvalConfig, evaluate, under_over
from treecut.geometry import GroundTruth, PointCloud, PointIndexSet, Segmentation
from treecut.hierarchy import (
    DEFAULT_SCHEDULE,
    build_forest,
    connected_components,
    count_tree_consistent,
    balanced_binary,
    enumerate_cuts,
    is_tree_consistent,
    level_cut,
    tree_from_nested,
)
from treecut.objectness import HeuristicScorer, MemoScorer, WeightedIoUScorer, vanilla_iou, weighted_iou
from treecut.search import brute_force_opt, greedy_avg_seg, opt_min_seg, segment_forest
from treecut.synthetic import SceneSpec, gen_synthetic


def report(n, ok, detail):
    print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    return ok


def scored_tree(spec, scores):
    root = tree_from_nested(spec)
    by_digest = {n.points.digest: scores[n.node_id] for n in root.iter_nodes()}
    return root, (lambda seg: by_digest[seg.digest])


@pytest.fixture(scope="module")
def tree_suite():
    rng = np.random.default_rng(2024)
    suite = []
    for _ in range(500):
        spec = random_nested(rng, max_leaves=12, min_children=2, max_children=4)
        scores = {p: float(rng.uniform(0, 1)) for p in nested_paths(spec)}
        suite.append((spec, scores))
    return suite


def test_1_dp_optimality(tree_suite):
    start = time.perf_counter()
    mismatches = 0
    for spec, scores in tree_suite:
        root, f = scored_tree(spec, scores)
        if opt_min_seg(root, f).score != brute_force_opt(root, f, "min").score:
            mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 5.0
    assert report(1, ok, f"{mismatches} mismatches on 500 trees, {elapsed:.2f}s (limit 5s)")


def test_2_pruning_neutrality(tree_suite):
    bad_score = bad_visits = 0
    for spec, scores in tree_suite:
        root, f = scored_tree(spec, scores)
        a, b = opt_min_seg(root, f), opt_min_seg(root, f, prune=False)
        bad_score += a.score != b.score
        bad_visits += a.nodes_visited > b.nodes_visited
    ok = bad_score == 0 and bad_visits == 0
    assert report(2, ok, f"{bad_score} score disagreements, {bad_visits} trees with more visits when pruned")


def test_3_counting(tree_suite):
    counts = [count_tree_consistent(balanced_binary(d)) for d in (1, 2, 3, 4)]
    checked = bad = 0
    for spec, _ in tree_suite:
        root = tree_from_nested(spec)
        n = count_tree_consistent(root)
        if n <= 10**4:
            checked += 1
            bad += sum(1 for _ in enumerate_cuts(root)) != n
    ok = counts == [2, 5, 26, 677] and bad == 0 and checked > 0
    assert report(3, ok, f"balanced counts {counts}; {bad} enumeration mismatches over {checked} trees")


def test_4_average_case_witness():
    scores = {(): 0.1, (0,): 0.45, (0, 0): 0.5, (0, 1): 0.5, (0, 2): 0.5, (1,): 1.0}
    root, f = scored_tree([[1, 1, 1], 1], scores)
    greedy = greedy_avg_seg(root, f).score
    oracle = brute_force_opt(root, f, "avg").score
    ok = greedy == 0.625 and oracle == 0.725
    assert report(4, ok, f"greedy {greedy!r}, oracle {oracle!r}")


def test_5_clustering_correctness():
    rng = np.random.default_rng(5)
    bad = cases = 0
    for _ in range(100):
        n = int(rng.integers(1, 301))
        xyz = rng.uniform(0, float(rng.choice([2.0, 5.0, 10.0])), size=(n, 3))
        cloud = PointCloud(xyz)
        for eps in (0.25, 0.5, 1.0, 2.0):
            got = [tuple(s) for s in connected_components(cloud, PointIndexSet(np.arange(n)), eps)]
            cases += 1
            bad += sorted(got) != brute_components(xyz, eps)
    assert report(5, bad == 0, f"{bad} mismatches over {cases} cloud/epsilon pairs")


def test_6_metric_identities():
    rng = np.random.default_rng(6)
    unit_bad = 0
    for _ in range(50):
        n = int(rng.integers(2, 60))
        # signed axis vectors and (0.6, 0.8, 0) rotations have squared range exactly 1
        unit = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0.6, 0.8, 0], [0, 0.6, 0.8], [0.8, 0, 0.6]])
        xyz = unit[rng.integers(0, 6, size=n)] * rng.choice([-1.0, 1.0], size=(n, 1))
        assert ((xyz**2).sum(axis=1) == 1.0).all()
        cloud = PointCloud(xyz)
        labels = rng.integers(-1, 4, size=n)
        labels[0] = 0
        gt = GroundTruth(labels, {int(k): "car" for k in set(labels.tolist()) - {-1}})
        seg = PointIndexSet(np.flatnonzero(rng.random(n) < 0.5))
        unit_bad += weighted_iou(seg, cloud, gt) != vanilla_iou(seg, gt)
    merged = vanilla_iou(PointIndexSet(np.arange(100)), GroundTruth([0] * 99 + [1], {0: "car", 1: "car"}))
    two = GroundTruth([0] * 50 + [1] * 50, {0: "car", 1: "car"})
    merge = under_over(Segmentation.from_labels([0] * 100), two)
    one = GroundTruth([0] * 100, {0: "car"})
    split = under_over(Segmentation.from_labels([0] * 50 + [1] * 50), one)
    ok = (unit_bad == 0 and merged == 0.99
          and (merge.under_error, merge.over_error) == (100.0, 0.0)
          and (split.under_error, split.over_error) == (0.0, 100.0))
    detail = (f"unit-range mismatches {unit_bad}; merged {merged!r}; merge (U,O)=({merge.under_error},"
              f"{merge.over_error}); split (U,O)=({split.under_error},{split.over_error})")
    assert report(6, ok, detail)


def _read_total(csv_path):
    rows = csv_path.read_text().splitlines()
    rec = dict(zip(rows[0].split(","), rows[-1].split(",")))
    return float(rec["under"]), float(rec["over"]), float(rec["worst_iou_mean"])


def test_7_end_to_end_recovery(tmp_path, capsys):
    scenes, seed = [], 0
    while len(scenes) < 50:
        cloud, gt = gen_synthetic(SceneSpec(seed=seed))
        seed += 1
        if is_tree_consistent(build_forest(cloud, DEFAULT_SCHEDULE), gt.segmentation()):
            scenes.append((cloud, gt))
    failures = []
    for k, (cloud, gt) in enumerate(scenes):
        pts, gtp = tmp_path / f"s{k}.bin", tmp_path / f"s{k}.json"
        io.save_points(cloud, pts)
        io.save_gt(gt, gtp, f"s{k}")
        for mode in ("min", "avg"):
            labels, rep = tmp_path / f"s{k}-{mode}.txt", tmp_path / f"s{k}-{mode}.csv"
            rc = main(["segment", "--points", str(pts), "--scorer", "gt-weighted", "--gt", str(gtp),
                       "--mode", mode, "--out", str(labels)])
            rc |= main(["eval", "--pred", str(labels), "--gt", str(gtp), "--points", str(pts), "--out", str(rep)])
            if rc != 0 or _read_total(rep) != (0.0, 0.0, 1.0):
                failures.append((k, mode))
    capsys.readouterr()
    ok = not failures
    with capsys.disabled():
        report(7, ok, f"50 tree-consistent scenes (seeds 0..{seed - 1}), min and avg; failures {failures}")
    assert ok


def test_8_search_beats_fixed_threshold():
    preds = {"min": [], "avg": [], **{f"EC {e}": [] for e in DEFAULT_SCHEDULE}}
    gts = []
    for seed in range(40):
        spec = SceneSpec(seed=seed, num_objects=8, gap_min=0.3, gap_max=1.5, points_min=300, points_max=1500)
        cloud, gt = gen_synthetic(spec)
        forest = build_forest(cloud, DEFAULT_SCHEDULE)
        scorer = MemoScorer(WeightedIoUScorer(cloud, gt))
        preds["min"].append(segment_forest(forest, scorer, "min").segmentation)
        preds["avg"].append(segment_forest(forest, scorer, "avg").segmentation)
        for e in DEFAULT_SCHEDULE:
            preds[f"EC {e}"].append(level_cut(forest, e))
        gts.append(gt)
    totals = {k: evaluate(v, gts, EvalConfig(), worst_iou=False).overall.total for k, v in preds.items()}
    best_ec = min(v for k, v in totals.items() if k.startswith("EC"))
    ok = totals["min"] <= best_ec and totals["avg"] <= best_ec
    detail = ", ".join(f"{k} {v:.1f}" for k, v in totals.items())
    assert report(8, ok, f"total error % over 40 scenes: {detail}")


def test_9_performance():
    spec = SceneSpec(seed=9, num_objects=60, points_min=300, points_max=400, disc_radius=40.0)
    cloud, _ = gen_synthetic(spec)
    start = time.perf_counter()
    forest = build_forest(cloud, DEFAULT_SCHEDULE)
    result = segment_forest(forest, HeuristicScorer(cloud), "min", threads=1)
    elapsed = time.perf_counter() - start
    ok = len(cloud) >= 20000 and elapsed < 2.0 and result.nodes_visited <= forest.node_count()
    detail = (f"{len(cloud)} points in {elapsed:.2f}s (limit 2s); "
              f"visited {result.nodes_visited} of {forest.node_count()} nodes")
    assert report(9, ok, detail)


def test_10_determinism(tmp_path, monkeypatch, capsys):
    frames = []
    for seed in range(3):
        cloud, gt = gen_synthetic(SceneSpec(seed=100 + seed, num_objects=10))
        pts, gtp = tmp_path / f"f{seed}.bin", tmp_path / f"f{seed}.json"
        io.save_points(cloud, pts)
        io.save_gt(gt, gtp, f"f{seed}")
        frames.append((str(pts), str(gtp)))

    def run(tag):
        out = {}
        for mode in ("min", "avg"):
            preds, scores = [], []
            for k, (pts, _) in enumerate(frames):
                labels, sc = tmp_path / f"{tag}-{mode}-{k}.txt", tmp_path / f"{tag}-{mode}-{k}.sc"
                assert main(["segment", "--points", pts, "--mode", mode, "--out", str(labels),
                             "--scores-out", str(sc)]) == 0
                preds.append(str(labels))
                scores.append(str(sc))
                out[labels.name.split("-", 1)[1]] = labels.read_bytes() + sc.read_bytes()
            rep = tmp_path / f"{tag}-{mode}.csv"
            assert main(["eval", "--pred", *preds, "--gt", *[g for _, g in frames], "--points",
                         *[p for p, _ in frames], "--scores", *scores, "--ap", "--range", "20",
                         "--out", str(rep)]) == 0
            out[f"{mode}.csv"] = rep.read_bytes()
        return out

    runs = []
    for tag, threads in (("a", "1"), ("b", "1"), ("c", "4"), ("d", "0")):
        monkeypatch.setenv("TREECUT_THREADS", threads)
        runs.append(run(tag))
    capsys.readouterr()
    differing = sorted({k for r in runs[1:] for k in r if r[k] != runs[0][k]})
    ok = not differing
    with capsys.disabled():
        report(10, ok, f"{len(runs)} runs (TREECUT_THREADS=1,1,4,auto); differing outputs {differing}")
    assert ok
