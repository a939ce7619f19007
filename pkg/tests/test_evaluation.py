from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ap_oracle, under_over_oracle
from treecut.errors import InvalidInputError, InvalidParameterError
from treecut.evaluation import (
    CSV_HEADER,
    EvalConfig,
    average_precision,
    evaluate,
    instance_ap,
    report_csv,
    report_table,
    under_over,
    worst_iou_mean,
    worst_iou_per_frame,
)
from treecut.geometry import Box, GroundTruth, PointCloud, Segmentation


def labels_seg(labels):
    return Segmentation.from_labels(np.asarray(labels))


def gt_of(labels, cls="car", **kw):
    labels = np.asarray(labels)
    ids = sorted(set(labels.tolist()) - {-1})
    return GroundTruth(labels, {i: cls for i in ids}, **kw)


def test_perfect_prediction():
    gt = gt_of([0] * 5 + [1] * 7 + [2] * 3)
    r = under_over(gt.segmentation(), gt)
    assert (r.under_error, r.over_error, r.total) == (0.0, 0.0, 0.0)


def test_merge_gives_full_under():
    gt = gt_of([0] * 50 + [1] * 50)
    r = under_over(labels_seg([0] * 100), gt)
    assert (r.under_error, r.over_error) == (100.0, 0.0)


def test_split_gives_full_over():
    gt = gt_of([0] * 100)
    r = under_over(labels_seg([0] * 50 + [1] * 50), gt)
    assert (r.under_error, r.over_error) == (0.0, 100.0)


def test_purity_threshold_boundary():
    # purity exactly 2/3 is not an under-segmentation
    gt = gt_of([0, 0, 1])
    r = under_over(labels_seg([0, 0, 0]), gt, EvalConfig(tau_u=2 / 3))
    assert r.overall.under_count == 1  # object 0 ok (2/3), object 1 impure (1/3)


def test_ties_go_to_lowest_segment():
    # object 0 has two points in each of two segments; the first one is impure
    tie = gt_of([0, 0, 1, 1, 1, 1, 0, 0])
    r = under_over(labels_seg([0, 0, 0, 0, 0, 0, 1, 1]), tie)
    outcome = [o for o in r.outcomes if o.instance == 0][0]
    assert outcome.under and outcome.over


@st.composite
def frames(draw):
    n = draw(st.integers(1, 30))
    k = draw(st.integers(1, 4))
    gt = draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    pred = draw(st.lists(st.integers(0, 5), min_size=n, max_size=n))
    return gt, pred


@settings(max_examples=200)
@given(frames(), st.randoms(use_true_random=False))
def test_under_over_matches_oracle_and_ignores_order(frame, rnd):
    gt_labels, pred_labels = frame
    gt = gt_of(gt_labels)
    pred = labels_seg(pred_labels).canonical()
    r = under_over(pred, gt)
    inst = {i: {p for p, l in enumerate(gt_labels) if l == i} for i in gt.instances}
    u, o = under_over_oracle([list(s) for s in pred], inst)
    assert r.under_error == pytest.approx(float(u), abs=1e-12)
    assert r.over_error == pytest.approx(float(o), abs=1e-12)
    assert 0 <= r.under_error <= 100 and 0 <= r.over_error <= 100
    shuffled = list(pred.segments)
    rnd.shuffle(shuffled)
    s = under_over(Segmentation(tuple(shuffled)), gt)
    assert (s.under_error, s.over_error) == (r.under_error, r.over_error)


def test_universe_mismatch():
    gt = gt_of([0, 0, 1])
    with pytest.raises(InvalidInputError):
        under_over(labels_seg([0, 0]), gt)
    with pytest.raises(InvalidInputError):
        evaluate([labels_seg([0, 0, 0])], [gt, gt])


def test_config_validation():
    for kw in ({"tau_u": 0}, {"tau_o": 1.5}, {"overlap_mode": "x"}, {"ap_iou_thresholds": (0.7, 0.5)},
               {"range_filter_m": -1}):
        with pytest.raises(InvalidParameterError):
            EvalConfig(**kw)
    assert EvalConfig().ap_iou_thresholds == tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


def test_overlap_modes():
    # objects 0 and 1 overlap; their shared points are labelled -1
    labels = [0, 0, 0, -1, 1, 1, 2, 2]
    gt = gt_of(labels, overlapping={0, 1})
    pred = labels_seg([0, 0, 0, 0, 0, 0, 1, 1])
    skip = under_over(pred, gt, EvalConfig(overlap_mode="skip_objects"))
    region = under_over(pred, gt, EvalConfig(overlap_mode="ignore_region"))
    assert skip.overall.objects == 1 and skip.skipped_overlap == 2
    assert region.overall.objects == 3 and region.skipped_overlap == 0
    assert region.overall.under_count == 2


@settings(max_examples=100)
@given(frames())
def test_modes_agree_without_overlaps(frame):
    gt_labels, pred_labels = frame
    gt, pred = gt_of(gt_labels), labels_seg(pred_labels)
    a = under_over(pred, gt, EvalConfig(overlap_mode="skip_objects"))
    b = under_over(pred, gt, EvalConfig(overlap_mode="ignore_region"))
    assert a.outcomes == b.outcomes


def test_objects_without_points_are_skipped():
    gt = GroundTruth([0, 0, -1], {0: "car", 1: "van"})
    r = under_over(labels_seg([0, 0, 1]), gt)
    assert r.overall.objects == 1 and r.skipped_empty == 1
    empty = under_over(labels_seg([0]), GroundTruth([-1], {}))
    assert empty.overall.objects == 0 and math.isnan(empty.total)


def test_range_filter_uses_box_center_then_centroid():
    labels = [0, 0, 1, 1]
    xyz = np.array([[14, 0, 0], [14.5, 0, 0], [16, 0, 0], [16, 1, 0]], dtype=float)
    boxes = (Box("car", (20.0, 0, 0), (1, 1, 1)), Box("car", (3.0, 0, 0), (1, 1, 1)))
    cfg = EvalConfig(range_filter_m=15)
    with_boxes = evaluate([labels_seg([0, 0, 1, 1])], [gt_of(labels, boxes=boxes)], cfg, clouds=[PointCloud(xyz)])
    assert [o.in_range for o in with_boxes.outcomes] == [False, True]
    no_boxes = evaluate([labels_seg([0, 0, 1, 1])], [gt_of(labels)], cfg, clouds=[PointCloud(xyz)])
    assert [o.in_range for o in no_boxes.outcomes] == [True, False]
    assert no_boxes.overall_in_range.objects == 1
    with pytest.raises(InvalidInputError):
        evaluate([labels_seg([0, 0, 1, 1])], [gt_of(labels)], cfg)


def test_per_class_breakdown():
    gt = GroundTruth([0, 0, 1, 1, 2, 2], {0: "car", 1: "car", 2: "pedestrian"})
    r = under_over(labels_seg([0, 0, 0, 0, 1, 2]), gt)
    assert r.per_class["car"].under == 100.0 and r.per_class["pedestrian"].over == 100.0
    assert r.overall.objects == 3


def test_worst_iou_perfect_frame():
    gt = gt_of([0] * 4 + [1] * 6)
    assert worst_iou_mean([gt.segmentation()], [gt]) == 1.0


def test_worst_iou_min_of_best():
    # segment {0..3} equals object 0 (IoU 1.0); segment {4, 5} covers
    # 2 of object 1's 5 points (IoU 0.4)
    gt = gt_of([0] * 4 + [1] * 5)
    pred = labels_seg([0, 0, 0, 0, 1, 1, 2, 2, 2])
    assert worst_iou_per_frame([pred], [gt]) == [pytest.approx(0.4)]


def test_worst_iou_ignores_unlabelled_points_and_averages_frames():
    gt = gt_of([0] * 3 + [1] * 5 + [-1] * 3)
    pred = labels_seg([0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1])
    assert worst_iou_per_frame([pred], [gt]) == [1.0]
    gt2 = gt_of([0] * 2 + [1] * 5)
    frames_ = [labels_seg([0, 0, 1, 1, 1, 1, 1]), labels_seg([0, 0, 1, 2, 2, 2, 2])]
    assert worst_iou_mean(frames_, [gt2, gt2]) == pytest.approx((1 + 0.2) / 2)


def test_worst_iou_skips_empty_frames(caplog):
    gt = gt_of([0, 0])
    empty = GroundTruth([-1, -1], {})
    assert worst_iou_per_frame([labels_seg([0, 0])], [empty]) == [None]
    assert worst_iou_mean([labels_seg([0, 0]), labels_seg([0, 0])], [gt, empty]) == 1.0
    assert "skipped 1" in caplog.text


@settings(max_examples=150)
@given(frames())
def test_worst_iou_bounds_and_identity(frame):
    gt_labels, pred_labels = frame
    gt, pred = gt_of(gt_labels), labels_seg(pred_labels)
    v = worst_iou_mean([pred], [gt])
    assert 0.0 <= v <= 1.0
    exact = pred.as_sets() <= gt.segmentation().as_sets()
    assert (v == 1.0) == exact


def test_ap_perfect():
    gt = gt_of([0] * 3 + [1] * 4 + [2] * 2)
    table = instance_ap([(gt.segmentation(), [0.3, 0.9, 0.5])], [gt])
    assert table.agnostic == (1.0,) * 10 and table.agnostic_mean == 1.0


def test_ap_hand_curves():
    # match at rank 1, false positive at rank 2, one object
    assert average_precision(np.array([True, False]), 1) == 1.0
    assert average_precision(np.array([False]), 1) == 0.0
    assert average_precision(np.array([], dtype=bool), 3) == 0.0
    assert math.isnan(average_precision(np.array([True]), 0))
    assert average_precision(np.array([False, True]), 1) == 0.5


def test_ap_end_to_end_small_scene():
    # X = 0..5, Y = 6..9, points 10, 11 ignored
    gt = gt_of([0] * 6 + [1] * 4 + [-1] * 2)
    pred = labels_seg([0] * 10 + [1] * 2)
    table = instance_ap([(pred, [0.9, 0.8])], [gt], EvalConfig(ap_iou_thresholds=(0.5, 0.65)))
    # IoU(A, X) = 0.6: matched at 0.5 (recall 1/2 at precision 1), missed at 0.65
    assert table.agnostic == (0.5, 0.0)


def test_ap_missing_confidences():
    gt = gt_of([0, 0])
    with pytest.raises(InvalidInputError):
        instance_ap([(labels_seg([0, 1]), [0.5])], [gt])
    with pytest.raises(InvalidInputError):
        instance_ap([(labels_seg([0, 1]), None)], [gt])
    with pytest.raises(InvalidInputError):
        instance_ap([(labels_seg([0, 0]), [1.5])], [gt])


def _ap_reference(frames_, threshold):
    """Greedy confidence-ordered matching over plain sets."""
    ranked = []
    objects = {}
    for f, (gt_labels, pred_labels, conf) in enumerate(frames_):
        inst = {}
        for p, l in enumerate(gt_labels):
            if l >= 0:
                inst.setdefault(l, set()).add(p)
        for l, m in inst.items():
            objects[(f, l)] = m
        segs = {}
        for p, s in enumerate(pred_labels):
            segs.setdefault(s, set()).add(p)
        labelled = set().union(*inst.values()) if inst else set()
        for k, s in enumerate(sorted(segs)):
            if segs[s] & labelled:
                ranked.append((-conf[k], f, k, segs[s] & labelled))
    ranked.sort(key=lambda r: r[:3])
    matched = set()
    hits = []
    for _, f, _, seg in ranked:
        best = None
        for (ff, l), m in sorted(objects.items()):
            if ff != f or (ff, l) in matched:
                continue
            iou = Fraction(len(seg & m), len(seg | m))
            if iou >= Fraction(threshold).limit_denominator(1000) and (best is None or iou > best[0]):
                best = (iou, (ff, l))
        if best:
            matched.add(best[1])
        hits.append(best is not None)
    return ap_oracle(hits, len(objects))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(frames(), st.lists(st.floats(0, 1), min_size=6, max_size=6)), min_size=1, max_size=3))
def test_ap_matches_reference(data):
    frames_ = []
    preds, gts = [], []
    for (gt_labels, pred_labels), conf in data:
        pred = labels_seg(pred_labels)
        conf = conf[: len(pred)]
        frames_.append((gt_labels, pred_labels, conf))
        preds.append((pred, conf))
        gts.append(gt_of(gt_labels))
    cfg = EvalConfig(ap_iou_thresholds=(0.5, 0.75))
    table = instance_ap(preds, gts, cfg)
    for t, got in zip(cfg.ap_iou_thresholds, table.agnostic):
        ref = _ap_reference(frames_, t)
        assert got == pytest.approx(float(ref), abs=1e-12)
    assert table.agnostic[0] >= table.agnostic[1]


@settings(max_examples=100)
@given(frames(), st.lists(st.floats(0, 1), min_size=6, max_size=6))
def test_ap_non_increasing_in_threshold(frame, conf):
    gt_labels, pred_labels = frame
    pred = labels_seg(pred_labels)
    table = instance_ap([(pred, conf[: len(pred)])], [gt_of(gt_labels)])
    assert all(b <= a for a, b in zip(table.agnostic, table.agnostic[1:]))


def test_report_formats():
    gt = GroundTruth([0, 0, 1, 1, 2], {0: "car", 1: "car", 2: "cyclist"})
    pred = labels_seg([0, 0, 0, 0, 1])
    rep = evaluate([pred], [gt], EvalConfig(range_filter_m=15), clouds=[PointCloud(np.ones((5, 3)))],
                   confidences=[[0.9, 0.4]])
    csv_text = report_csv(rep)
    lines = csv_text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1].startswith("car,2,100.0000,0.0000,100.0000,2,")
    assert lines[-1].startswith("ALL,3,66.6667,0.0000,66.6667,3,")
    assert "worst_iou_mean" in report_table(rep)
