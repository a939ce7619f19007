"""Segmentation evaluation: under/over-segmentation error, worst IoU, and
class-agnostic per-point instance AP."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, InvalidParameterError
from .geometry import GroundTruth, PointCloud, Segmentation, validate_segmentation
from .parallel import pmap

log = logging.getLogger(__name__)

OVERLAP_MODES = ("skip_objects", "ignore_region")
DEFAULT_AP_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass(frozen=True)
class EvalConfig:
    tau_u: float = 2 / 3
    tau_o: float = 1.0
    range_filter_m: float | None = None
    overlap_mode: str = "skip_objects"
    ap_iou_thresholds: tuple[float, ...] = DEFAULT_AP_THRESHOLDS

    def __post_init__(self):
        if not 0 < self.tau_u <= 1:
            raise InvalidParameterError("tau_u must lie in (0, 1]")
        if not 0 < self.tau_o <= 1:
            raise InvalidParameterError("tau_o must lie in (0, 1]")
        if self.range_filter_m is not None and not self.range_filter_m > 0:
            raise InvalidParameterError("range filter must be positive")
        if self.overlap_mode not in OVERLAP_MODES:
            raise InvalidParameterError(f"overlap_mode must be one of {OVERLAP_MODES}")
        th = tuple(float(t) for t in self.ap_iou_thresholds)
        if not th or any(not 0 < t <= 1 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise InvalidParameterError("AP thresholds must be strictly increasing in (0, 1]")
        object.__setattr__(self, "ap_iou_thresholds", th)


@dataclass(frozen=True)
class ErrorStats:
    objects: int
    under_count: int
    over_count: int

    @property
    def under(self) -> float:
        return 100.0 * self.under_count / self.objects if self.objects else math.nan

    @property
    def over(self) -> float:
        return 100.0 * self.over_count / self.objects if self.objects else math.nan

    @property
    def total(self) -> float:
        return self.under + self.over


@dataclass(frozen=True)
class ObjectOutcome:
    frame: int
    instance: int
    cls: str
    under: bool
    over: bool
    in_range: bool | None


@dataclass(frozen=True)
class APTable:
    thresholds: tuple[float, ...]
    agnostic: tuple[float, ...]
    per_class: dict[str, tuple[float, ...]]

    @property
    def agnostic_mean(self) -> float:
        return _nanmean(self.agnostic)

    def class_ap(self, cls: str) -> float:
        return _nanmean(self.per_class[cls])

    @property
    def map(self) -> float:
        """Mean over thresholds, then over classes."""
        return _nanmean([self.class_ap(c) for c in self.per_class])


@dataclass(frozen=True)
class EvalReport:
    overall: ErrorStats
    per_class: dict[str, ErrorStats]
    overall_in_range: ErrorStats | None = None
    per_class_in_range: dict[str, ErrorStats] | None = None
    worst_iou_mean: float | None = None
    ap: APTable | None = None
    skipped_overlap: int = 0
    skipped_empty: int = 0
    frames_skipped_worst_iou: int = 0
    outcomes: tuple[ObjectOutcome, ...] = field(default=(), repr=False)

    @property
    def under_error(self) -> float:
        return self.overall.under

    @property
    def over_error(self) -> float:
        return self.overall.over

    @property
    def total(self) -> float:
        return self.overall.total


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else math.nan


def _labels_for(pred: Segmentation, n: int) -> np.ndarray:
    bad = validate_segmentation(pred, n)
    if bad is not None:
        raise InvalidInputError(f"prediction is not a partition of {n} points: {bad}")
    return pred.to_labels(n)


def _contingency(labels: np.ndarray, inst: np.ndarray, nseg: int, ninst: int):
    """Sparse intersection counts between predicted segments and instances.

    Returns (seg, instance, count) arrays over pairs with a non-zero
    intersection, sorted by (seg, instance), plus per-segment and
    per-instance sizes. Points with instance < 0 are left out entirely.
    """
    valid = inst >= 0
    lab = labels[valid]
    ins = inst[valid]
    codes = lab * max(ninst, 1) + ins
    uniq, counts = np.unique(codes, return_counts=True)
    seg_idx = uniq // max(ninst, 1)
    inst_idx = uniq % max(ninst, 1)
    seg_size = np.bincount(lab, minlength=nseg)
    inst_size = np.bincount(ins, minlength=ninst)
    return seg_idx, inst_idx, counts, seg_size, inst_size


def _effective_instances(gt: GroundTruth, cfg: EvalConfig) -> np.ndarray:
    inst = gt.instance_id
    if cfg.overlap_mode == "skip_objects" and gt.overlapping:
        inst = inst.copy()
        inst[np.isin(inst, list(gt.overlapping))] = -1
    return inst


def _object_center(gt: GroundTruth, inst: int, cloud: PointCloud | None) -> np.ndarray:
    if gt.boxes is not None and inst < len(gt.boxes):
        return np.asarray(gt.boxes[inst].center, dtype=np.float64)
    if cloud is None:
        raise InvalidInputError("range filtering without boxes needs the point cloud")
    members = np.flatnonzero(gt.instance_id == inst)
    return cloud.xyz[members].mean(axis=0)


def frame_outcomes(
    pred: Segmentation,
    gt: GroundTruth,
    cfg: EvalConfig,
    cloud: PointCloud | None = None,
    frame: int = 0,
) -> tuple[list[ObjectOutcome], int, int]:
    """Per-object under/over flags for one frame.

    Returns the outcomes plus the number of objects skipped for overlapping
    boxes and for having no points left.
    """
    n = len(gt)
    labels = _labels_for(pred, n)
    inst = gt.instance_id
    ninst = max(gt.instances, default=-1) + 1
    seg_idx, inst_idx, counts, seg_size, inst_size = _contingency(labels, inst, len(pred), ninst)

    # best segment per instance: max count; ties go to the segment holding the
    # lowest point index, which is the lowest segment index in canonical order
    # and keeps the result independent of how segments are listed
    seg_first = np.array([s.first for s in pred.segments], dtype=np.int64)
    order = np.lexsort((seg_first[seg_idx], -counts, inst_idx))
    first = np.ones(order.size, dtype=bool)
    first[1:] = inst_idx[order][1:] != inst_idx[order][:-1]
    best = order[first]
    best_seg = dict(zip(inst_idx[best].tolist(), zip(seg_idx[best].tolist(), counts[best].tolist())))

    outcomes: list[ObjectOutcome] = []
    skipped_overlap = skipped_empty = 0
    for l in gt.instances:
        if cfg.overlap_mode == "skip_objects" and l in gt.overlapping:
            skipped_overlap += 1
            continue
        size = int(inst_size[l]) if l < inst_size.size else 0
        if size == 0:
            skipped_empty += 1
            continue
        if l in best_seg:
            i_star, inter = best_seg[l]
            under = inter / int(seg_size[i_star]) < cfg.tau_u
            over = inter / size < cfg.tau_o
        else:
            under = over = True
        in_range = None
        if cfg.range_filter_m is not None:
            c = _object_center(gt, l, cloud)
            in_range = bool(math.sqrt(float(c @ c)) <= cfg.range_filter_m)
        outcomes.append(ObjectOutcome(frame, l, gt.class_of_instance[l], bool(under), bool(over), in_range))
    return outcomes, skipped_overlap, skipped_empty


def _stats(outcomes: Sequence[ObjectOutcome]) -> ErrorStats:
    return ErrorStats(len(outcomes), sum(o.under for o in outcomes), sum(o.over for o in outcomes))


def _by_class(outcomes: Sequence[ObjectOutcome]) -> dict[str, ErrorStats]:
    classes = sorted({o.cls for o in outcomes})
    return {c: _stats([o for o in outcomes if o.cls == c]) for c in classes}


def under_over(
    pred: Segmentation,
    gt: GroundTruth,
    cfg: EvalConfig | None = None,
    cloud: PointCloud | None = None,
) -> EvalReport:
    """Under/over-segmentation errors (percent) for a single frame."""
    return evaluate([pred], [gt], cfg, clouds=[cloud], worst_iou=False)


def _iou_pairs(pred: Segmentation, inst: np.ndarray, ninst: int):
    labels = pred.to_labels(inst.shape[0])
    seg_idx, inst_idx, counts, seg_size, inst_size = _contingency(labels, inst, len(pred), ninst)
    union = seg_size[seg_idx] + inst_size[inst_idx] - counts
    return seg_idx, inst_idx, counts / union, seg_size, inst_size


def worst_iou_per_frame(preds: Sequence[Segmentation], gts: Sequence[GroundTruth]) -> list[float | None]:
    """Per frame: the smallest, over predicted segments, of each segment's best
    IoU against any ground-truth instance. ``None`` marks a skipped frame."""
    if len(preds) != len(gts):
        raise InvalidInputError("need one ground truth per prediction")
    out: list[float | None] = []
    for pred, gt in zip(preds, gts):
        inst = gt.instance_id
        ninst = max(gt.instances, default=-1) + 1
        _labels_for(pred, len(gt))
        seg_idx, _, iou, seg_size, inst_size = _iou_pairs(pred, inst, ninst)
        scored = np.flatnonzero(seg_size > 0)
        if len(pred) == 0 or scored.size == 0 or not (inst_size > 0).any():
            out.append(None)
            continue
        best = np.zeros(len(pred))
        np.maximum.at(best, seg_idx, iou)
        out.append(float(best[scored].min()))
    return out


def worst_iou_mean(preds: Sequence[Segmentation], gts: Sequence[GroundTruth]) -> float:
    per = worst_iou_per_frame(preds, gts)
    kept = [v for v in per if v is not None]
    skipped = len(per) - len(kept)
    if skipped:
        log.warning("worst IoU: skipped %d empty frame(s)", skipped)
    return math.fsum(kept) / len(kept) if kept else math.nan


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """Area under the all-point interpolated precision/recall curve."""
    if n_gt == 0:
        return math.nan
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    recall = ctp / n_gt
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def instance_ap(
    preds: Sequence[tuple[Segmentation, Sequence[float]]],
    gts: Sequence[GroundTruth],
    cfg: EvalConfig | None = None,
) -> APTable:
    """Class-agnostic, per-point instance AP over all frames.

    Predictions are ranked by confidence (ties by frame, then segment index).
    At each IoU threshold a prediction is matched to the unmatched ground
    truth object of its frame with the highest IoU at or above the
    threshold. For per-class AP a matched prediction takes the class of its
    match and an unmatched one the class of its best-overlapping object
    (predictions touching no retained object are left out).
    """
    cfg = cfg or EvalConfig()
    if len(preds) != len(gts):
        raise InvalidInputError("need one ground truth per prediction")

    entries = []  # (confidence, frame, segment)
    frame_pairs = []  # per frame: {segment: [(iou, instance)]}
    gt_class: dict[tuple[int, int], str] = {}
    n_gt_class: dict[str, int] = {}
    for f, ((seg, conf), gt) in enumerate(zip(preds, gts)):
        if conf is None or len(conf) != len(seg):
            raise InvalidInputError(f"frame {f}: every predicted segment needs a confidence")
        conf = [float(c) for c in conf]
        if any(not 0.0 <= c <= 1.0 for c in conf):
            raise InvalidInputError(f"frame {f}: confidences must lie in [0, 1]")
        _labels_for(seg, len(gt))
        inst = _effective_instances(gt, cfg)
        ninst = max(gt.instances, default=-1) + 1
        seg_idx, inst_idx, iou, seg_size, inst_size = _iou_pairs(seg, inst, ninst)
        pairs: dict[int, list[tuple[float, int]]] = {}
        for s, l, v in zip(seg_idx.tolist(), inst_idx.tolist(), iou.tolist()):
            pairs.setdefault(s, []).append((v, l))
        frame_pairs.append(pairs)
        for l in np.flatnonzero(inst_size > 0).tolist():
            c = gt.class_of_instance[l]
            gt_class[(f, l)] = c
            n_gt_class[c] = n_gt_class.get(c, 0) + 1
        for s in range(len(seg)):
            if seg_size[s] > 0:
                entries.append((-conf[s], f, s))
    entries.sort()
    n_gt = len(gt_class)

    best_class = []
    for _, f, s in entries:
        cand = frame_pairs[f].get(s, [])
        if cand:
            v, l = max(cand, key=lambda p: (p[0], -p[1]))
            best_class.append(gt_class[(f, l)])
        else:
            best_class.append(None)

    agnostic = []
    per_class: dict[str, list[float]] = {c: [] for c in sorted(n_gt_class)}
    for t in cfg.ap_iou_thresholds:
        matched: set[tuple[int, int]] = set()
        tp = np.zeros(len(entries), dtype=bool)
        cls_of = list(best_class)
        for k, (_, f, s) in enumerate(entries):
            options = [(v, l) for v, l in frame_pairs[f].get(s, []) if v >= t and (f, l) not in matched]
            if options:
                v, l = max(options, key=lambda p: (p[0], -p[1]))
                matched.add((f, l))
                tp[k] = True
                cls_of[k] = gt_class[(f, l)]
        agnostic.append(average_precision(tp, n_gt))
        for c in per_class:
            sel = np.array([x == c for x in cls_of], dtype=bool)
            per_class[c].append(average_precision(tp[sel], n_gt_class[c]))

    return APTable(
        tuple(cfg.ap_iou_thresholds),
        tuple(agnostic),
        {c: tuple(v) for c, v in per_class.items()},
    )


def evaluate(
    preds: Sequence[Segmentation],
    gts: Sequence[GroundTruth],
    cfg: EvalConfig | None = None,
    *,
    clouds: Sequence[PointCloud | None] | None = None,
    confidences: Sequence[Sequence[float]] | None = None,
    worst_iou: bool = True,
    threads: int | None = None,
) -> EvalReport:
    """Pool every retained object of every frame into one report."""
    cfg = cfg or EvalConfig()
    if len(preds) != len(gts):
        raise InvalidInputError("need one ground truth per prediction")
    clouds = list(clouds) if clouds is not None else [None] * len(preds)
    if len(clouds) != len(preds):
        raise InvalidInputError("need one cloud per prediction")
    for f, (p, g) in enumerate(zip(preds, gts)):
        if clouds[f] is not None and len(clouds[f]) != len(g):
            raise InvalidInputError(f"frame {f}: cloud and ground truth sizes differ")

    frames = pmap(
        lambda f: frame_outcomes(preds[f], gts[f], cfg, clouds[f], f),
        list(range(len(preds))),
        threads,
    )
    outcomes = [o for fo, _, _ in frames for o in fo]
    report = dict(
        overall=_stats(outcomes),
        per_class=_by_class(outcomes),
        skipped_overlap=sum(s for _, s, _ in frames),
        skipped_empty=sum(e for _, _, e in frames),
        outcomes=tuple(outcomes),
    )
    if cfg.range_filter_m is not None:
        near = [o for o in outcomes if o.in_range]
        report["overall_in_range"] = _stats(near)
        report["per_class_in_range"] = _by_class(near)
    if worst_iou:
        per = worst_iou_per_frame(preds, gts)
        kept = [v for v in per if v is not None]
        report["worst_iou_mean"] = math.fsum(kept) / len(kept) if kept else math.nan
        report["frames_skipped_worst_iou"] = len(per) - len(kept)
    if confidences is not None:
        report["ap"] = instance_ap(list(zip(preds, confidences)), gts, cfg)
    return EvalReport(**report)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


CSV_HEADER = [
    "class", "objects", "under", "over", "total",
    "range_objects", "range_under", "range_over", "range_total",
    "ap", "worst_iou_mean", "skipped_overlap", "skipped_empty",
]


def report_rows(report: EvalReport) -> list[list[str]]:
    rows = []
    names = sorted(report.per_class)
    for name in names + ["ALL"]:
        if name == "ALL":
            st, near = report.overall, report.overall_in_range
            ap = report.ap.map if report.ap else None
            extra = [report.worst_iou_mean, report.skipped_overlap, report.skipped_empty]
        else:
            st = report.per_class[name]
            near = None
            if report.per_class_in_range is not None:
                near = report.per_class_in_range.get(name, ErrorStats(0, 0, 0))
            ap = None
            if report.ap and name in report.ap.per_class:
                ap = report.ap.class_ap(name)
            extra = [None, None, None]
        rng = [near.objects, near.under, near.over, near.total] if near else [None] * 4
        rows.append([name, st.objects, st.under, st.over, st.total, *rng, ap, *extra])
    return [[_fmt(v) for v in r] for r in rows]


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(report_rows(report))
    return buf.getvalue()


def report_table(report: EvalReport) -> str:
    rows = [CSV_HEADER[:5] + ["range_total", "ap"]]
    for r in report_rows(report):
        rows.append(r[:5] + [r[8], r[9]])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.append(
        f"worst_iou_mean={_fmt(report.worst_iou_mean)}  "
        f"skipped_overlap={report.skipped_overlap}  skipped_empty={report.skipped_empty}"
    )
    if report.ap is not None:
        lines.append(f"class-agnostic AP={_fmt(report.ap.agnostic_mean)}  mAP={_fmt(report.ap.map)}")
    return "\n".join(lines)
