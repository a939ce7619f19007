"""Command-line interface: ``treecut <command> [flags]``.

Exit status is 0 on success, 2 when inputs or parameters fail validation
and 1 on I/O or file-format errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io
from .errors import FormatError, TreecutError
from .evaluation import EvalConfig, evaluate, report_csv, report_table
from .geometry import Segmentation, validate_segmentation
from .hierarchy import (
    DEFAULT_SCHEDULE,
    SCHEDULE_PRESETS,
    build_forest,
    count_forest_cuts,
    level_nodes,
)
from .objectness import (
    HeuristicParams,
    HeuristicScorer,
    MemoScorer,
    ScoreCache,
    export_training_pairs,
    make_scorer,
)
from .search import segment_forest
from .synthetic import SceneSpec, gen_synthetic

log = logging.getLogger("treecut")


class UsageError(TreecutError):
    """Bad flag combination detected after parsing."""


def parse_schedule(text: str) -> tuple[float, ...]:
    if text in SCHEDULE_PRESETS:
        return tuple(SCHEDULE_PRESETS[text])
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated metres or a preset ({', '.join(SCHEDULE_PRESETS)})"
        ) from None


def _load_cloud(args):
    return io.load_points(args.points, frame_id=getattr(args, "frame_id", None))


def _forest(args, cloud):
    if getattr(args, "forest", None):
        forest = io.load_forest(args.forest)
        if forest.cloud_size != len(cloud):
            raise UsageError(f"forest covers {forest.cloud_size} points but the cloud has {len(cloud)}")
        return forest
    return build_forest(cloud, args.epsilons or DEFAULT_SCHEDULE)


def _params(args):
    if getattr(args, "heuristic_config", None):
        return HeuristicParams.from_json(args.heuristic_config)
    return HeuristicParams()


def _scorer(args, cloud):
    gt = io.load_gt(args.gt) if args.gt else None
    if gt is not None and len(gt) != len(cloud):
        raise UsageError(f"ground truth has {len(gt)} points but the cloud has {len(cloud)}")
    spec = args.scorer
    params = _params(args)
    if spec.startswith("file:"):
        cache = ScoreCache.load(spec[5:], cloud_id=cloud.frame_id)
        return make_scorer("file_cache", cloud, gt, params=params, cache=cache, fallback=args.fallback)
    if spec not in ("heuristic", "gt-vanilla", "gt-weighted"):
        raise UsageError(f"unknown scorer {spec!r}")
    return make_scorer(spec, cloud, gt, params=params)


def cmd_build_tree(args) -> int:
    cloud = _load_cloud(args)
    forest = build_forest(cloud, args.epsilons)
    io.save_forest(forest, args.out)
    print(f"{len(forest.trees)} trees, {forest.node_count()} nodes")
    return 0


def cmd_segment(args) -> int:
    cloud = _load_cloud(args)
    forest = _forest(args, cloud)
    scorer = MemoScorer(_scorer(args, cloud))
    result = segment_forest(forest, scorer, args.mode, threads=args.threads)
    io.save_labels(result.segmentation, len(cloud), args.out)
    if args.scores_out:
        io.save_scores(result.segment_scores, args.scores_out)
    print(
        f"segments={len(result.segmentation)} score={result.score!r} "
        f"visited={result.nodes_visited} nodes={forest.node_count()}"
    )
    return 0


def cmd_baseline(args) -> int:
    cloud = _load_cloud(args)
    forest = build_forest(cloud, args.epsilons)
    nodes = level_nodes(forest, args.level)
    seg = Segmentation(tuple(n.points for n in nodes))
    io.save_labels(seg, len(cloud), args.out)
    if args.scores_out:
        scorer = HeuristicScorer(cloud, _params(args))
        io.save_scores([scorer(n.points) for n in nodes], args.scores_out)
    print(f"segments={len(seg)}")
    return 0


def _pad(values, n, flag):
    if not values:
        return [None] * n
    if len(values) != n:
        raise UsageError(f"{flag} needs one file per --pred")
    return values


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.gt):
        raise UsageError("--pred and --gt need the same number of files")
    n = len(args.pred)
    points = _pad(args.points, n, "--points")
    scores = _pad(args.scores, n, "--scores")
    preds, gts, clouds, confs = [], [], [], []
    for k in range(n):
        gt = io.load_gt(args.gt[k])
        pred = io.load_labels(args.pred[k])
        bad = validate_segmentation(pred, len(gt))
        if bad is not None:
            raise UsageError(f"{args.pred[k]}: {bad.message}")
        preds.append(pred)
        gts.append(gt)
        clouds.append(io.load_points(points[k]) if points[k] else None)
        if args.ap:
            # without a scores file every segment gets the same confidence
            confs.append(io.load_scores(scores[k], len(pred)) if scores[k] else [1.0] * len(pred))
    cfg = EvalConfig(
        tau_u=args.tau_u,
        tau_o=args.tau_o,
        range_filter_m=args.range,
        overlap_mode={"skip": "skip_objects", "region": "ignore_region"}[args.overlap],
    )
    report = evaluate(preds, gts, cfg, clouds=clouds, confidences=confs if args.ap else None, threads=args.threads)
    if args.out:
        io.atomic_write(args.out, report_csv(report))
    print(report_table(report))
    return 0


def cmd_export_training(args) -> int:
    cloud = _load_cloud(args)
    gt = io.load_gt(args.gt)
    if len(gt) != len(cloud):
        raise UsageError(f"ground truth has {len(gt)} points but the cloud has {len(cloud)}")
    forest = build_forest(cloud, args.epsilons)
    lines = [p.to_line() + "\n" for p in export_training_pairs(forest, cloud, gt, args.target)]
    io.atomic_write(args.out, "".join(lines))
    print(f"{len(lines)} pairs")
    return 0


def cmd_count_cuts(args) -> int:
    print(count_forest_cuts(io.load_forest(args.forest)))
    return 0


def cmd_gen_synthetic(args) -> int:
    spec = SceneSpec(
        seed=args.seed,
        num_objects=args.objects,
        points_min=args.points_min,
        points_max=args.points_max,
        gap_min=args.gap_min,
        gap_max=args.gap_max,
        disc_radius=args.disc_radius,
        range_density=args.range_density,
    )
    cloud, gt = gen_synthetic(spec)
    io.save_points(cloud, args.out_points)
    io.save_gt(gt, args.out_gt, Path(args.out_points).stem)
    if args.out_boxes:
        io.save_boxes(gt.boxes, args.out_boxes)
    print(f"{len(cloud)} points, {len(gt.instances)} objects")
    return 0


def cmd_crop(args) -> int:
    cloud = io.load_points(args.points)
    boxes = io.load_boxes(args.boxes)
    fg, gt, stats = io.crop_and_label(cloud, boxes)
    io.save_points(fg, args.out_points)
    io.save_gt(gt, args.out_gt, Path(args.out_points).stem)
    print(
        f"kept={stats.kept} dropped={stats.dropped} overlap_points={stats.overlap_points} "
        f"overlapping_objects={stats.overlapping_objects}"
    )
    return 0


def cmd_build_cache(args) -> int:
    cloud = _load_cloud(args)
    forest = _forest(args, cloud)
    scorer = _scorer(args, cloud)
    cache = ScoreCache.from_segments([(n.points, scorer(n.points)) for n in forest.iter_nodes()], cloud.frame_id)
    io.atomic_write(args.out, "".join(line + "\n" for line in cache.lines()))
    print(f"{len(cache.entries)} entries")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treecut", description="Point-cloud instance segmentation over a clustering hierarchy.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: TREECUT_THREADS or all cores)")
    sub = p.add_subparsers(dest="command", required=True)
    schedule_help = f"comma-separated thresholds in metres or a preset: {', '.join(SCHEDULE_PRESETS)}"

    def cloud_args(c, schedule_required=True):
        c.add_argument("--points", required=True)
        c.add_argument("--frame-id", help="cloud id used in score-cache keys (default: file stem)")
        c.add_argument("--epsilons", type=parse_schedule, required=schedule_required, help=schedule_help)

    def scorer_args(c):
        c.add_argument("--forest")
        c.add_argument("--scorer", default="heuristic", help="heuristic, gt-vanilla, gt-weighted or file:PATH")
        c.add_argument("--gt")
        c.add_argument("--fallback", choices=("heuristic", "gt-vanilla", "gt-weighted"),
                       help="scorer for segments missing from a file: cache")
        c.add_argument("--heuristic-config")

    c = sub.add_parser("build-tree", help="build the clustering forest")
    cloud_args(c)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_build_tree)

    c = sub.add_parser("segment", help="search the forest for the best segmentation")
    cloud_args(c, schedule_required=False)
    scorer_args(c)
    c.add_argument("--mode", choices=("min", "avg"), default="min")
    c.add_argument("--out", required=True)
    c.add_argument("--scores-out")
    c.set_defaults(func=cmd_segment)

    c = sub.add_parser("baseline", help="fixed-threshold Euclidean clustering")
    cloud_args(c)
    c.add_argument("--level", type=float, required=True)
    c.add_argument("--heuristic-config")
    c.add_argument("--out", required=True)
    c.add_argument("--scores-out")
    c.set_defaults(func=cmd_baseline)

    c = sub.add_parser("eval", help="under/over-segmentation error, worst IoU and AP")
    c.add_argument("--pred", nargs="+", required=True)
    c.add_argument("--gt", nargs="+", required=True)
    c.add_argument("--points", nargs="+")
    c.add_argument("--scores", nargs="+")
    c.add_argument("--tau-u", type=float, default=2 / 3)
    c.add_argument("--tau-o", type=float, default=1.0)
    c.add_argument("--range", type=float)
    c.add_argument("--overlap", choices=("skip", "region"), default="skip")
    c.add_argument("--ap", action="store_true")
    c.add_argument("--out")
    c.set_defaults(func=cmd_eval)

    c = sub.add_parser("export-training", help="write (segment, IoU target) pairs for every node")
    cloud_args(c)
    c.add_argument("--gt", required=True)
    c.add_argument("--target", choices=("vanilla", "weighted"), default="weighted")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_export_training)

    c = sub.add_parser("count-cuts", help="number of tree-consistent segmentations")
    c.add_argument("--forest", required=True)
    c.set_defaults(func=cmd_count_cuts)

    c = sub.add_parser("gen-synthetic", help="generate a labelled synthetic scene")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--objects", type=int, default=5)
    c.add_argument("--points-min", type=int, default=SceneSpec.points_min)
    c.add_argument("--points-max", type=int, default=SceneSpec.points_max)
    c.add_argument("--gap-min", type=float, default=SceneSpec.gap_min)
    c.add_argument("--gap-max", type=float, default=SceneSpec.gap_max)
    c.add_argument("--disc-radius", type=float, default=SceneSpec.disc_radius)
    c.add_argument("--range-density", action="store_true")
    c.add_argument("--out-points", required=True)
    c.add_argument("--out-gt", required=True)
    c.add_argument("--out-boxes")
    c.set_defaults(func=cmd_gen_synthetic)

    c = sub.add_parser("crop", help="keep points inside boxes and label them")
    c.add_argument("--points", required=True)
    c.add_argument("--boxes", required=True)
    c.add_argument("--out-points", required=True)
    c.add_argument("--out-gt", required=True)
    c.set_defaults(func=cmd_crop)

    c = sub.add_parser("build-cache", help="score every forest node into a file: cache")
    cloud_args(c, schedule_required=False)
    scorer_args(c)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_build_cache)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TreecutError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
