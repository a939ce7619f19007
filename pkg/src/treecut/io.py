"""Readers and writers for every on-disk format.

* points: KITTI velodyne layout, little-endian float32 records ``x y z intensity``
* boxes: CSV lines ``class,cx,cy,cz,l,w,h,yaw`` (center is the box centroid)
* ground truth: JSON with per-point instance ids, classes, boxes, overlap flags
* labels: one integer segment id per point per line
* scores: CSV lines ``segment_id,score``
* forest: JSON tree of node records, point indices stored at leaves only

All writers replace their target atomically.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon

from .errors import FormatError, InvalidInputError
from .geometry import Box, GroundTruth, PointCloud, PointIndexSet, Segmentation
from .hierarchy import Forest, TreeNode

RECORD = np.dtype("<f4")


def atomic_write(path, data: str | bytes) -> None:
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def load_points(path, frame_id: str | None = None) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype=RECORD).reshape(-1, 4)
    finite = np.isfinite(rec).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise FormatError(f"{path}: record {bad} has a non-finite value")
    fid = Path(path).stem if frame_id is None else frame_id
    return PointCloud(rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64), fid)


def save_points(cloud: PointCloud, path) -> None:
    rec = np.zeros((len(cloud), 4), dtype=RECORD)
    rec[:, :3] = cloud.xyz
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    atomic_write(path, rec.tobytes())


def load_boxes(path) -> list[Box]:
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if lineno == 1 and parts[0] == "class":
                continue
            if len(parts) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(v) for v in parts[1:]]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric box field") from None
            if not all(math.isfinite(v) for v in vals) or min(vals[3:6]) <= 0:
                raise FormatError(f"{path}:{lineno}: box values must be finite with positive dimensions")
            boxes.append(Box(parts[0], tuple(vals[0:3]), tuple(vals[3:6]), vals[6]))
    return boxes


def boxes_csv(boxes) -> str:
    lines = ["class,cx,cy,cz,l,w,h,yaw"]
    for b in boxes:
        vals = [*b.center, *b.dims, b.yaw]
        lines.append(",".join([b.cls] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + "\n"


def save_boxes(boxes, path) -> None:
    atomic_write(path, boxes_csv(boxes))


def boxes_overlap(a: Box, b: Box) -> bool:
    """Positive-volume intersection of two yaw-rotated boxes."""
    za = (a.center[2] - a.dims[2] / 2, a.center[2] + a.dims[2] / 2)
    zb = (b.center[2] - b.dims[2] / 2, b.center[2] + b.dims[2] / 2)
    if min(za[1], zb[1]) <= max(za[0], zb[0]):
        return False
    return Polygon(a.footprint()).intersection(Polygon(b.footprint())).area > 0


@dataclass(frozen=True)
class CropStats:
    kept: int
    dropped: int
    overlap_points: int
    overlapping_objects: int


def crop_and_label(cloud: PointCloud, boxes) -> tuple[PointCloud, GroundTruth, CropStats]:
    """Keep points inside any box and label them by box index.

    Points inside two or more boxes get instance ``-1``. Objects whose boxes
    overlap another box, or that share a point with one, are listed in
    ``GroundTruth.overlapping``.
    """
    boxes = list(boxes)
    n = len(cloud)
    inside = np.zeros((len(boxes), n), dtype=bool)
    for k, b in enumerate(boxes):
        inside[k] = b.contains(cloud.xyz)
    hits = inside.sum(axis=0)
    keep = np.flatnonzero(hits > 0)
    inst = np.full(keep.size, -1, dtype=np.int64)
    single = hits[keep] == 1
    inst[single] = np.argmax(inside[:, keep[single]], axis=0)

    overlapping = set()
    shared = inside[:, hits > 1]
    for k in range(len(boxes)):
        if shared[k].any():
            overlapping.add(k)
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if boxes_overlap(boxes[i], boxes[j]):
                overlapping.update((i, j))

    fg = cloud.subset(keep)
    gt = GroundTruth(
        inst,
        {k: b.cls for k, b in enumerate(boxes)},
        tuple(boxes),
        frozenset(overlapping),
    )
    stats = CropStats(int(keep.size), int(n - keep.size), int((hits > 1).sum()), len(overlapping))
    return fg, gt, stats


def gt_to_json(gt: GroundTruth, frame_id: str = "") -> str:
    data = {
        "frame_id": frame_id,
        "instance_id": gt.instance_id.tolist(),
        "class_of_instance": {str(k): v for k, v in sorted(gt.class_of_instance.items())},
        "overlapping": sorted(gt.overlapping),
        "boxes": None if gt.boxes is None else [
            {"class": b.cls, "center": list(b.center), "dims": list(b.dims), "yaw": b.yaw}
            for b in gt.boxes
        ],
    }
    return json.dumps(data, separators=(",", ":")) + "\n"


def save_gt(gt: GroundTruth, path, frame_id: str = "") -> None:
    atomic_write(path, gt_to_json(gt, frame_id))


def load_gt(path) -> GroundTruth:
    try:
        with open(path) as fh:
            data = json.load(fh)
        boxes = data.get("boxes")
        if boxes is not None:
            boxes = tuple(
                Box(b["class"], tuple(map(float, b["center"])), tuple(map(float, b["dims"])), float(b["yaw"]))
                for b in boxes
            )
        return GroundTruth(
            np.asarray(data["instance_id"], dtype=np.int64),
            {int(k): v for k, v in data["class_of_instance"].items()},
            boxes,
            frozenset(data.get("overlapping", [])),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise FormatError(f"{path}: malformed ground truth ({exc})") from None


def labels_text(seg: Segmentation, n: int) -> str:
    labels = seg.to_labels(n)
    if (labels < 0).any():
        raise InvalidInputError("segmentation leaves points unlabelled")
    return "".join(f"{v}\n" for v in labels.tolist())


def save_labels(seg: Segmentation, n: int, path) -> None:
    atomic_write(path, labels_text(seg, n))


def load_labels(path) -> Segmentation:
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            try:
                v = int(s)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: not an integer label") from None
            if v < 0:
                raise InvalidInputError(f"{path}:{lineno}: negative label {v} in a prediction")
            values.append(v)
    return Segmentation.from_labels(np.asarray(values, dtype=np.int64))


def save_scores(scores, path) -> None:
    atomic_write(path, "".join(f"{i},{float(s)!r}\n" for i, s in enumerate(scores)))


def load_scores(path, count: int | None = None) -> list[float]:
    out: dict[int, float] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            try:
                sid, val = s.split(",")
                out[int(sid)] = float(val)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected 'segment_id,score'") from None
    ids = sorted(out)
    if ids != list(range(len(ids))) or (count is not None and len(ids) != count):
        raise InvalidInputError(f"{path}: scores must cover segment ids 0..{(count or len(ids)) - 1}")
    return [out[i] for i in ids]


def _node_record(node: TreeNode) -> dict:
    rec = {"node_id": node.label, "epsilon_level": node.epsilon_level}
    if node.is_leaf:
        rec["points"] = node.points.indices.tolist()
    else:
        rec["children"] = [_node_record(c) for c in node.children]
    return rec


def forest_to_json(forest: Forest) -> str:
    data = {
        "frame_id": forest.frame_id,
        "cloud_size": forest.cloud_size,
        "epsilon_schedule": list(forest.epsilon_schedule),
        "trees": [_node_record(t) for t in forest.trees],
    }
    return json.dumps(data, separators=(",", ":")) + "\n"


def save_forest(forest: Forest, path) -> None:
    atomic_write(path, forest_to_json(forest))


def _node_from_record(rec: dict, tree: int, path: tuple[int, ...]) -> TreeNode:
    eps = rec.get("epsilon_level")
    eps = None if eps is None else float(eps)
    if "children" in rec:
        kids = tuple(_node_from_record(c, tree, path + (k,)) for k, c in enumerate(rec["children"]))
        if not kids:
            raise FormatError(f"node {rec.get('node_id')} has an empty child list")
        idx = np.sort(np.concatenate([c.points.indices for c in kids]))
        return TreeNode(PointIndexSet(idx), kids, path, eps, tree)
    return TreeNode(PointIndexSet(rec["points"]), (), path, eps, tree)


def load_forest(path) -> Forest:
    try:
        with open(path) as fh:
            data = json.load(fh)
        trees = tuple(_node_from_record(t, k, ()) for k, t in enumerate(data["trees"]))
        forest = Forest(trees, tuple(float(e) for e in data["epsilon_schedule"]),
                        int(data["cloud_size"]), data.get("frame_id", ""))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidInputError):
            raise FormatError(f"{path}: {exc}") from None
        raise FormatError(f"{path}: malformed forest ({exc})") from None
    allidx = np.concatenate([t.points.indices for t in trees]) if trees else np.zeros(0, np.int64)
    if allidx.size != forest.cloud_size or not np.array_equal(np.sort(allidx), np.arange(forest.cloud_size)):
        raise FormatError(f"{path}: tree roots do not partition {forest.cloud_size} points")
    return forest
