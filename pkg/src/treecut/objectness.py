"""Segment objectness: IoU targets, a training-free heuristic, and score caches.

Every scorer is a pure callable ``scorer(segment) -> float`` in ``[0, 1]``
bound to one cloud at construction. A segment's score never depends on how
the rest of the cloud is partitioned.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from .errors import FormatError, InvalidInputError, MissingScoreError
from .geometry import GroundTruth, PointCloud, PointIndexSet

SCORER_KINDS = ("gt_vanilla", "gt_weighted", "heuristic", "file_cache")


def _iou_from_masses(inter: np.ndarray, sizes: np.ndarray) -> float:
    """Best IoU given per-instance intersection and instance masses.

    The segment's mass outside instance ``l`` is the sum of its overlaps
    with every other instance, so a segment equal to ``l`` scores exactly 1.
    """
    hit = np.flatnonzero(inter > 0)
    if hit.size == 0:
        return 0.0
    parts = inter[hit].tolist()
    best = 0.0
    for j, l in enumerate(hit.tolist()):
        outside = 0.0 if len(parts) == 1 else math.fsum(parts[:j] + parts[j + 1:])
        iou = float(inter[l] / (sizes[l] + outside))
        if iou > best:
            best = iou
    return min(best, 1.0)


def _segment_instances(seg: PointIndexSet, gt: GroundTruth) -> tuple[np.ndarray, np.ndarray]:
    if len(seg) == 0:
        raise InvalidInputError("cannot score an empty segment")
    inst = gt.instance_id[seg.indices]
    valid = inst >= 0
    return seg.indices[valid], inst[valid]


def _require_instances(gt: GroundTruth) -> None:
    if not gt.class_of_instance:
        raise InvalidInputError("ground truth has no instances")


def vanilla_iou(seg: PointIndexSet, gt: GroundTruth, *, _sizes=None) -> float:
    """Largest point IoU between ``seg`` and any ground-truth instance.

    Points labelled ``-1`` are removed from both intersection and union.
    """
    _require_instances(gt)
    _, inst = _segment_instances(seg, gt)
    sizes = gt.instance_sizes() if _sizes is None else _sizes
    inter = np.bincount(inst, minlength=sizes.size)
    return _iou_from_masses(inter, sizes)


def _weighted_sizes(cloud: PointCloud, gt: GroundTruth) -> np.ndarray:
    valid = gt.instance_id >= 0
    n = max(gt.instances, default=-1) + 1
    return np.bincount(gt.instance_id[valid], weights=cloud.squared_ranges[valid], minlength=n)


def weighted_iou(seg: PointIndexSet, cloud: PointCloud, gt: GroundTruth, *, _sizes=None) -> float:
    """IoU where each point counts with its squared range to the sensor."""
    _require_instances(gt)
    if len(cloud) != len(gt):
        raise InvalidInputError("cloud and ground truth sizes differ")
    idx, inst = _segment_instances(seg, gt)
    sizes = _weighted_sizes(cloud, gt) if _sizes is None else _sizes
    inter = np.bincount(inst, weights=cloud.squared_ranges[idx], minlength=sizes.size)
    return _iou_from_masses(inter, sizes)


@dataclass(frozen=True)
class HeuristicParams:
    """Parameters of the training-free objectness stand-in.

    score = (w_volume * p_volume + w_count * p_count + w_height * p_height
             + w_range * p_range) / (sum of weights), clamped to [0, 1], with

    p_volume = exp(-0.5 * (d / volume_sigma)**2), where d is how far the
               log of the axis-aligned box volume (sides floored at min_side)
               falls outside [log volume_lo, log volume_hi]
    p_count  = 1 - exp(-n / count_scale)
    p_height = exp(-h / height_scale), h = segment min z minus cloud min z
    p_range  = 1 - exp(-n * r2 / range_scale), r2 = squared range of the centroid
    """

    volume_lo: float = 0.05
    volume_hi: float = 80.0
    volume_sigma: float = 1.0
    min_side: float = 0.1
    count_scale: float = 15.0
    height_scale: float = 0.5
    range_scale: float = 2000.0
    w_volume: float = 0.4
    w_count: float = 0.2
    w_height: float = 0.2
    w_range: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise InvalidInputError(f"heuristic parameter {f.name} must be finite and >= 0")
        if self.w_volume + self.w_count + self.w_height + self.w_range <= 0:
            raise InvalidInputError("heuristic weights must not all be zero")

    @classmethod
    def from_json(cls, path) -> "HeuristicParams":
        with open(path) as fh:
            data = json.load(fh)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise FormatError(f"unknown heuristic parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> dict:
        return asdict(self)


def heuristic_score(
    seg: PointIndexSet,
    cloud: PointCloud,
    params: HeuristicParams | None = None,
    *,
    ground_z: float | None = None,
) -> float:
    p = params or HeuristicParams()
    if len(seg) == 0:
        raise InvalidInputError("cannot score an empty segment")
    pts = cloud.xyz[seg.indices]
    n = pts.shape[0]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    sides = np.maximum(hi - lo, p.min_side)
    volume = float(sides[0] * sides[1] * sides[2])
    gap = max(0.0, math.log(volume / p.volume_hi)) if p.volume_hi > 0 else 0.0
    if p.volume_lo > 0:
        gap = max(gap, math.log(p.volume_lo / volume))
    p_volume = math.exp(-0.5 * (gap / p.volume_sigma) ** 2) if p.volume_sigma > 0 else float(gap == 0)
    p_count = 1.0 - math.exp(-n / p.count_scale) if p.count_scale > 0 else 1.0
    if ground_z is None:
        ground_z = float(cloud.xyz[:, 2].min())
    height = max(0.0, float(lo[2]) - ground_z)
    p_height = math.exp(-height / p.height_scale) if p.height_scale > 0 else float(height == 0)
    p_range = 0.0
    if p.w_range > 0:
        c = pts.mean(axis=0)
        r2 = max(float(c @ c), 1e-6)
        p_range = 1.0 - math.exp(-n * r2 / p.range_scale) if p.range_scale > 0 else 1.0
    num = p.w_volume * p_volume + p.w_count * p_count + p.w_height * p_height + p.w_range * p_range
    den = p.w_volume + p.w_count + p.w_height + p.w_range
    return min(1.0, max(0.0, num / den))


def segment_key(seg: PointIndexSet, cloud_id: str = "") -> str:
    """Lowercase hex key of a segment: hash of the cloud id and sorted indices."""
    h = hashlib.blake2b(digest_size=16)
    h.update(cloud_id.encode("utf-8"))
    h.update(b"\x00")
    h.update(seg.indices.astype("<i8").tobytes())
    return h.hexdigest()


_KEY_RE = re.compile(r"^[0-9a-f]+$")


def _check_score(value: float, where: str) -> float:
    if not (0.0 <= value <= 1.0):
        raise FormatError(f"{where}: score {value!r} outside [0, 1]")
    return value


@dataclass(frozen=True)
class ScoreCache:
    entries: Mapping[str, float]
    cloud_id: str = ""

    def __post_init__(self):
        clean = {}
        for k, v in self.entries.items():
            clean[str(k)] = _check_score(float(v), f"key {k}")
        object.__setattr__(self, "entries", clean)

    @classmethod
    def from_segments(cls, scores: Mapping[PointIndexSet, float] | list, cloud_id: str = "") -> "ScoreCache":
        items = scores.items() if isinstance(scores, Mapping) else scores
        return cls({segment_key(s, cloud_id): v for s, v in items}, cloud_id)

    @classmethod
    def load(cls, path, cloud_id: str = "") -> "ScoreCache":
        entries: dict[str, float] = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 2 or not _KEY_RE.match(parts[0]):
                    raise FormatError(f"{path}:{lineno}: expected 'hexkey,score'")
                try:
                    score = float(parts[1])
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad score {parts[1]!r}") from None
                entries[parts[0]] = _check_score(score, f"{path}:{lineno}")
        return cls(entries, cloud_id)

    def lines(self) -> Iterator[str]:
        for k in sorted(self.entries):
            yield f"{k},{self.entries[k]!r}"


def cache_lookup(
    cache: ScoreCache,
    seg: PointIndexSet,
    fallback: Callable[[PointIndexSet], float] | None = None,
    node_id: str | None = None,
) -> float:
    key = segment_key(seg, cache.cloud_id)
    try:
        return cache.entries[key]
    except KeyError:
        if fallback is None:
            raise MissingScoreError(key, node_id) from None
        return fallback(seg)


class Scorer:
    """Base class for objectness scorers. Subclasses set ``kind``."""

    kind = "abstract"
    thread_safe = True

    def __call__(self, seg: PointIndexSet) -> float:
        raise NotImplementedError


class VanillaIoUScorer(Scorer):
    kind = "gt_vanilla"

    def __init__(self, gt: GroundTruth):
        _require_instances(gt)
        self.gt = gt
        self._sizes = gt.instance_sizes()

    def __call__(self, seg):
        return vanilla_iou(seg, self.gt, _sizes=self._sizes)


class WeightedIoUScorer(Scorer):
    kind = "gt_weighted"

    def __init__(self, cloud: PointCloud, gt: GroundTruth):
        _require_instances(gt)
        if len(cloud) != len(gt):
            raise InvalidInputError("cloud and ground truth sizes differ")
        self.cloud = cloud
        self.gt = gt
        self._sizes = _weighted_sizes(cloud, gt)

    def __call__(self, seg):
        return weighted_iou(seg, self.cloud, self.gt, _sizes=self._sizes)


class HeuristicScorer(Scorer):
    kind = "heuristic"

    def __init__(self, cloud: PointCloud, params: HeuristicParams | None = None):
        self.cloud = cloud
        self.params = params or HeuristicParams()
        self._ground = float(cloud.xyz[:, 2].min()) if len(cloud) else 0.0

    def __call__(self, seg):
        return heuristic_score(seg, self.cloud, self.params, ground_z=self._ground)


class CacheScorer(Scorer):
    kind = "file_cache"

    def __init__(self, cache: ScoreCache, fallback: Callable[[PointIndexSet], float] | None = None):
        self.cache = cache
        self.fallback = fallback
        if fallback is not None:
            self.thread_safe = getattr(fallback, "thread_safe", False)

    def __call__(self, seg, node_id=None):
        return cache_lookup(self.cache, seg, self.fallback, node_id)


class MemoScorer(Scorer):
    """Memoizes an inner scorer by segment content, so repeated searches over
    the same forest never re-score a segment."""

    def __init__(self, inner: Callable[[PointIndexSet], float]):
        self.inner = inner
        self.kind = getattr(inner, "kind", "custom")
        self.thread_safe = getattr(inner, "thread_safe", False)
        self._memo: dict[bytes, float] = {}
        self._lock = threading.Lock()
        self.calls = 0

    def __call__(self, seg):
        key = seg.digest
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        value = float(self.inner(seg))
        with self._lock:
            self._memo[key] = value
            self.calls += 1
        return value


def make_scorer(
    kind: str,
    cloud: PointCloud,
    gt: GroundTruth | None = None,
    *,
    params: HeuristicParams | None = None,
    cache: ScoreCache | None = None,
    fallback: str | None = None,
) -> Scorer:
    """Build a scorer by kind name (dashes and underscores both accepted)."""
    kind = kind.replace("-", "_")
    if kind in ("gt_vanilla", "gt_weighted"):
        if gt is None:
            raise InvalidInputError(f"scorer {kind} needs ground truth")
        return VanillaIoUScorer(gt) if kind == "gt_vanilla" else WeightedIoUScorer(cloud, gt)
    if kind == "heuristic":
        return HeuristicScorer(cloud, params)
    if kind == "file_cache":
        if cache is None:
            raise InvalidInputError("file_cache scorer needs a cache")
        fb = None
        if fallback is not None:
            fb = make_scorer(fallback, cloud, gt, params=params)
        return CacheScorer(cache, fb)
    raise InvalidInputError(f"unknown scorer kind {kind!r}")


@dataclass(frozen=True)
class TrainingPair:
    node_id: str
    target: float
    xyz: np.ndarray
    intensity: np.ndarray | None

    def to_line(self) -> str:
        cols = [self.xyz[:, 0], self.xyz[:, 1], self.xyz[:, 2]]
        if self.intensity is not None:
            cols.append(self.intensity)
        pts = ", ".join(" ".join(format(float(v), ".9g") for v in row) for row in zip(*cols))
        return f"{self.node_id};{self.target!r};{pts}"


def export_training_pairs(forest, cloud: PointCloud, gt: GroundTruth, target: str = "weighted") -> Iterator[TrainingPair]:
    """One record per forest node, in pre-order, with its IoU target."""
    if target == "vanilla":
        scorer: Scorer = VanillaIoUScorer(gt)
    elif target == "weighted":
        scorer = WeightedIoUScorer(cloud, gt)
    else:
        raise InvalidInputError(f"unknown training target {target!r}")
    for node in forest.iter_nodes():
        idx = node.points.indices
        inten = None if cloud.intensity is None else cloud.intensity[idx]
        yield TrainingPair(node.label, scorer(node.points), cloud.xyz[idx], inten)


def parse_training_line(line: str) -> tuple[str, float, np.ndarray]:
    """Inverse of ``TrainingPair.to_line``; returns (node_id, target, rows)."""
    try:
        node_id, target, pts = line.rstrip("\n").split(";")
        rows = np.array([[float(v) for v in p.split()] for p in pts.split(",")])
        return node_id, float(target), rows
    except ValueError as exc:
        raise FormatError(f"bad training record: {exc}") from None


def write_default_params(path) -> None:
    Path(path).write_text(json.dumps(HeuristicParams().to_dict(), indent=2) + "\n")
