"""Point clouds, index sets, segmentations and ground truth.

Segments are identified by the indices of their points, never by
coordinates, so every metric reduces to exact set arithmetic.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError

RANGE_FLOOR = 1e-6  # m^2, keeps weighted IoU denominators positive
IGNORED = -1


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float | None = None


def squared_range(p: Point | Sequence[float]) -> float:
    """Squared distance to the sensor origin, floored at ``RANGE_FLOOR``."""
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    return max(x * x + y * y + z * z, RANGE_FLOOR)


def squared_ranges(xyz: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    r2 = xyz[:, 0] * xyz[:, 0] + xyz[:, 1] * xyz[:, 1] + xyz[:, 2] * xyz[:, 2]
    return np.maximum(r2, RANGE_FLOOR)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class PointCloud:
    """Sensor-frame points, stored as an immutable ``(N, 3)`` float64 array."""

    def __init__(self, xyz, intensity=None, frame_id: str = ""):
        xyz = np.array(xyz, dtype=np.float64).reshape(-1, 3)
        finite = np.isfinite(xyz).all(axis=1)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise InvalidInputError(f"point {bad} has non-finite coordinates")
        if intensity is not None:
            intensity = np.array(intensity, dtype=np.float64).reshape(-1)
            if intensity.shape[0] != xyz.shape[0]:
                raise InvalidInputError("intensity length does not match point count")
            intensity = _frozen(intensity)
        self.xyz = _frozen(xyz)
        self.intensity = intensity
        self.frame_id = frame_id

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def __getitem__(self, i: int) -> Point:
        x, y, z = self.xyz[i]
        inten = None if self.intensity is None else float(self.intensity[i])
        return Point(float(x), float(y), float(z), inten)

    def __iter__(self) -> Iterator[Point]:
        return (self[i] for i in range(len(self)))

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        inten = None if self.intensity is None else self.intensity[idx]
        return PointCloud(self.xyz[idx], inten, self.frame_id)

    @cached_property
    def squared_ranges(self) -> np.ndarray:
        return _frozen(squared_ranges(self.xyz))


class PointIndexSet:
    """Strictly increasing point indices into one cloud."""

    __slots__ = ("indices", "_digest")

    def __init__(self, indices, *, check: bool = True):
        arr = np.array(indices, dtype=np.int64).reshape(-1)
        if check and arr.size:
            if arr[0] < 0:
                raise InvalidInputError(f"negative point index {int(arr[0])}")
            steps = np.diff(arr)
            if (steps <= 0).any():
                raise InvalidInputError("point indices must be strictly increasing")
        arr.setflags(write=False)
        object.__setattr__(self, "indices", arr)
        object.__setattr__(self, "_digest", None)

    @classmethod
    def of(cls, indices: Iterable[int]) -> "PointIndexSet":
        """Build from any iterable, sorting and de-duplicating."""
        return cls(np.unique(np.fromiter(indices, dtype=np.int64)), check=False)

    def __setattr__(self, name, value):
        raise AttributeError("PointIndexSet is immutable")

    def __len__(self) -> int:
        return self.indices.shape[0]

    def __iter__(self) -> Iterator[int]:
        return iter(self.indices.tolist())

    def __contains__(self, i) -> bool:
        pos = np.searchsorted(self.indices, i)
        return bool(pos < len(self) and self.indices[pos] == i)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointIndexSet):
            return NotImplemented
        return np.array_equal(self.indices, other.indices)

    def __hash__(self) -> int:
        return hash(self.digest)

    def __repr__(self) -> str:
        if len(self) <= 8:
            return f"PointIndexSet({self.indices.tolist()})"
        return f"PointIndexSet(<{len(self)} points from {int(self.indices[0])}>)"

    @property
    def digest(self) -> bytes:
        """Content hash of the sorted index list (little-endian int64)."""
        if self._digest is None:
            h = hashlib.blake2b(self.indices.astype("<i8").tobytes(), digest_size=16)
            object.__setattr__(self, "_digest", h.digest())
        return self._digest

    @property
    def first(self) -> int:
        return int(self.indices[0])


@dataclass(frozen=True)
class Violation:
    kind: str  # "empty", "out_of_range", "duplicated", "uncovered"
    index: int
    message: str

    def __str__(self) -> str:
        return self.message


@dataclass(frozen=True)
class Segmentation:
    segments: tuple[PointIndexSet, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self) -> Iterator[PointIndexSet]:
        return iter(self.segments)

    def __getitem__(self, i: int) -> PointIndexSet:
        return self.segments[i]

    def to_labels(self, n: int) -> np.ndarray:
        """Per-point segment ids; points not covered keep ``-1``."""
        labels = np.full(n, -1, dtype=np.int64)
        for sid, seg in enumerate(self.segments):
            labels[seg.indices] = sid
        return labels

    @classmethod
    def from_labels(cls, labels) -> "Segmentation":
        """Group points by label value; segments are ordered by ascending label."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and labels.min() < 0:
            raise InvalidInputError("negative segment label")
        order = np.argsort(labels, kind="stable")
        values, starts = np.unique(labels[order], return_index=True)
        bounds = list(starts[1:]) + [labels.size]
        segs = [
            PointIndexSet(order[s:e], check=False)
            for s, e in zip(starts.tolist(), bounds)
        ]
        return cls(tuple(segs))

    def canonical(self) -> "Segmentation":
        """Same segments ordered by their smallest point index."""
        return Segmentation(tuple(sorted(self.segments, key=lambda s: s.first)))

    def as_sets(self) -> frozenset[frozenset[int]]:
        return frozenset(frozenset(s.indices.tolist()) for s in self.segments)


def validate_segmentation(seg: Segmentation, universe) -> Violation | None:
    """Return ``None`` when ``seg`` partitions ``universe``, else the first violation.

    ``universe`` is either a point count ``N`` (indices ``0..N-1``) or a
    ``PointIndexSet``. Checks run in order: empty segment, index outside
    the universe, duplicated index, uncovered index.
    """
    if isinstance(universe, PointIndexSet):
        uni = universe.indices
    else:
        uni = np.arange(int(universe), dtype=np.int64)

    for k, s in enumerate(seg.segments):
        if len(s) == 0:
            return Violation("empty", -1, f"segment {k} is empty")

    if not seg.segments:
        if uni.size:
            i = int(uni[0])
            return Violation("uncovered", i, f"index {i} uncovered")
        return None

    allidx = np.concatenate([s.indices for s in seg.segments])
    outside = ~np.isin(allidx, uni)
    if outside.any():
        i = int(allidx[np.flatnonzero(outside)[0]])
        return Violation("out_of_range", i, f"index {i} outside the universe")

    srt = np.sort(allidx, kind="stable")
    dup = srt[1:][srt[1:] == srt[:-1]]
    if dup.size:
        i = int(dup[0])
        return Violation("duplicated", i, f"index {i} duplicated")

    missing = np.setdiff1d(uni, srt, assume_unique=True)
    if missing.size:
        i = int(missing[0])
        return Violation("uncovered", i, f"index {i} uncovered")
    return None


@dataclass(frozen=True)
class Box:
    """Yaw-rotated 3D box; ``center`` is the geometric centroid."""

    cls: str
    center: tuple[float, float, float]
    dims: tuple[float, float, float]  # length (local x), width (local y), height (z)
    yaw: float = 0.0

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """Closed-boundary containment test in the box's local frame."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        d = xyz - np.asarray(self.center, dtype=np.float64)
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        lx = c * d[:, 0] + s * d[:, 1]
        ly = -s * d[:, 0] + c * d[:, 1]
        l, w, h = self.dims
        return (np.abs(lx) <= l / 2) & (np.abs(ly) <= w / 2) & (np.abs(d[:, 2]) <= h / 2)

    def footprint(self) -> np.ndarray:
        """Bird's-eye corners, counter-clockwise, shape (4, 2)."""
        l, w, _ = self.dims
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) / 2
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center[:2])


@dataclass(frozen=True)
class GroundTruth:
    """Per-point instance labels; ``-1`` marks points excluded from every metric.

    ``overlapping`` lists instances whose boxes overlap another box; the
    ``skip_objects`` evaluation mode drops them entirely.
    """

    instance_id: np.ndarray
    class_of_instance: Mapping[int, str]
    boxes: tuple[Box, ...] | None = None
    overlapping: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        inst = np.array(self.instance_id, dtype=np.int64).reshape(-1)
        if inst.size and inst.min() < IGNORED:
            raise InvalidInputError("instance ids must be >= -1")
        classes = {int(k): str(v) for k, v in self.class_of_instance.items()}
        present = set(np.unique(inst[inst >= 0]).tolist())
        missing = present - classes.keys()
        if missing:
            raise InvalidInputError(f"instance {min(missing)} has no class")
        if self.boxes is not None:
            object.__setattr__(self, "boxes", tuple(self.boxes))
        inst.setflags(write=False)
        object.__setattr__(self, "instance_id", inst)
        object.__setattr__(self, "class_of_instance", classes)
        object.__setattr__(self, "overlapping", frozenset(int(i) for i in self.overlapping))

    def __len__(self) -> int:
        return self.instance_id.shape[0]

    @property
    def instances(self) -> list[int]:
        """All declared instance ids, ascending (including ones with no points)."""
        return sorted(self.class_of_instance)

    def instance_sizes(self) -> np.ndarray:
        """Point counts indexed by instance id (ignored points excluded)."""
        size = max(self.instances, default=-1) + 1
        valid = self.instance_id[self.instance_id >= 0]
        return np.bincount(valid, minlength=size)

    def segmentation(self) -> Segmentation:
        """GT instances as segments (ordered by instance id), ignored points dropped."""
        segs = []
        for inst in self.instances:
            idx = np.flatnonzero(self.instance_id == inst)
            if idx.size:
                segs.append(PointIndexSet(idx, check=False))
        return Segmentation(tuple(segs))
