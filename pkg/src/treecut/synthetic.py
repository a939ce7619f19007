"""Deterministic desk-scale scenes: box-shaped point blobs standing on a
ground plane around the sensor, with exact instance labels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GenerationError, InvalidParameterError
from .geometry import Box, GroundTruth, PointCloud


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_objects: int = 5
    extent_min: tuple[float, float, float] = (0.4, 0.4, 0.8)
    extent_max: tuple[float, float, float] = (4.5, 2.0, 2.0)
    points_min: int = 60
    points_max: int = 400
    gap_min: float = 0.3  # m, smallest box-to-box distance to any object
    gap_max: float = 3.0  # m, largest distance to the nearest object
    disc_radius: float = 25.0
    min_range: float = 3.0
    range_density: bool = False  # scale point counts by (reference_range / range)^2
    reference_range: float = 10.0
    ground_z: float = -1.73
    max_retries: int = 2000

    def __post_init__(self):
        if self.num_objects < 0:
            raise InvalidParameterError("num_objects must be >= 0")
        lo, hi = np.asarray(self.extent_min), np.asarray(self.extent_max)
        if (lo <= 0).any() or (hi < lo).any():
            raise InvalidParameterError("extents must be positive with min <= max")
        if not 0 < self.points_min <= self.points_max:
            raise InvalidParameterError("need 0 < points_min <= points_max")
        if not 0 < self.gap_min <= self.gap_max:
            raise InvalidParameterError("need 0 < gap_min <= gap_max")
        if not 0 <= self.min_range < self.disc_radius:
            raise InvalidParameterError("need 0 <= min_range < disc_radius")


def _class_for(dims) -> str:
    length, width, height = dims
    if length >= 3.0:
        return "car"
    if length < 1.0 and width < 1.0:
        return "pedestrian" if height >= 1.2 else "misc"
    return "cyclist" if width < 1.0 else "misc"


def _box_gap(c1, d1, c2, d2) -> float:
    """Euclidean distance between two axis-aligned boxes."""
    sep = np.maximum(np.abs(np.asarray(c1) - np.asarray(c2)) - (np.asarray(d1) + np.asarray(d2)) / 2, 0)
    return float(np.sqrt(sep @ sep))


def gen_synthetic(spec: SceneSpec) -> tuple[PointCloud, GroundTruth]:
    """Generate a labelled scene; the result depends only on ``spec``.

    Objects are placed one by one. Each new box sits ``gap`` metres from a
    randomly chosen existing box, with ``gap`` uniform in
    ``[gap_min, gap_max]``, and must stay at least ``gap_min`` from every
    box. Point-to-point gaps between objects are never below the box gap.
    """
    rng = np.random.default_rng(spec.seed)
    lo, hi = np.asarray(spec.extent_min), np.asarray(spec.extent_max)
    centers: list[np.ndarray] = []
    dims: list[np.ndarray] = []

    for k in range(spec.num_objects):
        for _ in range(spec.max_retries):
            d = rng.uniform(lo, hi)
            if not centers:
                r = rng.uniform(spec.min_range + d[:2].max(), spec.disc_radius - d[:2].max()) \
                    if spec.disc_radius - d[:2].max() > spec.min_range + d[:2].max() else spec.min_range
                a = rng.uniform(0, 2 * math.pi)
                xy = np.array([r * math.cos(a), r * math.sin(a)])
            else:
                anchor = int(rng.integers(len(centers)))
                gap = rng.uniform(spec.gap_min, spec.gap_max)
                axis = int(rng.integers(2))
                sign = 1.0 if rng.random() < 0.5 else -1.0
                xy = centers[anchor][:2].copy()
                xy[axis] += sign * ((dims[anchor][axis] + d[axis]) / 2 + gap)
                other = 1 - axis
                slack = (dims[anchor][other] + d[other]) / 2
                xy[other] += rng.uniform(-slack, slack)
            c = np.array([xy[0], xy[1], spec.ground_z + d[2] / 2])
            rng_xy = math.hypot(*xy)
            if rng_xy + d[:2].max() / 2 > spec.disc_radius or rng_xy - d[:2].max() < spec.min_range:
                continue
            if centers:
                gaps = [_box_gap(c, d, c2, d2) for c2, d2 in zip(centers, dims)]
                if min(gaps) < spec.gap_min or min(gaps) > spec.gap_max:
                    continue
            centers.append(c)
            dims.append(d)
            break
        else:
            raise GenerationError(f"could not place object {k} after {spec.max_retries} tries")

    xyz_parts, inst_parts = [], []
    boxes = []
    for k, (c, d) in enumerate(zip(centers, dims)):
        count = int(rng.integers(spec.points_min, spec.points_max + 1))
        if spec.range_density:
            r = max(math.hypot(c[0], c[1]), 1e-3)
            count = int(np.clip(round(count * (spec.reference_range / r) ** 2), spec.points_min, spec.points_max))
        pts = c + rng.uniform(-0.5, 0.5, size=(count, 3)) * d
        xyz_parts.append(pts)
        inst_parts.append(np.full(count, k, dtype=np.int64))
        dims_f = tuple(float(v) for v in d)
        boxes.append(Box(_class_for(dims_f), tuple(float(v) for v in c), dims_f, 0.0))

    if xyz_parts:
        xyz = np.concatenate(xyz_parts)
        inst = np.concatenate(inst_parts)
    else:
        xyz = np.zeros((0, 3))
        inst = np.zeros(0, dtype=np.int64)
    perm = rng.permutation(xyz.shape[0])
    # float32-representable so the cloud survives a binary round trip unchanged
    xyz = xyz[perm].astype(np.float32).astype(np.float64)
    inst = inst[perm]
    intensity = rng.uniform(0, 1, size=xyz.shape[0]).astype(np.float32).astype(np.float64)

    cloud = PointCloud(xyz, intensity, f"synthetic-{spec.seed}")
    gt = GroundTruth(inst, {k: b.cls for k, b in enumerate(boxes)}, tuple(boxes))
    return cloud, gt
