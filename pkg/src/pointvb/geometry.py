"""Geometric/chromatic augmentations, farthest point sampling, voxelization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .pcio import ABSENT, PointCloud, SparseLabelSet

COLOR_JITTER_SIGMA = 255.0 * 0.05


@dataclass
class TransformSpec:
    """One draw from the augmentation distribution.

    z_rotation in [0, 2*pi); one mirror flag per axis; color_jitter is a
    per-point (M, 3) additive RGB noise array.
    """

    z_rotation: float
    mirror_flags: tuple[bool, bool, bool]
    color_jitter: np.ndarray

    @staticmethod
    def identity(num_points: int) -> "TransformSpec":
        return TransformSpec(0.0, (False, False, False), np.zeros((num_points, 3)))


@dataclass
class SampleIndexSet:
    """Ordered set of H distinct point indices produced by FPS."""

    indices: np.ndarray  # (H,) int64

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise DataError("sample indices must be distinct")

    def __len__(self) -> int:
        return len(self.indices)


def sample_transform(rng: np.random.Generator, num_points: int) -> TransformSpec:
    """Draw rotation ~ U[0, 2pi), mirrors ~ Bernoulli(0.5), jitter ~ N(0, 12.75)."""
    angle = rng.uniform(0.0, 2.0 * np.pi)
    flags = tuple(bool(b) for b in rng.random(3) < 0.5)
    jitter = rng.normal(0.0, COLOR_JITTER_SIGMA, size=(num_points, 3))
    return TransformSpec(angle, flags, jitter)


def apply_transform(cloud: PointCloud, t: TransformSpec) -> PointCloud:
    """Rotate about z, mirror per flag, add clamped color jitter."""
    if t.color_jitter.shape != cloud.colors.shape:
        raise DataError(
            f"jitter shape {t.color_jitter.shape} does not match cloud "
            f"{cloud.colors.shape}"
        )
    c, s = np.cos(t.z_rotation), np.sin(t.z_rotation)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    positions = cloud.positions @ rot.T
    for axis, flag in enumerate(t.mirror_flags):
        if flag:
            positions[:, axis] = -positions[:, axis]
    colors = np.clip(cloud.colors + t.color_jitter, 0.0, 255.0)
    return PointCloud(positions, colors)


def farthest_point_sampling(cloud: PointCloud, h: int, start: int) -> SampleIndexSet:
    """Greedy max-min-distance subset of h point indices, beginning at start.

    Each step picks the point maximizing the minimum Euclidean distance to
    the already selected set; ties break to the lowest index.
    """
    m = len(cloud)
    if not 1 <= h <= m:
        raise DataError(f"h must be in [1, {m}], got {h}")
    if not 0 <= start < m:
        raise DataError(f"start index {start} out of range")
    positions = cloud.positions
    indices = np.empty(h, dtype=np.int64)
    indices[0] = start
    # squared distances preserve the ordering and the tie structure;
    # selected points are dropped to -1 so duplicates cannot be re-picked
    min_sq = np.sum((positions - positions[start]) ** 2, axis=1)
    min_sq[start] = -1.0
    for i in range(1, h):
        nxt = int(np.argmax(min_sq))  # argmax returns the lowest tied index
        indices[i] = nxt
        np.minimum(min_sq, np.sum((positions - positions[nxt]) ** 2, axis=1),
                   out=min_sq)
        min_sq[nxt] = -1.0
    return SampleIndexSet(indices)


def voxel_downsample(
    cloud: PointCloud, labels: SparseLabelSet, voxel_size: float
) -> tuple[PointCloud, SparseLabelSet, np.ndarray]:
    """Merge points per occupied voxel into centroids.

    Returns (downsampled cloud, merged labels, mapping) where mapping[i] is
    the output index of original point i. Voxels are ordered by first
    occurrence. The merged label is the majority present label of the
    members (lowest class id on ties, ABSENT if no member is labeled).
    """
    if voxel_size <= 0:
        raise DataError("voxel_size must be positive")
    keys = np.floor(cloud.positions / voxel_size).astype(np.int64)
    _, first_pos, mapping = np.unique(
        keys, axis=0, return_index=True, return_inverse=True
    )
    # re-number voxels by first occurrence so output order is stable
    order = np.argsort(first_pos, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    mapping = rank[mapping]

    v = len(first_pos)
    counts = np.bincount(mapping, minlength=v).astype(np.float64)
    positions = np.zeros((v, 3))
    colors = np.zeros((v, 3))
    for axis in range(3):
        positions[:, axis] = np.bincount(
            mapping, weights=cloud.positions[:, axis], minlength=v
        )
        colors[:, axis] = np.bincount(
            mapping, weights=cloud.colors[:, axis], minlength=v
        )
    positions /= counts[:, None]
    colors /= counts[:, None]

    merged = np.full(v, ABSENT, dtype=np.int64)
    present = labels.present_mask
    if present.any():
        s = labels.num_classes
        votes = np.zeros((v, s), dtype=np.int64)
        np.add.at(votes, (mapping[present], labels.labels[present]), 1)
        voted = votes.sum(axis=1) > 0
        merged[voted] = np.argmax(votes[voted], axis=1)  # argmax: lowest class wins ties
    return (
        PointCloud(positions, colors),
        SparseLabelSet(merged, labels.num_classes),
        mapping,
    )


def knn_indices(positions: np.ndarray, k: int) -> np.ndarray:
    """(M, k) indices of each point's k nearest other points.

    Ties break to the lowest index; self is excluded. k = 0 yields an
    empty (M, 0) array.
    """
    m = len(positions)
    if k >= m:
        raise DataError(f"k = {k} must be smaller than point count {m}")
    if k == 0:
        return np.zeros((m, 0), dtype=np.int64)
    sq = np.sum(positions**2, axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * (positions @ positions.T)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)
