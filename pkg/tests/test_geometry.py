import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointvb.errors import DataError
from pointvb.geometry import (
    COLOR_JITTER_SIGMA,
    TransformSpec,
    apply_transform,
    farthest_point_sampling,
    knn_indices,
    sample_transform,
    voxel_downsample,
)
from pointvb.pcio import ABSENT, PointCloud, SparseLabelSet


def random_cloud(rng, m):
    return PointCloud(rng.normal(scale=2.0, size=(m, 3)),
                      rng.uniform(0, 255, size=(m, 3)))


def fps_reference(positions, h, start):
    """Brute-force max-min selection with lowest-index tie-break."""
    selected = [start]
    for _ in range(h - 1):
        best, best_d = None, -1.0
        for i in range(len(positions)):
            if i in selected:
                continue
            d = min(np.linalg.norm(positions[i] - positions[j]) for j in selected)
            if d > best_d:
                best, best_d = i, d
        selected.append(best)
    return selected


class TestSampleTransform:
    def test_deterministic(self):
        a = sample_transform(np.random.default_rng(11), 100)
        b = sample_transform(np.random.default_rng(11), 100)
        assert a.z_rotation == b.z_rotation
        assert a.mirror_flags == b.mirror_flags
        np.testing.assert_array_equal(a.color_jitter, b.color_jitter)

    def test_mirror_rate(self):
        # Bernoulli(0.5) over 10k draws: 5 sigma is ~0.025
        rng = np.random.default_rng(0)
        flags = np.array([sample_transform(rng, 1).mirror_flags
                          for _ in range(10_000)])
        rates = flags.mean(axis=0)
        assert np.all(rates > 0.47) and np.all(rates < 0.53)

    def test_jitter_scale_and_rotation_range(self):
        rng = np.random.default_rng(1)
        jitter = np.concatenate(
            [sample_transform(rng, 10).color_jitter.ravel() for _ in range(400)]
        )
        assert 12.4 < jitter.std() < 13.1
        assert abs(COLOR_JITTER_SIGMA - 12.75) < 1e-12
        angles = [sample_transform(rng, 1).z_rotation for _ in range(10_000)]
        assert 0.0 <= min(angles) and max(angles) < 2 * np.pi
        assert 2.8 < np.mean(angles) < 3.5  # ~pi for U[0, 2pi)


class TestApplyTransform:
    def test_identity(self):
        rng = np.random.default_rng(2)
        cloud = random_cloud(rng, 60)
        out = apply_transform(cloud, TransformSpec.identity(60))
        np.testing.assert_array_equal(out.positions, cloud.positions)
        np.testing.assert_array_equal(out.colors, cloud.colors)

    def test_quarter_turn(self):
        cloud = PointCloud(np.array([[1.0, 0.0, 0.0]]), np.zeros((1, 3)))
        spec = TransformSpec(np.pi / 2, (False, False, False), np.zeros((1, 3)))
        out = apply_transform(cloud, spec)
        np.testing.assert_allclose(out.positions, [[0.0, 1.0, 0.0]], atol=1e-12)

    def test_mirror_x(self):
        cloud = PointCloud(np.array([[1.0, 2.0, 3.0]]), np.zeros((1, 3)))
        spec = TransformSpec(0.0, (True, False, False), np.zeros((1, 3)))
        out = apply_transform(cloud, spec)
        np.testing.assert_array_equal(out.positions, [[-1.0, 2.0, 3.0]])

    def test_jitter_clamped(self):
        cloud = PointCloud(np.zeros((1, 3)), np.array([[250.0, 5.0, 100.0]]))
        spec = TransformSpec(0.0, (False, False, False),
                             np.array([[20.0, -20.0, 3.0]]))
        out = apply_transform(cloud, spec)
        np.testing.assert_array_equal(out.colors, [[255.0, 0.0, 103.0]])

    def test_jitter_length_mismatch(self):
        cloud = random_cloud(np.random.default_rng(0), 5)
        with pytest.raises(DataError):
            apply_transform(cloud, TransformSpec.identity(4))

    def test_isometry(self):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng, 40)
        spec = sample_transform(rng, 40)
        out = apply_transform(cloud, spec)
        before = np.linalg.norm(
            cloud.positions[:, None] - cloud.positions[None, :], axis=-1)
        after = np.linalg.norm(
            out.positions[:, None] - out.positions[None, :], axis=-1)
        np.testing.assert_allclose(after, before, atol=1e-9)

    def test_rotation_composition(self):
        rng = np.random.default_rng(4)
        cloud = random_cloud(rng, 30)
        a, b = 1.1, 2.7
        m = len(cloud)
        once = apply_transform(
            apply_transform(cloud, TransformSpec(a, (False,) * 3, np.zeros((m, 3)))),
            TransformSpec(b, (False,) * 3, np.zeros((m, 3))),
        )
        combined = apply_transform(
            cloud, TransformSpec((a + b) % (2 * np.pi), (False,) * 3,
                                 np.zeros((m, 3))))
        np.testing.assert_allclose(once.positions, combined.positions, atol=1e-9)


class TestFarthestPointSampling:
    def test_collinear_oracle(self):
        positions = np.zeros((10, 3))
        positions[:, 0] = np.arange(10)
        cloud = PointCloud(positions, np.zeros((10, 3)))
        out = farthest_point_sampling(cloud, 3, start=0)
        np.testing.assert_array_equal(out.indices, [0, 9, 4])

    def test_single(self):
        cloud = random_cloud(np.random.default_rng(0), 8)
        assert list(farthest_point_sampling(cloud, 1, start=5).indices) == [5]

    def test_exhaustion_is_permutation(self):
        cloud = random_cloud(np.random.default_rng(1), 33)
        out = farthest_point_sampling(cloud, 33, start=7)
        assert sorted(out.indices) == list(range(33))

    def test_exhaustion_with_duplicates(self):
        positions = np.zeros((6, 3))
        positions[:3, 0] = [0.0, 1.0, 2.0]
        positions[3:, 0] = [0.0, 1.0, 2.0]
        cloud = PointCloud(positions, np.zeros((6, 3)))
        out = farthest_point_sampling(cloud, 6, start=0)
        assert sorted(out.indices) == list(range(6))

    def test_h_too_large(self):
        cloud = random_cloud(np.random.default_rng(2), 5)
        with pytest.raises(DataError):
            farthest_point_sampling(cloud, 6, start=0)

    @given(st.integers(0, 10_000), st.integers(2, 64))
    @settings(max_examples=60, deadline=None)
    def test_matches_brute_force(self, seed, m):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, m)
        h = int(rng.integers(1, m + 1))
        start = int(rng.integers(m))
        out = farthest_point_sampling(cloud, h, start)
        np.testing.assert_array_equal(
            out.indices, fps_reference(cloud.positions, h, start))

    def test_min_distance_non_increasing(self):
        rng = np.random.default_rng(9)
        cloud = random_cloud(rng, 128)
        full = farthest_point_sampling(cloud, 128, start=0).indices
        last = np.inf
        for h in range(2, 129):
            sel = cloud.positions[full[:h]]
            d = np.linalg.norm(sel[:, None] - sel[None, :], axis=-1)
            np.fill_diagonal(d, np.inf)
            current = d.min()
            assert current <= last + 1e-12
            last = current


class TestVoxelDownsample:
    def test_no_merging_when_sparse(self):
        rng = np.random.default_rng(5)
        positions = rng.uniform(0, 10, size=(30, 3))
        cloud = PointCloud(positions, rng.uniform(0, 255, size=(30, 3)))
        labels = SparseLabelSet(rng.integers(0, 4, size=30), 4)
        out_cloud, out_labels, mapping = voxel_downsample(cloud, labels, 1e-6)
        assert len(out_cloud) == 30
        np.testing.assert_allclose(
            out_cloud.positions[mapping], cloud.positions, atol=1e-9)
        np.testing.assert_array_equal(out_labels.labels[mapping], labels.labels)

    def test_centroid(self):
        cloud = PointCloud(np.array([[0.0, 0, 0], [0.005, 0, 0]]),
                           np.array([[10.0, 0, 0], [20.0, 0, 0]]))
        labels = SparseLabelSet(np.array([ABSENT, ABSENT]), 4)
        out_cloud, out_labels, mapping = voxel_downsample(cloud, labels, 0.02)
        assert len(out_cloud) == 1
        np.testing.assert_allclose(out_cloud.positions, [[0.0025, 0, 0]])
        np.testing.assert_allclose(out_cloud.colors, [[15.0, 0, 0]])
        assert out_labels.labels[0] == ABSENT
        np.testing.assert_array_equal(mapping, [0, 0])

    def test_majority_label(self):
        cloud = PointCloud(np.zeros((3, 3)) + 0.001, np.zeros((3, 3)))
        labels = SparseLabelSet(np.array([1, 1, 2]), 4)
        _, out_labels, _ = voxel_downsample(cloud, labels, 0.02)
        assert out_labels.labels[0] == 1

    def test_majority_tie_lowest_class(self):
        cloud = PointCloud(np.zeros((2, 3)) + 0.001, np.zeros((2, 3)))
        labels = SparseLabelSet(np.array([3, 1]), 4)
        _, out_labels, _ = voxel_downsample(cloud, labels, 0.02)
        assert out_labels.labels[0] == 1

    def test_mapping_total_and_count_bound(self):
        rng = np.random.default_rng(6)
        cloud = random_cloud(rng, 300)
        labels = SparseLabelSet(rng.integers(0, 4, size=300), 4)
        out_cloud, _, mapping = voxel_downsample(cloud, labels, 0.5)
        assert len(out_cloud) <= 300
        assert mapping.shape == (300,)
        assert mapping.min() >= 0 and mapping.max() == len(out_cloud) - 1

    def test_bad_voxel_size(self):
        cloud = random_cloud(np.random.default_rng(0), 4)
        labels = SparseLabelSet(np.zeros(4, dtype=int), 4)
        with pytest.raises(DataError):
            voxel_downsample(cloud, labels, 0.0)


class TestKnnIndices:
    def test_simple_line(self):
        positions = np.zeros((4, 3))
        positions[:, 0] = [0.0, 1.0, 2.0, 10.0]
        nbrs = knn_indices(positions, 2)
        np.testing.assert_array_equal(nbrs[0], [1, 2])
        np.testing.assert_array_equal(nbrs[3], [2, 1])

    def test_k_zero(self):
        assert knn_indices(np.zeros((5, 3)), 0).shape == (5, 0)

    def test_k_too_large(self):
        with pytest.raises(DataError):
            knn_indices(np.zeros((3, 3)), 3)
