import numpy as np
import pytest

from pointvector import geometry, oracle
from pointvector.errors import (
    DataError,
    EmptyNeighborhoodError,
    SizeError,
)
from pointvector.geometry import (
    NeighborIndex,
    PointSetBatch,
    ball_query,
    ball_query_points,
    farthest_point_sample,
    geometric_start,
    group_relative,
    knn,
)


def line_cloud():
    pos = np.array([[[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]]])
    return PointSetBatch(positions=pos, features=np.zeros((1, 4, 2)))


def random_cloud(rng, b=1, n=100, c=4):
    return PointSetBatch(positions=rng.uniform(-1, 1, (b, n, 3)),
                         features=rng.standard_normal((b, n, c)))


class TestFarthestPointSample:
    def test_farthest_pair(self):
        idx = farthest_point_sample(line_cloud(), 2, 0)
        assert idx.tolist() == [[0, 3]]

    def test_third_pick_maximizes_min_distance(self):
        idx = farthest_point_sample(line_cloud(), 3, 0)
        assert idx.tolist() == [[0, 3, 2]]

    def test_single_sample_is_start(self):
        idx = farthest_point_sample(line_cloud(), 1, 0)
        assert idx.tolist() == [[0]]

    def test_indices_distinct_and_deterministic(self):
        rng = np.random.default_rng(0)
        cloud = random_cloud(rng, b=3, n=64)
        a = farthest_point_sample(cloud, 32, 0)
        b = farthest_point_sample(cloud, 32, 0)
        assert np.array_equal(a, b)
        for row in a.reshape(3, -1):
            assert len(set(row.tolist())) == 32

    def test_duplicate_points_still_distinct(self):
        pos = np.zeros((1, 5, 3))
        pos[0, 3] = [1, 0, 0]
        cloud = PointSetBatch(positions=pos)
        idx = farthest_point_sample(cloud, 4, 0)
        assert len(set(idx[0].tolist())) == 4

    def test_size_errors(self):
        with pytest.raises(SizeError):
            farthest_point_sample(line_cloud(), 5, 0)
        with pytest.raises(SizeError):
            farthest_point_sample(line_cloud(), 2, 9)

    def test_per_batch_start(self):
        rng = np.random.default_rng(1)
        cloud = random_cloud(rng, b=2, n=16)
        idx = farthest_point_sample(cloud, 4, np.array([3, 7]))
        assert idx[0, 0] == 3 and idx[1, 0] == 7

    def test_geometric_start_permutation_stable(self):
        rng = np.random.default_rng(2)
        cloud = random_cloud(rng, n=50)
        perm = rng.permutation(50)
        permuted = PointSetBatch(positions=cloud.positions[:, perm],
                                 features=cloud.features[:, perm])
        s0 = geometric_start(cloud)[0]
        s1 = geometric_start(permuted)[0]
        assert np.allclose(cloud.positions[0, s0], permuted.positions[0, s1])


class TestBallQuery:
    def test_in_radius_scan_order(self):
        nbr = ball_query(np.array([[0]]), line_cloud(), 1.5, 2)
        assert nbr.indices.tolist() == [[[0, 1]]]
        assert not nbr.pad_mask.any()

    def test_padding_repeats_first(self):
        nbr = ball_query(np.array([[0]]), line_cloud(), 0.5, 2)
        assert nbr.indices.tolist() == [[[0, 0]]]
        assert nbr.pad_mask.tolist() == [[[False, True]]]

    def test_three_neighbors(self):
        nbr = ball_query(np.array([[0]]), line_cloud(), 2.5, 3)
        assert nbr.indices.tolist() == [[[0, 1, 2]]]

    def test_radius_bound_on_random_clouds(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            cloud = random_cloud(rng, n=200)
            centers = rng.integers(0, 200, size=(1, 32))
            nbr = ball_query(centers, cloud, 0.4, 8)
            rel = geometry.relative_positions(cloud.positions, nbr)
            d = np.linalg.norm(rel, axis=-1)
            assert (d[~nbr.pad_mask] <= 0.4 + 1e-12).all()

    def test_empty_neighborhood_cross_cloud(self):
        cloud = line_cloud()
        far = np.array([[[100.0, 100.0, 100.0]]])
        with pytest.raises(EmptyNeighborhoodError):
            ball_query_points(far, cloud, 0.5, 2)

    def test_joint_scaling_preserves_membership(self):
        rng = np.random.default_rng(4)
        for scale in (0.8, 1.2, 2.0):
            cloud = random_cloud(rng, n=128)
            centers = rng.integers(0, 128, size=(1, 16))
            nbr = ball_query(centers, cloud, 0.35, 8)
            scaled = PointSetBatch(positions=cloud.positions * scale)
            nbr_s = ball_query(centers, scaled, 0.35 * scale, 8)
            assert np.array_equal(nbr.indices, nbr_s.indices)
            assert np.array_equal(nbr.pad_mask, nbr_s.pad_mask)


class TestKnn:
    def test_nearest_two_on_line(self):
        nbr = knn(np.array([[0]]), line_cloud(), 2)
        assert nbr.indices.tolist() == [[[0, 1]]]

    def test_tie_breaks_to_lower_index(self):
        pos = np.array([[[0.0, 0, 0], [1, 0, 0], [-1, 0, 0]]])
        nbr = knn(np.array([[0]]), PointSetBatch(positions=pos), 2)
        assert nbr.indices.tolist() == [[[0, 1]]]

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(5)
        cloud = random_cloud(rng, b=2, n=100)
        centers = np.stack([rng.permutation(100)[:10] for _ in range(2)])
        nbr = knn(centers, cloud, 8)
        batch = np.arange(2)[:, None]
        expected = oracle.naive_knn(cloud.positions[batch, centers],
                                    cloud.positions, 8)
        assert np.array_equal(nbr.indices, expected)

    def test_matches_naive_on_many_sizes(self):
        rng = np.random.default_rng(6)
        for n, k in ((10, 3), (57, 8), (130, 16)):
            cloud = random_cloud(rng, n=n)
            centers = rng.integers(0, n, size=(1, 7))
            nbr = knn(centers, cloud, k)
            expected = oracle.naive_knn(
                cloud.positions[np.arange(1)[:, None], centers],
                cloud.positions, k)
            assert np.array_equal(nbr.indices, expected)

    def test_k_too_large(self):
        with pytest.raises(SizeError):
            knn(np.array([[0]]), line_cloud(), 5)


class TestGroupRelative:
    def test_self_neighbor_is_zero(self):
        cloud = line_cloud()
        nbr = knn(np.array([[1]]), cloud, 1)
        rel_feat, rel_pos = group_relative(cloud, nbr)
        assert np.all(rel_feat == 0) and np.all(rel_pos == 0)

    def test_feature_offset(self):
        pos = np.zeros((1, 2, 3))
        pos[0, 1, 0] = 1.0
        feat = np.array([[[1.0, 2.0], [3.0, 5.0]]])
        cloud = PointSetBatch(positions=pos, features=feat)
        nbr = NeighborIndex(indices=np.array([[[1]]]),
                            pad_mask=np.zeros((1, 1, 1), bool),
                            centers=np.array([[0]]))
        rel_feat, rel_pos = group_relative(cloud, nbr)
        assert rel_feat.tolist() == [[[[2.0, 3.0]]]]
        assert rel_pos.tolist() == [[[[1.0, 0.0, 0.0]]]]

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(7)
        cloud = random_cloud(rng, n=30, c=5)
        centers = rng.integers(0, 30, size=(1, 6))
        nbr = knn(centers, cloud, 4)
        rel_feat, rel_pos = group_relative(cloud, nbr)
        for i in range(6):
            for j in range(4):
                src = nbr.indices[0, i, j]
                ctr = centers[0, i]
                assert np.allclose(rel_feat[0, i, j],
                                   cloud.features[0, src] - cloud.features[0, ctr])
                assert np.allclose(rel_pos[0, i, j],
                                   cloud.positions[0, src] - cloud.positions[0, ctr])

    def test_requires_features(self):
        cloud = PointSetBatch(positions=np.zeros((1, 3, 3)))
        nbr = knn(np.array([[0]]), cloud, 2)
        with pytest.raises(DataError):
            group_relative(cloud, nbr)


class TestPointSetBatch:
    def test_shape_validation(self):
        with pytest.raises(SizeError):
            PointSetBatch(positions=np.zeros((3, 3)))
        with pytest.raises(SizeError):
            PointSetBatch(positions=np.zeros((1, 2, 3)),
                          features=np.zeros((1, 3, 4)))

    def test_nonfinite_positions_rejected(self):
        pos = np.zeros((1, 2, 3))
        pos[0, 0, 0] = np.nan
        with pytest.raises(DataError):
            PointSetBatch(positions=pos)

    def test_label_range_check(self):
        cloud = PointSetBatch(positions=np.zeros((1, 2, 3)),
                              labels=np.array([[0, 5]]))
        with pytest.raises(DataError):
            cloud.check_labels(3)
