import numpy as np
import pytest

from cylkern.errors import ParameterError
from cylkern.spatial import build_index, knn


def brute_knn(points, query, k):
    """Independent reference: full scan + lexsort by (d2, x, y, z)."""
    d = points - query
    d2 = d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0], d2))
    ids = order[: min(k, len(points))]
    return points[ids], np.sqrt(d2[ids])


class TestBuild:
    def test_single_point(self):
        idx = build_index(np.zeros((1, 3)))
        assert idx.knn([1.0, 0.0, 0.0], 1) == [(0, 1.0)]

    def test_rejects_empty_and_nan(self):
        with pytest.raises(ParameterError):
            build_index(np.zeros((0, 3)))
        bad = np.zeros((3, 3))
        bad[1, 2] = np.nan
        with pytest.raises(ParameterError):
            build_index(bad)

    def test_duplicate_points_ok(self):
        pts = np.zeros((40, 3))
        idx = build_index(pts)
        hits = idx.knn([0.0, 0.0, 0.0], 5)
        assert len(hits) == 5
        assert all(d == 0.0 for _, d in hits)


class TestQueries:
    def test_stored_point_at_distance_zero(self, rng):
        pts = rng.standard_normal((50, 3))
        idx = build_index(pts)
        i, d = idx.knn(pts[17], 1)[0]
        assert d == 0.0
        np.testing.assert_array_equal(pts[i], pts[17])

    def test_tie_broken_lexicographically(self):
        pts = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        idx = build_index(pts)
        hits = idx.knn([0.0, 0.0, 0.0], 2)
        assert pts[hits[0][0]].tolist() == [-1.0, 0.0, 0.0]

    def test_k_clamps_to_n(self, rng):
        pts = rng.standard_normal((4, 3))
        idx = build_index(pts)
        assert len(idx.knn(np.zeros(3), 10)) == 4

    def test_k_must_be_positive(self, rng):
        idx = build_index(rng.standard_normal((4, 3)))
        with pytest.raises(ParameterError):
            idx.knn(np.zeros(3), 0)

    def test_exact_vs_brute_force_random(self, rng):
        for trial in range(250):
            n = int(rng.integers(1, 120))
            pts = rng.standard_normal((n, 3))
            idx = build_index(pts)
            q = rng.standard_normal(3) * 1.5
            k = int(rng.integers(1, n + 3))
            got = knn(idx, q, k)
            ref_pts, ref_d = brute_knn(pts, q, k)
            got_pts = np.array([pts[i] for i, _ in got]).reshape(-1, 3)
            got_d = np.array([d for _, d in got])
            np.testing.assert_array_equal(got_pts, ref_pts)
            np.testing.assert_array_equal(got_d, ref_d)

    def test_exact_vs_brute_force_grid_ties(self, rng):
        # lattice coordinates produce massive distance ties
        for trial in range(120):
            n = int(rng.integers(2, 80))
            pts = rng.integers(-2, 3, size=(n, 3)).astype(float)
            idx = build_index(pts)
            q = rng.integers(-2, 3, size=3).astype(float)
            k = int(rng.integers(1, n + 1))
            got = knn(idx, q, k)
            ref_pts, ref_d = brute_knn(pts, q, k)
            got_pts = np.array([pts[i] for i, _ in got]).reshape(-1, 3)
            np.testing.assert_array_equal(got_pts, ref_pts)
            np.testing.assert_array_equal(np.array([d for _, d in got]), ref_d)

    def test_distances_nondecreasing(self, rng):
        pts = rng.standard_normal((200, 3))
        idx = build_index(pts)
        for _ in range(20):
            hits = idx.knn(rng.standard_normal(3), 17)
            d = [h[1] for h in hits]
            assert all(a <= b for a, b in zip(d, d[1:]))

    def test_permutation_invariance(self, rng):
        pts = np.round(rng.standard_normal((90, 3)) * 2) / 2  # tie-rich
        idx_a = build_index(pts)
        perm = rng.permutation(len(pts))
        idx_b = build_index(pts[perm])
        for _ in range(25):
            q = rng.standard_normal(3)
            k = int(rng.integers(1, 12))
            a = idx_a.knn(q, k)
            b = idx_b.knn(q, k)
            np.testing.assert_array_equal(
                np.array([pts[i] for i, _ in a]),
                np.array([pts[perm][i] for i, _ in b]))
            np.testing.assert_array_equal([d for _, d in a], [d for _, d in b])

    def test_batch_matches_single(self, rng):
        pts = rng.standard_normal((64, 3))
        idx = build_index(pts)
        queries = rng.standard_normal((10, 3))
        ids, dists = idx.knn_batch(queries, 5)
        for row, q in enumerate(queries):
            single = idx.knn(q, 5)
            np.testing.assert_array_equal(ids[row], [i for i, _ in single])
            np.testing.assert_array_equal(dists[row], [d for _, d in single])

    def test_squared_distances_consistent(self, rng):
        pts = rng.standard_normal((30, 3))
        idx = build_index(pts)
        q = rng.standard_normal((4, 3))
        _, d = idx.knn_batch(q, 3)
        _, d2 = idx.knn_batch(q, 3, squared=True)
        np.testing.assert_array_equal(d, np.sqrt(d2))
