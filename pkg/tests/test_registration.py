import numpy as np
import pytest

import cylkern.autodiff as ad
from cylkern.autodiff import Tensor, grad_check
from cylkern.errors import DegenerateGeometryError, ParameterError
from cylkern.pointcloud import (RigidTransform, gen_synthetic,
                                normalize_unit_sphere, random_rotation,
                                rotation_from_axis_angle)
from cylkern.registration import (METRIC_COLUMNS, compose_euler_zyx,
                                  compute_metrics, euler_zyx, icp_baseline,
                                  icp_residual_trace, loss_rt, loss_rt_op,
                                  procrustes, procrustes_backward,
                                  procrustes_op, soft_correspondence,
                                  soft_correspondence_op, svd_safeguard,
                                  _procrustes_forward)


class TestSoftCorrespondence:
    def test_row_sums_one(self, rng):
        c = soft_correspondence(rng.standard_normal((6, 8)),
                                rng.standard_normal((9, 8)),
                                rng.standard_normal((9, 3)), 0.5)
        np.testing.assert_allclose(c.weights.sum(axis=1), 1.0, atol=1e-12)
        assert c.weights.min() >= 0.0

    def test_sharp_temperature_picks_matching_index(self, rng):
        desc = np.eye(7) * 3.0 + 0.01 * rng.standard_normal((7, 7))
        pts = rng.standard_normal((7, 3))
        c = soft_correspondence(desc, desc, pts, temperature=1e-3)
        assert np.array_equal(np.argmax(c.weights, axis=1), np.arange(7))
        np.testing.assert_allclose(c.virtual, pts, atol=1e-6)

    def test_uniform_descriptors_give_centroid(self, rng):
        desc = np.ones((5, 4))
        pts = rng.standard_normal((8, 3))
        c = soft_correspondence(desc, np.ones((8, 4)), pts, 0.1)
        np.testing.assert_allclose(c.virtual,
                                   np.tile(pts.mean(0), (5, 1)), atol=1e-12)

    def test_temperature_validated(self, rng):
        with pytest.raises(ParameterError):
            soft_correspondence(np.ones((2, 2)), np.ones((2, 2)),
                                np.ones((2, 3)), 0.0)

    def test_graph_matches_numpy(self, rng):
        ds = rng.standard_normal((5, 6))
        dt = rng.standard_normal((7, 6))
        pts = rng.standard_normal((7, 3))
        w_t, v_t = soft_correspondence_op(Tensor(ds), Tensor(dt), pts, 0.3)
        c = soft_correspondence(ds, dt, pts, 0.3)
        assert np.abs(w_t.data - c.weights).max() < 1e-12
        assert np.abs(v_t.data - c.virtual).max() < 1e-12


class TestProcrustes:
    def test_identity(self, rng):
        src = rng.standard_normal((10, 3))
        T = procrustes(src, src)
        assert np.abs(T.R - np.eye(3)).max() <= 1e-12
        assert np.abs(T.t).max() <= 1e-12

    def test_construct_then_recover(self, rng):
        for trial in range(200):
            src = rng.standard_normal((8, 3))
            R0 = rotation_from_axis_angle(rng.standard_normal(3),
                                          rng.uniform(0, np.pi))
            t0 = rng.standard_normal(3)
            T = procrustes(src, src @ R0.T + t0)
            assert np.linalg.norm(T.R - R0) < 1e-9
            assert np.linalg.norm(T.t - t0) < 1e-9

    def test_weighted_recover(self, rng):
        src = rng.standard_normal((12, 3))
        R0 = rotation_from_axis_angle([1.0, 2.0, 0.5], 0.8)
        t0 = np.array([0.3, -0.2, 1.0])
        w = rng.uniform(0.1, 2.0, 12)
        T = procrustes(src, src @ R0.T + t0, weights=w)
        assert np.linalg.norm(T.R - R0) < 1e-9

    def test_mirror_still_proper_rotation(self, rng):
        # mirrored planar source: best orthogonal map is a reflection,
        # the determinant fix must keep det = +1
        src = rng.standard_normal((20, 3))
        src[:, 2] = 0.0
        mirrored = src.copy()
        mirrored[:, 0] = -mirrored[:, 0]
        T = procrustes(src, mirrored)
        assert abs(np.linalg.det(T.R) - 1.0) <= 1e-9

    def test_rank_deficient_rejected(self, rng):
        src = rng.standard_normal((10, 3))
        with pytest.raises(DegenerateGeometryError):
            procrustes(src, np.tile([1.0, 2.0, 3.0], (10, 1)))

    def test_needs_three_points(self):
        with pytest.raises(ParameterError):
            procrustes(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_equivariance_under_common_rotation(self, rng):
        src = rng.standard_normal((15, 3))
        virt = src @ rotation_from_axis_angle([0.2, 1, 0.1], 0.6).T + [0.1, 0, 0]
        base = procrustes(src, virt)
        for _ in range(20):
            Q = rotation_from_axis_angle(rng.standard_normal(3),
                                         rng.uniform(0, np.pi))
            out = procrustes(src @ Q.T, virt @ Q.T)
            assert np.abs(out.R - Q @ base.R @ Q.T).max() < 1e-9
            assert np.abs(out.t - Q @ base.t).max() < 1e-9


class TestProcrustesBackward:
    def _fd_check(self, rng, weights=None, n=6):
        src = rng.standard_normal((n, 3))
        virt = src @ rotation_from_axis_angle([1, 0.3, 2], 0.7).T \
            + rng.standard_normal(3) * 0.1 + 0.05 * rng.standard_normal((n, 3))
        gR = rng.standard_normal((3, 3))
        gt = rng.standard_normal(3)

        def value(s, v):
            R, t, _ = _procrustes_forward(s, v, weights)
            return float((gR * R).sum() + gt @ t)

        _, _, cache = _procrustes_forward(src, virt, weights)
        g_src, g_virt = procrustes_backward(cache, gR, gt)
        worst = 0.0
        eps = 1e-6
        for arr, grad in ((src, g_src), (virt, g_virt)):
            for i in range(arr.shape[0]):
                for c in range(3):
                    orig = arr[i, c]
                    arr[i, c] = orig + eps
                    hi = value(src, virt)
                    arr[i, c] = orig - eps
                    lo = value(src, virt)
                    arr[i, c] = orig
                    fd = (hi - lo) / (2 * eps)
                    an = grad[i, c]
                    worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1.0))
        return worst

    def test_matches_finite_differences(self, rng):
        for trial in range(10):
            assert self._fd_check(rng) < 1e-4

    def test_weighted_matches_finite_differences(self, rng):
        w = rng.uniform(0.2, 2.0, 6)
        assert self._fd_check(rng, weights=w) < 1e-4

    def test_degenerate_spectrum_zero_grad_no_nan(self, rng):
        # symmetric (spherical) layout gives (near-)equal singular values
        src = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0],
                        [0, 0, 1], [0, 0, -1.0]])
        virt = src.copy()
        _, _, cache = _procrustes_forward(src, virt)
        svd_safeguard.reset()
        g_src, g_virt = procrustes_backward(cache, np.ones((3, 3)), np.zeros(3))
        assert svd_safeguard.count == 1
        assert np.isfinite(g_src).all() and np.isfinite(g_virt).all()
        # rotation-path gradients are zeroed; only the centroid path remains
        assert np.abs(g_src - g_src.mean(axis=0)).max() <= 1e-15

    def test_translation_gradient_identity_subcase(self, rng):
        # dL/dt = gt flows to the virtual centroid as gt/N when R is fixed
        src = rng.standard_normal((6, 3))
        virt = src @ rotation_from_axis_angle([0.3, 1, 0], 0.4).T + [1.0, 2.0, 3.0]
        _, _, cache = _procrustes_forward(src, virt)
        gt = np.array([1.0, -2.0, 0.5])
        _, g_virt = procrustes_backward(cache, np.zeros((3, 3)), gt)
        # summing per-point virtual gradients recovers gt exactly
        np.testing.assert_allclose(g_virt.sum(axis=0), gt, atol=1e-9)

    def test_graph_op_end_to_end(self, rng):
        src = rng.standard_normal((6, 3))
        proj = rng.standard_normal((4, 3))

        def fn(v):
            rt = procrustes_op(ad.constant(src), v)
            return ad.reduce_sum(ad.mul(rt, ad.constant(proj)))

        virt = src @ rotation_from_axis_angle([1, 1, 0], 0.5).T + 0.1
        assert grad_check(fn, [virt]) < 1e-4


class TestLossRt:
    def test_zero_at_truth(self):
        R = rotation_from_axis_angle([1, 2, 3], 0.7)
        t = np.array([0.1, 0.2, 0.3])
        assert loss_rt(R, t, R, t) <= 1e-30
        assert loss_rt(np.eye(3), t, np.eye(3), t) == 0.0

    def test_translation_offset(self):
        R = np.eye(3)
        assert abs(loss_rt(R, np.array([0.1, 0, 0]), R, np.zeros(3)) - 0.01) < 1e-15

    def test_left_rotation_invariance(self, rng):
        R = rotation_from_axis_angle([0.3, 1, 0.2], 0.5)
        R_gt = rotation_from_axis_angle([1, 0, 1], 0.9)
        t = rng.standard_normal(3)
        base = loss_rt(R, t, R_gt, t)
        for _ in range(20):
            Q = rotation_from_axis_angle(rng.standard_normal(3),
                                         rng.uniform(0, np.pi))
            assert abs(loss_rt(Q @ R, t, Q @ R_gt, t) - base) < 1e-9

    def test_graph_matches_numpy(self, rng):
        R = rotation_from_axis_angle([1, 1, 1], 0.4)
        t = rng.standard_normal(3)
        R_gt = rotation_from_axis_angle([0, 1, 0], 0.8)
        t_gt = rng.standard_normal(3)
        rt = Tensor(np.vstack([R, t]))
        got = loss_rt_op(rt, R_gt, t_gt).data
        assert abs(got - loss_rt(R, t, R_gt, t_gt)) < 1e-12


class TestEuler:
    def test_identity(self):
        np.testing.assert_allclose(euler_zyx(np.eye(3)), (0.0, 0.0, 0.0))

    def test_round_trip_example(self):
        R = compose_euler_zyx(10.0, 20.0, 30.0)
        np.testing.assert_allclose(euler_zyx(R), (10.0, 20.0, 30.0), atol=1e-9)
        np.testing.assert_allclose(compose_euler_zyx(*euler_zyx(R)), R,
                                   atol=1e-9)

    def test_round_trip_random(self, rng):
        for _ in range(300):
            R = rotation_from_axis_angle(rng.standard_normal(3),
                                         rng.uniform(0, np.pi))
            assert np.abs(compose_euler_zyx(*euler_zyx(R)) - R).max() < 1e-9

    def test_gimbal_lock_fallback(self):
        R = compose_euler_zyx(25.0, 90.0, 0.0)
        a, b, g = euler_zyx(R)
        assert g == 0.0 and abs(b - 90.0) < 1e-9
        np.testing.assert_allclose(compose_euler_zyx(a, b, g), R, atol=1e-9)

    def test_gimbal_lock_negative(self):
        R = compose_euler_zyx(-40.0, -90.0, 0.0)
        np.testing.assert_allclose(compose_euler_zyx(*euler_zyx(R)), R,
                                   atol=1e-9)


def brute_metrics(preds, gts):
    """Scalar reimplementation of the metric pooling."""
    rs, ts = [], []
    for p, g in zip(preds, gts):
        ea = euler_zyx(p.R)
        eb = euler_zyx(g.R)
        for i in range(3):
            rs.append(ea[i] - eb[i])
            ts.append(p.t[i] - g.t[i])
    rs = np.array(rs)
    ts = np.array(ts)
    return (np.mean(rs ** 2), np.sqrt(np.mean(rs ** 2)), np.mean(np.abs(rs)),
            np.mean(ts ** 2), np.sqrt(np.mean(ts ** 2)), np.mean(np.abs(ts)))


class TestMetrics:
    def test_perfect_predictions(self, rng):
        T = [random_rotation(40.0, seed=s, with_translation=True)
             for s in range(4)]
        m = compute_metrics(T, T)
        assert m.as_row() == (0.0,) * 6

    def test_hand_case_single_pair(self):
        pred = RigidTransform(compose_euler_zyx(1.0, -1.0, 1.0), np.zeros(3))
        gt = RigidTransform(np.eye(3), np.zeros(3))
        m = compute_metrics([pred], [gt])
        assert abs(m.r_mse - 1.0) < 1e-9
        assert abs(m.r_mae - 1.0) < 1e-9
        assert m.t_mse == 0.0

    def test_rmse_is_sqrt_mse(self, rng):
        preds = [random_rotation(30.0, seed=s, with_translation=True)
                 for s in range(6)]
        gts = [random_rotation(30.0, seed=100 + s, with_translation=True)
               for s in range(6)]
        m = compute_metrics(preds, gts)
        assert abs(m.r_rmse - np.sqrt(m.r_mse)) <= 1e-12
        assert abs(m.t_rmse - np.sqrt(m.t_mse)) <= 1e-12

    def test_matches_brute_force(self, rng):
        preds = [random_rotation(50.0, seed=s, with_translation=True)
                 for s in range(8)]
        gts = [random_rotation(50.0, seed=200 + s, with_translation=True)
               for s in range(8)]
        m = np.array(compute_metrics(preds, gts).as_row())
        np.testing.assert_allclose(m, brute_metrics(preds, gts), atol=1e-12)

    def test_column_names(self):
        assert METRIC_COLUMNS == ("R-MSE", "R-RMSE", "R-MAE",
                                  "T-MSE", "T-RMSE", "T-MAE")
        m = compute_metrics([RigidTransform.identity()],
                            [RigidTransform.identity()])
        assert tuple(m.as_dict()) == METRIC_COLUMNS


class TestIcp:
    def test_identical_clouds_identity(self, rng):
        pts = rng.standard_normal((50, 3))
        T = icp_baseline(pts, pts)
        assert np.abs(T.R - np.eye(3)).max() < 1e-12
        assert np.abs(T.t).max() < 1e-12

    def test_small_rotation_converges(self):
        cloud = normalize_unit_sphere(gen_synthetic("composite", 200, 0.0, 1))
        T0 = random_rotation(5.0, seed=3)
        tgt = cloud.points @ T0.R.T + T0.t
        T = icp_baseline(cloud.points, tgt, max_iters=50)
        moved = cloud.points @ T.R.T + T.t
        assert np.abs(moved - tgt).max() < 1e-6

    def test_residual_monotone_nonincreasing(self):
        cloud = normalize_unit_sphere(gen_synthetic("cube", 150, 0.0, 5))
        T0 = random_rotation(30.0, seed=9, with_translation=True)
        tgt = cloud.points @ T0.R.T + T0.t
        trace = icp_residual_trace(cloud.points, tgt, max_iters=30)
        assert all(a >= b - 1e-12 for a, b in zip(trace, trace[1:]))

    def test_empty_rejected(self, rng):
        with pytest.raises(ParameterError):
            icp_baseline(np.zeros((0, 3)), rng.standard_normal((5, 3)))
