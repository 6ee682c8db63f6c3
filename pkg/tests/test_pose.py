import math

import numpy as np
import pytest
from scipy.linalg import polar

from steerpose import so3
from steerpose.errors import (AmbiguousProjection, DegenerateBasis, EmptyOccupancy, FormatError,
                              ValidationError)
from steerpose.pose import (OccupancyGrid, PoseParametrization, RigidPose, SymmetryGroup, com_translation,
                            complete_two_vector, loss, metrics, nfold_invariance_residual, nfold_param,
                            normalize_backward, output_rep, project_to_rotation, read_pose, rho_h,
                            rotation_error, surface_points, transform_param, write_pose)


def param(m, mode="pseudovector"):
    return PoseParametrization.from_array(np.asarray(m).T.ravel(), mode, normalize=False)


class TestCenterOfMass:
    def test_single_voxel(self):
        mask = np.zeros((5, 6, 7), bool)
        mask[1, 2, 3] = True
        aff = np.diag([2.0, 3.0, 4.0, 1.0])
        aff[:3, 3] = [10, -5, 1]
        np.testing.assert_allclose(com_translation(OccupancyGrid(mask, aff)), [12.0, 1.0, 13.0])

    def test_symmetric_cube(self):
        mask = np.zeros((9, 9, 9), bool)
        mask[2:7, 2:7, 2:7] = True
        aff = np.eye(4)
        aff[:3, 3] = -4.0
        np.testing.assert_allclose(com_translation(OccupancyGrid(mask, aff)), 0.0, atol=1e-15)

    def test_brute_force(self, rng):
        mask = rng.random((6, 5, 4)) < 0.3
        aff = np.eye(4)
        aff[:3, :3] = so3.sample_rotation(rng) * 1.5
        aff[:3, 3] = rng.standard_normal(3)
        acc, n = np.zeros(3), 0
        for i, j, k in np.ndindex(*mask.shape):
            if mask[i, j, k]:
                acc += aff[:3, :3] @ [i, j, k] + aff[:3, 3]
                n += 1
        np.testing.assert_allclose(com_translation(OccupancyGrid(mask, aff)), acc / n, atol=1e-12)

    def test_empty(self):
        with pytest.raises(EmptyOccupancy):
            com_translation(OccupancyGrid(np.zeros((3, 3, 3), bool)))

    def test_surface_of_cube(self):
        mask = np.zeros((7, 7, 7), bool)
        mask[1:6, 1:6, 1:6] = True
        assert len(surface_points(OccupancyGrid(mask))) == 5 ** 3 - 3 ** 3


class TestProjection:
    def test_idempotent(self, rng):
        for _ in range(20):
            r = so3.sample_rotation(rng)
            np.testing.assert_allclose(project_to_rotation(param(r)), r, atol=1e-12)

    def test_reflection_flips_x(self, rng):
        r = so3.sample_rotation(rng)
        m = r.copy()
        m[:, 0] *= -1
        out = project_to_rotation(param(m))
        assert np.linalg.det(out) == pytest.approx(1.0, abs=1e-10)
        np.testing.assert_allclose(out[:, 1:], m[:, 1:], atol=1e-12)
        np.testing.assert_allclose(out[:, 0], -m[:, 0], atol=1e-12)

    def test_small_noise_matches_procrustes(self, rng):
        for _ in range(20):
            r = so3.sample_rotation(rng)
            noisy = r + 1e-3 * rng.standard_normal((3, 3))
            noisy /= np.linalg.norm(noisy, axis=0)
            out = project_to_rotation(param(noisy))
            ref = polar(noisy)[0]
            assert math.degrees(so3.geodesic_distance(out, ref)) < 1e-9
            assert math.degrees(so3.geodesic_distance(out, r)) < 0.2

    def test_rank_deficient(self):
        e = np.array([1.0, 0.0, 0.0])
        with pytest.raises(AmbiguousProjection):
            project_to_rotation(PoseParametrization(e, e, e))

    def test_equivariance(self, rng):
        for _ in range(20):
            p = PoseParametrization.from_array(rng.standard_normal(9))
            r = so3.sample_rotation(rng)
            lhs = project_to_rotation(transform_param(p, r))
            np.testing.assert_allclose(lhs, r @ project_to_rotation(p), atol=1e-9)


class TestLoss:
    def test_exact_is_zero(self, rng):
        r = so3.sample_rotation(rng)
        for beta in (0.1, 1.0, 3.0):
            assert loss(param(r), r, beta)[0] == 0.0

    def test_mirror_x_is_zero(self, rng):
        r = so3.sample_rotation(rng)
        m = r.copy()
        m[:, 0] *= -1
        assert loss(param(m), r)[0] == pytest.approx(0.0, abs=1e-15)

    def test_sixty_degrees_on_y(self):
        m = np.eye(3)
        m[:, 1] = [0.0, 0.5, math.sqrt(3) / 2]
        assert loss(param(m), np.eye(3), beta=1.0)[0] == pytest.approx(0.5, abs=1e-15)

    def test_appendix_identities(self, rng):
        for _ in range(50):
            gt = so3.sample_rotation(rng)
            p = PoseParametrization.from_array(rng.standard_normal(9))
            ang = [math.acos(np.clip(v @ gt[:, i], -1, 1)) for i, v in enumerate(p.vectors())]
            ref = abs(math.sin(ang[0])) + 0.7 * (abs(math.sin(ang[1] / 2)) + abs(math.sin(ang[2] / 2)))
            assert loss(p, gt, 0.7)[0] == pytest.approx(ref, abs=1e-12)

    def test_nonnegative(self, rng):
        for _ in range(100):
            p = PoseParametrization.from_array(rng.standard_normal(9))
            assert loss(p, so3.sample_rotation(rng))[0] >= 0.0

    def test_non_unit_rejected(self):
        p = PoseParametrization(np.array([2.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0]))
        with pytest.raises(ValidationError):
            loss(p, np.eye(3))

    def test_gradient_through_normalization(self, rng):
        gt = so3.sample_rotation(rng)
        raw = rng.standard_normal(9)

        def f(h):
            return loss(PoseParametrization.from_array(h), gt)[0]

        _, gu = loss(PoseParametrization.from_array(raw), gt)
        g = normalize_backward(raw, gu)
        eps = 1e-6
        for i in range(9):
            d = np.zeros(9)
            d[i] = eps
            assert g[i] == pytest.approx((f(raw + d) - f(raw - d)) / (2 * eps), rel=1e-5, abs=1e-8)

    def test_zero_loss_recovers_ground_truth(self, rng):
        for _ in range(500):
            gt = so3.sample_rotation(rng)
            m = gt.copy()
            if rng.random() < 0.5:
                m[:, 0] *= -1
            p = param(m)
            assert loss(p, gt)[0] < 1e-12
            np.testing.assert_allclose(project_to_rotation(p), gt, atol=1e-10)


class TestAblations:
    def test_two_vector_completion(self, rng):
        r = so3.sample_rotation(rng)
        out = complete_two_vector(r[:, 1], r[:, 2])
        np.testing.assert_allclose(out, np.column_stack([np.cross(r[:, 1], r[:, 2]), r[:, 1], r[:, 2]]),
                                   atol=1e-12)
        p = PoseParametrization.from_rotation(r, "two_vector")
        np.testing.assert_allclose(project_to_rotation(p), r, atol=1e-12)

    def test_two_vector_parallel(self):
        e = np.array([0.0, 1.0, 0.0])
        with pytest.raises(DegenerateBasis):
            complete_two_vector(e, e)

    def test_no_pseudovector_not_invariant(self):
        m = np.eye(3)
        m[:, 0] = [-1.0, 0.0, 0.0]
        value, _ = loss(param(m, "no_pseudovector"), np.eye(3))
        assert value == pytest.approx(1.0, abs=1e-15)

    def test_reps(self):
        g = np.diag([-1.0, 1.0, 1.0])
        np.testing.assert_allclose(np.diag(rho_h(g)), [1, -1, -1, -1, 1, 1, -1, 1, 1])
        np.testing.assert_allclose(np.diag(rho_h(g, "no_pseudovector")), [-1, 1, 1] * 3)
        assert output_rep("two_vector").dim == 6
        with pytest.raises(ValidationError):
            output_rep("quaternion")


class TestMetrics:
    def test_identical(self, rng):
        pose = RigidPose(so3.sample_rotation(rng), rng.standard_normal(3))
        m = metrics(pose, pose, rng.standard_normal((20, 3)))
        assert m == {"rot_error_rad": 0.0, "aad_mm": 0.0, "trans_error_mm": 0.0}

    def test_pure_translation(self, rng):
        pts = rng.standard_normal((30, 3)) * 50
        m = metrics(RigidPose(np.eye(3), [3.0, 4.0, 0.0]), RigidPose.identity(), pts)
        assert m["aad_mm"] == pytest.approx(5.0, abs=1e-12)
        assert m["trans_error_mm"] == pytest.approx(5.0, abs=1e-12)
        assert m["rot_error_rad"] == 0.0

    def test_aad_loop(self, rng):
        a = RigidPose(so3.sample_rotation(rng), rng.standard_normal(3) * 10)
        b = RigidPose(so3.sample_rotation(rng), rng.standard_normal(3) * 10)
        pts = rng.standard_normal((200, 3)) * 60
        ref = sum(np.linalg.norm((a.R @ x + a.t) - (b.R @ x + b.t)) for x in pts) / len(pts)
        assert metrics(a, b, pts)["aad_mm"] == pytest.approx(ref, rel=1e-12)

    def test_rotation_error_of_offset(self, rng):
        for _ in range(20):
            r = so3.sample_rotation(rng)
            angle = rng.uniform(0, math.pi)
            delta = so3.axis_angle(rng.standard_normal(3), angle)
            assert rotation_error(r, r @ delta) == pytest.approx(angle, abs=1e-9)

    def test_empty_surface(self):
        with pytest.raises(ValidationError):
            metrics(RigidPose.identity(), RigidPose.identity(), np.zeros((0, 3)))


class TestNFold:
    @pytest.mark.parametrize("order", [2, 3, 4, 6])
    def test_invariance(self, order, rng):
        for _ in range(10):
            assert nfold_invariance_residual(so3.sample_rotation(rng), order) < 1e-9

    def test_identity_order_two(self):
        h = nfold_param(np.eye(3), 2)
        np.testing.assert_allclose(h[:5], np.eye(5)[0], atol=1e-12)
        np.testing.assert_allclose(h[5:10], np.eye(5)[4], atol=1e-12)
        np.testing.assert_array_equal(h[10:], [0.0, 0.0, 1.0])

    @pytest.mark.parametrize("order", [2, 3, 4, 6])
    def test_composition(self, order, rng):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        r = so3.sample_rotation(rng)
        g = so3.axis_angle(axis, 2 * math.pi / order)
        np.testing.assert_allclose(nfold_param(r @ g, order, axis), nfold_param(r, order, axis), atol=1e-9)

    def test_order_one_rejected(self):
        with pytest.raises(ValidationError):
            nfold_param(np.eye(3), 1)

    def test_symmetry_group(self):
        assert len(SymmetryGroup("n_fold", (0.0, 0.0, 1.0), 4).elements()) == 4
        refl = SymmetryGroup("reflection").elements()[1]
        np.testing.assert_array_equal(refl, np.diag([-1.0, 1.0, 1.0]))
        with pytest.raises(ValidationError):
            SymmetryGroup("n_fold", (0.0, 0.0, 1.0), 1)


class TestPoseFile:
    def test_round_trip(self, tmp_path, rng):
        pose = RigidPose(so3.sample_rotation(rng), rng.standard_normal(3) * 20)
        write_pose(tmp_path / "p.txt", pose)
        back = read_pose(tmp_path / "p.txt")
        np.testing.assert_array_equal(back.R, pose.R)
        np.testing.assert_array_equal(back.t, pose.t)
        assert (tmp_path / "p.txt").read_text().startswith("# pose v1 units=mm")

    def test_missing_header(self, tmp_path):
        (tmp_path / "p.txt").write_text("1 0 0\n")
        with pytest.raises(FormatError):
            read_pose(tmp_path / "p.txt")

    def test_rigid_algebra(self, rng):
        a = RigidPose(so3.sample_rotation(rng), rng.standard_normal(3))
        b = RigidPose(so3.sample_rotation(rng), rng.standard_normal(3))
        np.testing.assert_allclose((a @ b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)
        np.testing.assert_allclose((a @ a.inverse()).matrix(), np.eye(4), atol=1e-12)
