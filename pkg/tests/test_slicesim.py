import math

import numpy as np
import pytest

from steerpose import slicesim, so3
from steerpose.errors import ValidationError
from steerpose.pose import RigidPose


@pytest.fixture(scope="module")
def anatomy():
    shape = slicesim.simulation_shape(0)
    return shape, slicesim.brain_points(shape, spacing=2.0)


class TestPlan:
    @pytest.mark.parametrize("orientation", slicesim.ORIENTATIONS)
    def test_brain_plan_in_range(self, anatomy, orientation):
        plan = slicesim.plan_for_brain(orientation, anatomy[1])
        assert 23 <= len(plan) <= 40
        n = plan.planes[0].R[:, 2]
        for a, b in zip(plan.planes, plan.planes[1:]):
            np.testing.assert_array_equal(a.R, b.R)
            np.testing.assert_allclose(b.t - a.t, 3.0 * n, atol=1e-12)

    def test_slice_count_bounds(self):
        with pytest.raises(ValidationError):
            slicesim.make_plan("axial", 10)
        with pytest.raises(ValidationError):
            slicesim.make_plan("oblique", 30)


class TestTrajectory:
    def test_zero_motion_is_constant(self):
        traj = slicesim.synth_trajectory(1, 10, slicesim.MotionProfile((0.0, 0.0), (0.0, 0.0)))
        for p in traj.poses:
            np.testing.assert_array_equal(p.R, np.eye(3))
            np.testing.assert_array_equal(p.t, 0.0)

    def test_seeded(self):
        a = slicesim.synth_trajectory(4, 12)
        b = slicesim.synth_trajectory(4, 12)
        for p, q in zip(a.poses, b.poses):
            np.testing.assert_array_equal(p.R, q.R)

    def test_step_magnitudes(self):
        traj = slicesim.synth_trajectory(2, 30)
        for a, b in zip(traj.poses, traj.poses[1:]):
            step = math.degrees(so3.geodesic_distance(b.R, a.R))
            assert 2.0 - 1e-9 <= step <= 5.0 + 1e-9
            assert np.linalg.norm(b.t - a.t) <= 2.0 + 1e-9

    def test_profile_limits(self):
        with pytest.raises(ValidationError):
            slicesim.MotionProfile(rot_deg=(0.0, 20.0))
        with pytest.raises(ValidationError):
            slicesim.MotionProfile(trans_mm=(0.0, 11.0))

    def test_interpolation_midpoint(self):
        traj = slicesim.MotionTrajectory((RigidPose.identity(),
                                          RigidPose(so3.axis_angle([0, 0, 1], math.pi / 2), [2.0, 0, 0])))
        mid = traj.at(1.5)
        np.testing.assert_allclose(mid.R, so3.axis_angle([0, 0, 1], math.pi / 4), atol=1e-12)
        np.testing.assert_allclose(mid.t, [1.0, 0, 0])


class TestPrescription:
    def test_oracle_exact(self):
        plan = slicesim.make_plan("coronal", 30)
        traj = slicesim.synth_trajectory(3, 30)
        rx = slicesim.prescribe(plan, traj, "oracle")
        for k, (p, target) in enumerate(zip(rx.planes, plan.planes)):
            exp = traj.poses[k] @ target
            np.testing.assert_array_equal(p.R, exp.R)
            assert slicesim.obliqueness(rx.estimates[k], traj.poses[k]) == 0.0
            assert slicesim.slice_offset(rx.estimates[k], traj.poses[k], target) == 0.0

    def test_blind_equals_oracle_without_motion(self):
        plan = slicesim.make_plan("axial", 25)
        traj = slicesim.constant_rotation_trajectory([0, 0, 1], 0.0, 25)
        a = slicesim.prescribe(plan, traj, "oracle")
        b = slicesim.prescribe(plan, traj, "motion_blind")
        for p, q in zip(a.planes, b.planes):
            np.testing.assert_array_equal(p.matrix(), q.matrix())

    def test_blind_obliqueness_grows_linearly(self):
        plan = slicesim.make_plan("sagittal", 25)
        traj = slicesim.constant_rotation_trajectory([1, 1, 0], 5.0, 25)
        rx = slicesim.prescribe(plan, traj, "motion_blind")
        for k in range(25):
            deg = math.degrees(slicesim.obliqueness(rx.estimates[k], traj.poses[k]))
            assert deg == pytest.approx(5.0 * k, abs=1e-9)

    def test_estimator_failure_falls_back(self):
        plan = slicesim.make_plan("axial", 25)
        traj = slicesim.synth_trajectory(0, 25)

        def flaky(volume):
            if volume % 3 == 0:
                raise RuntimeError("no estimate")
            return traj.poses[volume]

        rx = slicesim.prescribe(plan, traj, flaky, navigator=lambda k, prev: k)
        assert rx.fallback == [k % 3 == 0 for k in range(25)]
        for k in range(0, 25, 3):
            np.testing.assert_array_equal(rx.estimates[k].R, np.eye(3))

    def test_short_trajectory(self):
        with pytest.raises(ValidationError):
            slicesim.prescribe(slicesim.make_plan("axial", 25), slicesim.synth_trajectory(0, 10))


class TestCoverage:
    def test_oracle_stack_covers_brain(self, anatomy):
        shape, pts = anatomy
        rec = slicesim.simulate(shape, "axial", 0, "oracle", points=pts)
        assert rec["gap"] == 0.0
        assert rec["mean_obliqueness_deg"] == 0.0 and rec["mean_offset_mm"] == 0.0
        assert rec["irregularity"] < 0.1

    @pytest.mark.parametrize("removed", [1, 5])
    def test_removed_slices_gap_matches_voxel_loop(self, anatomy, removed):
        _, pts = anatomy
        plan = slicesim.plan_for_brain("coronal", pts)
        mid = len(plan) // 2
        keep = [p for k, p in enumerate(plan.planes) if not mid - removed // 2 <= k <= mid + removed // 2]
        gap = slicesim.coverage_gap(slicesim.psf_response(pts, keep))
        uncovered = 0
        for x in pts:
            total = 0.0
            for p in keep:
                d = float((x - p.t) @ p.R[:, 2])
                total += math.exp(-d * d / (2 * slicesim.PSF_SIGMA_MM ** 2))
            uncovered += total < slicesim.GAP_EPS
        assert gap == uncovered / len(pts)
        if removed == 5:
            assert gap > 0

    def test_kl_uniform_is_zero(self):
        assert slicesim.irregularity(np.full(1000, 0.37)) == pytest.approx(0.0, abs=1e-12)

    def test_kl_nonnegative(self, rng):
        for _ in range(20):
            assert slicesim.irregularity(rng.random(500) * 3) >= 0.0

    def test_psf_linearity(self, anatomy):
        _, pts = anatomy
        plan = slicesim.plan_for_brain("axial", pts)
        a, b = list(plan.planes[::2]), list(plan.planes[1::2])
        np.testing.assert_allclose(slicesim.psf_response(pts, a + b),
                                   slicesim.psf_response(pts, a) + slicesim.psf_response(pts, b), atol=1e-12)

    def test_psf_fwhm_equals_thickness(self):
        plane = RigidPose.identity()
        half = slicesim.psf_response(np.array([[0.0, 0.0, 1.5]]), [plane])[0]
        assert half == pytest.approx(0.5, abs=1e-3)

    def test_records_are_deterministic(self, anatomy, tmp_path):
        shape, pts = anatomy
        recs = [slicesim.simulate(shape, o, 7, e, points=pts) for o in ("axial",) for e in ("oracle", "motion_blind")]
        slicesim.write_records(tmp_path / "a.jsonl", recs)
        recs2 = [slicesim.simulate(shape, o, 7, e, points=pts) for o in ("axial",) for e in ("oracle", "motion_blind")]
        slicesim.write_records(tmp_path / "b.jsonl", recs2)
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert recs[0]["gap"] <= recs[1]["gap"]
