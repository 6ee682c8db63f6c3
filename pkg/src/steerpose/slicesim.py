"""Slice-stack prescription under head motion and the resulting brain coverage.

Coordinates: target planes live in the head frame (mm, origin at the brain
centre). A plane is a :class:`RigidPose` mapping plane-local ``(u, v, n)``
coordinates to its parent frame; its third column is the slice normal.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from . import so3, synth
from .errors import ValidationError
from .pose import RigidPose

THICKNESS_MM = 3.0
PSF_SIGMA_MM = THICKNESS_MM / 2.355
GAP_EPS = 1e-6
TR_SECONDS = 3.0
ORIENTATIONS = ("sagittal", "coronal", "axial")

_ORIENT_FRAMES = {
    # columns u, v, n with u x v = n
    "sagittal": np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
    "coronal": np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
    "axial": np.eye(3),
}


@dataclass(frozen=True)
class SlicePlan:
    planes: tuple
    orientation: str
    thickness: float = THICKNESS_MM
    pixel_mm: float = 1.0

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise ValidationError(f"unknown orientation {self.orientation!r}")
        if not 23 <= len(self.planes) <= 40:
            raise ValidationError(f"slice count {len(self.planes)} outside [23, 40]")

    def __len__(self):
        return len(self.planes)


def make_plan(orientation: str, n_slices: int, center=(0.0, 0.0, 0.0), thickness: float = THICKNESS_MM) -> SlicePlan:
    """``n_slices`` parallel planes, ``thickness`` apart, centred on ``center``."""
    try:
        frame = _ORIENT_FRAMES[orientation]
    except KeyError:
        raise ValidationError(f"unknown orientation {orientation!r}") from None
    n = frame[:, 2]
    c0 = np.asarray(center, dtype=np.float64)
    planes = tuple(RigidPose(frame, c0 + (k - (n_slices - 1) / 2.0) * thickness * n) for k in range(n_slices))
    return SlicePlan(planes, orientation, thickness)


def slices_for_extent(extent_mm: float, thickness: float = THICKNESS_MM) -> int:
    """Slice count whose centres span ``extent_mm`` with half a slice to spare."""
    return int(math.ceil(extent_mm / thickness)) + 1


def plan_for_brain(orientation: str, brain_points) -> SlicePlan:
    frame = _ORIENT_FRAMES[orientation]
    proj = np.asarray(brain_points) @ frame[:, 2]
    k = slices_for_extent(proj.max() - proj.min())
    center = frame[:, 2] * (proj.max() + proj.min()) / 2.0
    return make_plan(orientation, k, center)


# ---------------------------------------------------------------------------
# motion


@dataclass(frozen=True)
class MotionProfile:
    rot_deg: tuple = (2.0, 5.0)
    trans_mm: tuple = (0.0, 2.0)

    def __post_init__(self):
        lo, hi = self.rot_deg
        if not 0.0 <= lo <= hi <= 15.0:
            raise ValidationError("per-step rotation must lie in [0, 15] degrees")
        lo, hi = self.trans_mm
        if not 0.0 <= lo <= hi <= 10.0:
            raise ValidationError("per-step translation must lie in [0, 10] mm")


@dataclass(frozen=True)
class MotionTrajectory:
    poses: tuple
    seed: int = 0
    dt: float = TR_SECONDS

    def __len__(self):
        return len(self.poses)

    def at(self, time_s: float) -> RigidPose:
        """Pose at ``time_s``, slerp between samples and linear in translation."""
        s = float(np.clip(time_s / self.dt, 0.0, len(self.poses) - 1))
        k = min(int(math.floor(s)), len(self.poses) - 2)
        if len(self.poses) == 1:
            return self.poses[0]
        a, b = self.poses[k], self.poses[k + 1]
        u = s - k
        r = Slerp([0.0, 1.0], Rotation.from_matrix([a.R, b.R]))([u]).as_matrix()[0]
        return RigidPose(r, (1.0 - u) * a.t + u * b.t)


def synth_trajectory(seed: int, n_steps: int, profile: MotionProfile = MotionProfile(),
                     start: RigidPose | None = None) -> MotionTrajectory:
    """Random walk ``T_{k+1} = dT_k T_k`` with rotations about the head centre.

    Each step draws an axis uniformly on the sphere and an angle and
    translation length uniformly from the profile ranges.
    """
    rng = np.random.default_rng(seed)
    pose = start or RigidPose.identity()
    poses = [pose]
    for _ in range(n_steps - 1):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        ang = math.radians(rng.uniform(*profile.rot_deg))
        d = rng.normal(size=3)
        d *= rng.uniform(*profile.trans_mm) / np.linalg.norm(d)
        dr = so3.axis_angle(axis, ang) if ang > 0 else np.eye(3)
        pose = RigidPose(dr @ pose.R, pose.t + d)
        poses.append(pose)
    return MotionTrajectory(tuple(poses), seed)


def constant_rotation_trajectory(axis, deg_per_step: float, n_steps: int) -> MotionTrajectory:
    return MotionTrajectory(tuple(RigidPose(so3.axis_angle(axis, math.radians(deg_per_step * k)), np.zeros(3))
                                  for k in range(n_steps)))


# ---------------------------------------------------------------------------
# prescription


@dataclass
class Prescription:
    planes: list                 # prescribed planes in scanner coordinates
    estimates: list              # pose estimate used for each slice
    fallback: list               # True where the estimator failed
    estimator: str


def _motion_blind(k, traj, **_):
    return traj.poses[0]


def _oracle(k, traj, **_):
    return traj.poses[k]


def prescribe(plan: SlicePlan, traj: MotionTrajectory, estimator="oracle", navigator=None) -> Prescription:
    """Prescribe ``P~_k = T^_k P_k`` for every slice.

    ``estimator`` is ``"oracle"``, ``"motion_blind"`` or a callable
    ``f(volume) -> RigidPose``; callables receive ``navigator(k, previous
    plane)`` output. Failures fall back to the identity pose and are flagged.
    """
    if len(traj) < len(plan):
        raise ValidationError("trajectory shorter than the slice plan")
    if estimator == "oracle":
        fn, name = _oracle, "oracle"
    elif estimator == "motion_blind":
        fn, name = _motion_blind, "motion_blind"
    elif callable(estimator):
        if navigator is None:
            raise ValidationError("a pose_fn estimator needs a navigator renderer")
        name = getattr(estimator, "name", "pose_fn")

        def fn(k, traj, prev):
            return estimator(navigator(k, prev))
    else:
        raise ValidationError(f"unknown estimator {estimator!r}")
    out = Prescription([], [], [], name)
    prev = None
    for k, target in enumerate(plan.planes):
        failed = False
        try:
            est = fn(k, traj, prev=prev)
            if not isinstance(est, RigidPose):
                est = RigidPose(*est)
        except Exception:
            est, failed = RigidPose.identity(), True
        plane = est @ target
        out.planes.append(plane)
        out.estimates.append(est)
        out.fallback.append(failed)
        prev = plane
    return out


def acquired_planes(rx: Prescription, traj: MotionTrajectory) -> list:
    """Prescribed planes expressed in the head frame at acquisition time."""
    planes = []
    for k, (plane, est) in enumerate(zip(rx.planes, rx.estimates)):
        t = traj.poses[k]
        if np.array_equal(est.R, t.R) and np.array_equal(est.t, t.t):
            planes.append(None)            # exact: the target plane itself
        else:
            planes.append(t.inverse() @ plane)
    return planes


def obliqueness(est: RigidPose, true: RigidPose) -> float:
    """Angle (rad) between prescribed and target slice orientations, ``|R^_k R_k^-1|``."""
    return so3.geodesic_distance(est.R, true.R)


def slice_offset(est: RigidPose, true: RigidPose, target: RigidPose) -> float:
    """Distance (mm) between prescribed and target slice centres."""
    return float(np.linalg.norm(est.R @ target.t + est.t - (true.R @ target.t + true.t)))


# ---------------------------------------------------------------------------
# coverage


@dataclass(frozen=True)
class CoverageGrid:
    points: np.ndarray           # brain voxel centres, head frame, (N, 3) mm
    p_c: np.ndarray              # summed point-spread response per voxel

    @property
    def p_u(self) -> np.ndarray:
        return np.full(len(self.points), 1.0 / len(self.points))


def brain_points(shape: synth.HeadShape, spacing: float = 1.0) -> np.ndarray:
    """Head-frame centres of brain voxels on a ``spacing`` mm grid."""
    a = np.asarray(shape.semi_axes)
    axes = [np.arange(-math.ceil(r / spacing), math.ceil(r / spacing) + 1) * spacing for r in a]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return g[synth.head_mask(shape, g)]


def psf_response(points, planes, sigma: float = PSF_SIGMA_MM) -> np.ndarray:
    """Sum over planes of ``exp(-d^2 / 2 sigma^2)`` with ``d`` the distance along each normal."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.zeros(len(pts))
    for p in planes:
        d = (pts - p.t) @ p.R[:, 2]
        out += np.exp(-0.5 * (d / sigma) ** 2)
    return out


def coverage_gap(p_c, eps: float = GAP_EPS) -> float:
    p_c = np.asarray(p_c)
    if not len(p_c):
        raise ValidationError("empty brain occupancy")
    return float(np.mean(p_c < eps))


def irregularity(p_c, eps: float = GAP_EPS) -> float:
    """``KL(p_C || p_U)`` over brain voxels with ``p_C`` floored at ``eps``."""
    p = np.maximum(np.asarray(p_c, dtype=np.float64), eps)
    p = p / p.sum()
    n = len(p)
    return float(max(np.sum(p * np.log(p * n)), 0.0))


def coverage(plan: SlicePlan, rx: Prescription, traj: MotionTrajectory, points) -> dict:
    acq = acquired_planes(rx, traj)
    planes = [target if a is None else a for a, target in zip(acq, plan.planes)]
    p_c = psf_response(points, planes)
    obl = [obliqueness(e, traj.poses[k]) for k, e in enumerate(rx.estimates)]
    off = [slice_offset(e, traj.poses[k], plan.planes[k]) for k, e in enumerate(rx.estimates)]
    return {
        "gap": coverage_gap(p_c),
        "irregularity": irregularity(p_c),
        "obliqueness_rad": obl,
        "offset_mm": off,
        "p_c": p_c,
    }


def simulate(shape: synth.HeadShape, orientation: str, seed: int, estimator="oracle",
             profile: MotionProfile = MotionProfile(), points=None, navigator=None) -> dict:
    """One record for a seeded trajectory, orientation and estimator."""
    points = brain_points(shape) if points is None else points
    plan = plan_for_brain(orientation, points)
    traj = synth_trajectory(seed, len(plan), profile)
    if navigator is not None and callable(estimator):
        nav = lambda k, prev: navigator(traj.poses[k], prev)
    else:
        nav = None
    rx = prescribe(plan, traj, estimator, nav)
    cov = coverage(plan, rx, traj, points)
    return {
        "orientation": orientation,
        "seed": int(seed),
        "estimator": rx.estimator,
        "n_slices": len(plan),
        "gap": cov["gap"],
        "irregularity": cov["irregularity"],
        "mean_obliqueness_deg": float(np.degrees(np.mean(cov["obliqueness_rad"]))),
        "max_obliqueness_deg": float(np.degrees(np.max(cov["obliqueness_rad"]))),
        "mean_offset_mm": float(np.mean(cov["offset_mm"])),
        "max_offset_mm": float(np.max(cov["offset_mm"])),
        "n_fallback": int(sum(rx.fallback)),
    }


def simulation_shape(seed: int = 0, scale: float = 0.7) -> synth.HeadShape:
    """Phantom anatomy shrunk so stacks need 23-40 slices of 3 mm."""
    return scale_shape(synth.random_head_shape(np.random.default_rng(seed), 0.0), scale)


def scale_shape(shape: synth.HeadShape, s: float) -> synth.HeadShape:
    sc = lambda v: tuple(float(x) * s for x in v)
    blobs = tuple(replace(b, center=sc(b.center), radii=sc(b.radii)) for b in shape.blobs)
    return replace(shape, semi_axes=sc(shape.semi_axes), edge=shape.edge * s, blobs=blobs,
                   eye_center=sc(shape.eye_center), eye_radius=shape.eye_radius * s,
                   asym=replace(shape.asym, center=sc(shape.asym.center), radii=sc(shape.asym.radii)))


def write_records(path_or_fh, records):
    """Line-delimited JSON with sorted keys."""
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if hasattr(path_or_fh, "write"):
        path_or_fh.write(lines)
    else:
        with open(path_or_fh, "w") as fh:
            fh.write(lines)
