"""From network output to a rigid pose: parametrizations, projection, loss, metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.linalg import block_diag

from . import so3
from .errors import (AmbiguousProjection, DegenerateBasis, EmptyOccupancy,
                     FormatError, ValidationError)

MODES = ("pseudovector", "no_pseudovector", "two_vector")
UNIT_TOL = 1e-6


def output_rep(mode: str = "pseudovector") -> so3.RepSpec:
    """Irreps of the head output; channels are ordered ``e_x, e_y, e_z``."""
    if mode == "pseudovector":
        return so3.RepSpec([(1, so3.Irrep(1, so3.EVEN)), (2, so3.Irrep(1, so3.ODD))])
    if mode == "no_pseudovector":
        return so3.RepSpec([(3, so3.Irrep(1, so3.ODD))])
    if mode == "two_vector":
        return so3.RepSpec([(2, so3.Irrep(1, so3.ODD))])
    raise ValidationError(f"unknown head mode {mode!r}")


@dataclass(frozen=True)
class PoseParametrization:
    """Unit direction estimates; ``e_x`` is a pseudovector in the default mode.

    In ``two_vector`` mode ``e_x`` is ``None``. ``raw`` keeps the tensor before
    normalization.
    """

    e_x: np.ndarray | None
    e_y: np.ndarray
    e_z: np.ndarray
    mode: str = "pseudovector"
    raw: np.ndarray | None = field(default=None, repr=False, compare=False)

    def vectors(self):
        return [v for v in (self.e_x, self.e_y, self.e_z) if v is not None]

    def as_array(self) -> np.ndarray:
        return np.concatenate(self.vectors())

    @classmethod
    def from_array(cls, h, mode: str = "pseudovector", normalize: bool = True):
        h = np.asarray(h, dtype=np.float64)
        vs = h.reshape(-1, 3)
        if normalize:
            vs = vs / np.linalg.norm(vs, axis=1, keepdims=True)
        if mode == "two_vector":
            return cls(None, vs[0], vs[1], mode, raw=h)
        return cls(vs[0], vs[1], vs[2], mode, raw=h)

    @classmethod
    def from_rotation(cls, r, mode: str = "pseudovector"):
        r = np.asarray(r, dtype=np.float64)
        if mode == "two_vector":
            return cls(None, r[:, 1].copy(), r[:, 2].copy(), mode)
        return cls(r[:, 0].copy(), r[:, 1].copy(), r[:, 2].copy(), mode)


def rho_h(g, mode: str = "pseudovector") -> np.ndarray:
    """Representation acting on the stacked output of a head."""
    return so3.rep_matrix(output_rep(mode), g)


def transform_param(p: PoseParametrization, g) -> PoseParametrization:
    return PoseParametrization.from_array(rho_h(g, p.mode) @ p.as_array(), p.mode, normalize=False)


# ---------------------------------------------------------------------------
# rigid poses


@dataclass(frozen=True)
class RigidPose:
    """``x_world = R x_object + t``; translation in mm."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", so3.check_rotation(self.R))
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValidationError("translation must be finite")
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def __matmul__(self, other: "RigidPose") -> "RigidPose":
        return RigidPose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "RigidPose":
        return RigidPose(self.R.T, -self.R.T @ self.t)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t


# ---------------------------------------------------------------------------
# occupancy and translation


@dataclass(frozen=True)
class OccupancyGrid:
    """Binary mask with a voxel-to-world affine (mm)."""

    mask: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        object.__setattr__(self, "affine", np.asarray(self.affine, dtype=np.float64))

    def world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return idx @ self.affine[:3, :3].T + self.affine[:3, 3]


def com_translation(occ: OccupancyGrid) -> np.ndarray:
    """World-space centroid of the occupied voxels."""
    idx = np.argwhere(occ.mask)
    if not len(idx):
        raise EmptyOccupancy("occupancy mask is empty")
    return occ.world(idx.mean(axis=0))


def surface_points(occ: OccupancyGrid) -> np.ndarray:
    """World coordinates of boundary voxels (mask minus its 6-connected erosion)."""
    eroded = ndimage.binary_erosion(occ.mask, structure=ndimage.generate_binary_structure(3, 1),
                                    border_value=0)
    return occ.world(np.argwhere(occ.mask & ~eroded))


# ---------------------------------------------------------------------------
# projection onto SO(3)


def _basis_matrix(p: PoseParametrization) -> np.ndarray:
    if p.mode == "two_vector":
        return complete_two_vector(p.e_y, p.e_z)
    return np.column_stack([p.e_x, p.e_y, p.e_z])


def project_to_rotation(p: PoseParametrization) -> np.ndarray:
    """Nearest rotation to ``[e_x e_y e_z]``; flips ``e_x`` when the fit is improper."""
    m = _basis_matrix(p)
    u, s, vt = np.linalg.svd(m)
    if s[1] <= 1e-8:
        raise AmbiguousProjection(f"predicted basis has rank < 2 (singular values {s})")
    r = u @ vt
    if np.linalg.det(r) < 0:
        m = m.copy()
        m[:, 0] = -m[:, 0]
        u, s, vt = np.linalg.svd(m)
        r = u @ vt
    return r


def complete_two_vector(e_y, e_z) -> np.ndarray:
    """Rotation with columns ``(e_y x e_z, e_y, e_z)`` after Gram-Schmidt."""
    e_y = np.asarray(e_y, dtype=np.float64)
    e_z = np.asarray(e_z, dtype=np.float64)
    ny, nz = np.linalg.norm(e_y), np.linalg.norm(e_z)
    if ny == 0 or nz == 0 or abs(e_y @ e_z) / (ny * nz) > 1.0 - 1e-8:
        raise DegenerateBasis("e_y and e_z are parallel")
    y = e_y / ny
    z = e_z - (e_z @ y) * y
    z /= np.linalg.norm(z)
    return np.column_stack([np.cross(y, z), y, z])


# ---------------------------------------------------------------------------
# loss


def _check_unit(name, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
        raise ValidationError(f"{name} must be a unit 3-vector")
    return v


def loss(p: PoseParametrization, gt, beta: float = 1.0, grad_eps: float = 0.0):
    """Symmetry-aware orientation loss and its gradient w.r.t. the unit outputs.

    ``gt`` holds the ground-truth basis as columns. Terms are
    ``sqrt(1 - c^2)`` for a pseudovector output and ``sqrt((1 - c) / 2)`` for
    vectors, with ``c`` the dot product with the ground truth (evaluated in
    cancellation-free form). ``grad_eps``
    smooths the square roots in the gradient only.

    Returns ``(value, grad)`` with ``grad`` shaped like ``p.as_array()``.
    """
    gt = np.asarray(gt, dtype=np.float64)
    targets = [gt[:, 0], gt[:, 1], gt[:, 2]]
    if p.mode == "two_vector":
        outs, targets = [p.e_y, p.e_z], targets[1:]
        kinds, weights = ["half", "half"], [1.0, 1.0]
    else:
        outs = [p.e_x, p.e_y, p.e_z]
        kinds = ["full" if p.mode == "pseudovector" else "half", "half", "half"]
        weights = [1.0, beta, beta]
    value = 0.0
    grads = []
    for name, e_hat, e, kind, wgt in zip("xyz" if len(outs) == 3 else "yz", outs, targets, kinds, weights):
        e_hat = _check_unit(f"e_{name} estimate", e_hat)
        e = _check_unit(f"e_{name} target", e)
        c = float(np.clip(e_hat @ e, -1.0, 1.0))
        # for unit vectors 1 - c^2 = |e_hat x e|^2 and (1 - c) / 2 = |e_hat - e|^2 / 4;
        # the right-hand sides keep full precision near c = +-1
        if kind == "full":
            sq = float(np.sum(np.cross(e_hat, e) ** 2))
            value += wgt * math.sqrt(sq)
            dc = -c / math.sqrt(sq + grad_eps) if sq + grad_eps > 0 else 0.0
        else:
            inner = float(np.sum((e_hat - e) ** 2)) / 4.0
            value += wgt * math.sqrt(inner)
            inner += grad_eps
            dc = -0.25 / math.sqrt(inner) if inner > 0 else 0.0
        grads.append(wgt * dc * e)
    return value, np.concatenate(grads)


def normalize_backward(raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Chain rule through per-3-vector normalization."""
    vs = raw.reshape(-1, 3)
    gs = grad_unit.reshape(-1, 3)
    n = np.linalg.norm(vs, axis=1, keepdims=True)
    u = vs / n
    return ((gs - u * (gs * u).sum(axis=1, keepdims=True)) / n).ravel()


# ---------------------------------------------------------------------------
# metrics


def rotation_error(r_pred, r_gt) -> float:
    return so3.geodesic_distance(r_pred, r_gt)


def metrics(pred: RigidPose, gt: RigidPose, surface) -> dict:
    """Geodesic rotation error (rad), mean surface displacement and translation error (mm).

    ``surface`` holds object-frame points in mm; both poses map them to world space.
    """
    surface = np.asarray(surface, dtype=np.float64).reshape(-1, 3)
    if not len(surface):
        raise ValidationError("surface point set is empty")
    disp = np.linalg.norm(pred.apply(surface) - gt.apply(surface), axis=1)
    return {
        "rot_error_rad": rotation_error(pred.R, gt.R),
        "aad_mm": float(disp.mean()),
        "trans_error_mm": float(np.linalg.norm(pred.t - gt.t)),
    }


# ---------------------------------------------------------------------------
# symmetry groups


@dataclass(frozen=True)
class SymmetryGroup:
    """Object symmetries: ``trivial``, ``reflection`` across the plane normal to ``axis``,
    or ``n_fold`` rotations about ``axis``."""

    kind: str = "trivial"
    axis: tuple = (1.0, 0.0, 0.0)
    order: int = 1

    def __post_init__(self):
        if self.kind not in ("trivial", "reflection", "n_fold"):
            raise ValidationError(f"unknown symmetry kind {self.kind!r}")
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValidationError("symmetry axis must be a unit vector")
        if self.kind == "n_fold" and self.order < 2:
            raise ValidationError("n_fold symmetry needs order >= 2")

    def elements(self) -> list:
        """Group elements as 3x3 orthogonal matrices, identity first."""
        if self.kind == "trivial":
            return [np.eye(3)]
        if self.kind == "reflection":
            return [np.eye(3), so3.reflection(self.axis)]
        return [so3.axis_angle(self.axis, 2.0 * math.pi * k / self.order) for k in range(self.order)]


# ---------------------------------------------------------------------------
# N-fold rotational symmetry


def _axis_frame(axis) -> np.ndarray:
    """A rotation taking ``e_z`` onto ``axis``."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if abs(n - 1.0) > 1e-9:
        raise ValidationError("symmetry axis must be a unit vector")
    z = np.array([0.0, 0.0, 1.0])
    c = float(z @ a)
    if c > 1.0 - 1e-15:
        return np.eye(3)
    if c < -1.0 + 1e-15:
        return np.diag([1.0, -1.0, -1.0])
    v = np.cross(z, a)
    return so3.axis_angle(v, math.atan2(np.linalg.norm(v), c))


def nfold_rep(g, order: int) -> np.ndarray:
    """Representation on the stacked ``(D^N column, D^N column, vector)``."""
    p = so3.EVEN if order % 2 == 0 else so3.ODD
    d = so3.irrep_matrix((order, p), g)
    return block_diag(d, d, so3.irrep_matrix((1, so3.ODD), g))


def nfold_param(r, order: int, axis=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Parametrization invariant to ``order``-fold rotations about the object ``axis``.

    Returns ``D^N(R A)[:, -N] + D^N(R A)[:, N] + R axis`` stacked, where ``A``
    turns ``e_z`` onto ``axis``.
    """
    if order < 2:
        raise ValidationError("rotational symmetry order must be at least 2")
    r = so3.check_rotation(r)
    a = _axis_frame(axis)
    d = so3.wigner_d(order, r @ a)
    return np.concatenate([d[:, 0], d[:, -1], r @ np.asarray(axis, dtype=np.float64)])


def nfold_invariance_residual(r, order: int, axis=(0.0, 0.0, 1.0)) -> float:
    """``max_k |h(R) - rho_h(g_k) h(R)|`` over the symmetry rotations ``g_k`` in world frame."""
    h = nfold_param(r, order, axis)
    worst = 0.0
    for k in range(1, order + 1):
        g_obj = so3.axis_angle(axis, 2.0 * math.pi * k / order)
        g = r @ g_obj @ r.T
        worst = max(worst, float(np.abs(h - nfold_rep(g, order) @ h).max()))
    return worst


# ---------------------------------------------------------------------------
# pose text files

POSE_HEADER = "# pose v1 units=mm convention=x_world=R*x_object+t rows=R(3x3),t"


def write_pose(path, pose: RigidPose):
    lines = [POSE_HEADER]
    lines += [" ".join(repr(float(v)) for v in row) for row in pose.R]
    lines.append(" ".join(repr(float(v)) for v in pose.t))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pose(path) -> RigidPose:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("# pose v1"):
        raise FormatError(f"{path}: missing pose header", offset=0)
    rows = [[float(x) for x in ln.split()] for ln in lines[1:]]
    if len(rows) != 4 or any(len(r) != 3 for r in rows):
        raise FormatError(f"{path}: expected 3 rotation rows and 1 translation row")
    return RigidPose(np.array(rows[:3]), np.array(rows[3]))
