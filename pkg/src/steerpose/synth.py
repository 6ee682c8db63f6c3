"""Synthetic head phantoms, artifact models and the augmentation stack.

The phantom is an analytic intensity function in head coordinates (mm):
``x`` runs left to right, ``y`` posterior to anterior, ``z`` inferior to
superior. It is rendered at any rigid pose by evaluating the function at
``R^T (x - t)`` on a grid centred on the world origin, so rotated copies
carry no resampling error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import so3
from .errors import ValidationError
from .pose import OccupancyGrid, RigidPose, com_translation

EYE_TILT_DEG = 25.0


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 32
    voxel_size: float = 6.0
    asymmetry_strength: float = 0.05
    random_pose: bool = False
    max_shift_mm: float = 0.0

    def __post_init__(self):
        if not 4 <= self.size <= 64:
            raise ValidationError("phantom grid size must be in [4, 64]")
        if not 2.0 <= self.voxel_size <= 6.0:
            raise ValidationError("phantom voxel size must be in [2, 6] mm")
        if not 0.0 <= self.asymmetry_strength <= 1.0:
            raise ValidationError("asymmetry_strength must be in [0, 1]")


@dataclass(frozen=True)
class Blob:
    center: tuple
    radii: tuple
    amplitude: float
    mirrored: bool = False        # also place a copy at the mirrored x position


@dataclass(frozen=True)
class HeadShape:
    """Seeded anatomy in head coordinates (mm)."""

    semi_axes: tuple
    edge: float
    base: float
    blobs: tuple
    eye_center: tuple             # right eye; the left one is its mirror
    eye_radius: float
    eye_amplitude: float
    asym: Blob

    def eyes(self):
        c = np.array(self.eye_center)
        return c * np.array([-1.0, 1.0, 1.0]), c


def _blob(q, c, r):
    d = (q - np.asarray(c)) / np.asarray(r)
    return np.exp(-0.5 * np.sum(d * d, axis=-1))


def _pair(q, c, r):
    # evaluated as g(x - c) + g(x + c) so the sum is bitwise mirror symmetric
    c = np.asarray(c, dtype=np.float64)
    m = c * np.array([-1.0, 1.0, 1.0])
    return _blob(q, c, r) + _blob(q, m, r)


def head_intensity(shape: HeadShape, q) -> np.ndarray:
    """Intensity at head-frame points ``q`` (..., 3) in mm."""
    q = np.asarray(q, dtype=np.float64)
    rho = np.sqrt(np.sum((q / np.asarray(shape.semi_axes)) ** 2, axis=-1))
    scale = float(np.mean(shape.semi_axes))
    brain = 0.5 * (1.0 - np.tanh((rho - 1.0) * scale / shape.edge))
    texture = np.zeros(q.shape[:-1])
    for b in shape.blobs:
        texture = texture + b.amplitude * (_pair(q, b.center, b.radii) if b.mirrored
                                           else _blob(q, b.center, b.radii))
    out = brain * (shape.base + texture)
    r_eye = (shape.eye_radius,) * 3
    out = out + shape.eye_amplitude * _pair(q, shape.eye_center, r_eye)
    if shape.asym.amplitude != 0.0:
        out = out + brain * shape.asym.amplitude * _blob(q, shape.asym.center, shape.asym.radii)
    return np.maximum(out, 0.0)


def head_mask(shape: HeadShape, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.sum((q / np.asarray(shape.semi_axes)) ** 2, axis=-1) <= 1.0


def random_head_shape(rng: np.random.Generator, asymmetry_strength: float = 0.05) -> HeadShape:
    jitter = lambda v, f: tuple(float(x) * (1.0 + rng.uniform(-f, f)) for x in v)
    a = jitter((60.0, 74.0, 56.0), 0.08)
    blobs = [
        Blob((9.0, 6.0, 10.0), jitter((6.0, 18.0, 8.0), 0.1), -0.35, True),       # ventricles
        Blob((0.0, -0.68 * a[1], -0.5 * a[2]), jitter((30.0, 16.0, 13.0), 0.1), 0.3),  # cerebellum
        Blob((0.0, 0.55 * a[1], 0.35 * a[2]), jitter((22.0, 14.0, 12.0), 0.1), 0.15),  # frontal
    ]
    for _ in range(6):
        c = rng.uniform(-0.6, 0.6, 3) * np.array(a)
        c[0] = abs(c[0])
        blobs.append(Blob(tuple(c), tuple(rng.uniform(8.0, 15.0, 3)), float(rng.uniform(-0.08, 0.08)), True))
    tilt = math.radians(EYE_TILT_DEG)
    mid = (a[1] * 0.95) * np.array([0.0, math.cos(tilt), -math.sin(tilt)])
    eye = mid + np.array([rng.uniform(28.0, 34.0), 0.0, 0.0])
    asym = Blob((0.45 * a[0], 0.2 * a[1], 0.3 * a[2]), (14.0, 14.0, 14.0), 0.6 * asymmetry_strength)
    return HeadShape(a, edge=3.0, base=float(rng.uniform(0.55, 0.65)), blobs=tuple(blobs),
                     eye_center=tuple(float(v) for v in eye), eye_radius=float(rng.uniform(10.0, 12.0)),
                     eye_amplitude=0.9, asym=asym)


def grid_affine(size: int, voxel_size: float) -> np.ndarray:
    """Voxel-to-world matrix of a cubic grid centred on the world origin."""
    a = np.eye(4) * voxel_size
    a[3, 3] = 1.0
    a[:3, 3] = -(size - 1) / 2.0 * voxel_size
    return a


def world_grid(size: int, voxel_size: float) -> np.ndarray:
    ax = (np.arange(size) - (size - 1) / 2.0) * voxel_size
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


def render(shape: HeadShape, pose: RigidPose, size: int, voxel_size: float):
    """Returns ``(volume, brain mask)`` of the head placed at ``pose``."""
    x = world_grid(size, voxel_size)
    q = (x - pose.t) @ pose.R
    return head_intensity(shape, q), head_mask(shape, q)


def frame_from_landmarks(eye_left, eye_right, com) -> np.ndarray:
    """Head frame with columns ``(e_x, e_y, e_z)``.

    ``e_x`` points from the left to the right eye; ``e_y`` is the direction
    from the brain centroid to the eye midpoint, made orthogonal to ``e_x``
    and tilted 25 degrees about it; ``e_z`` completes a right-handed frame.
    """
    l, r, c = (np.asarray(v, dtype=np.float64) for v in (eye_left, eye_right, com))
    ex = r - l
    if np.linalg.norm(ex) == 0:
        raise ValidationError("eye landmarks coincide")
    ex /= np.linalg.norm(ex)
    d = (l + r) / 2.0 - c
    d -= (d @ ex) * ex
    d /= np.linalg.norm(d)
    ey = so3.axis_angle(ex, math.radians(EYE_TILT_DEG)) @ d
    ez = np.cross(ex, ey)
    return np.stack([ex, ey, ez], axis=1)


@dataclass
class Phantom:
    volume: np.ndarray
    voxel_size: float
    occupancy: OccupancyGrid
    eye_left: np.ndarray
    eye_right: np.ndarray
    gt_pose: RigidPose
    asymmetry_strength: float
    shape: HeadShape = field(repr=False)

    @property
    def affine(self):
        return self.occupancy.affine

    def frame(self) -> np.ndarray:
        return frame_from_landmarks(self.eye_left, self.eye_right, self.gt_pose.t)

    def render(self, pose: RigidPose, size: int | None = None, voxel_size: float | None = None):
        return render(self.shape, pose, size or self.volume.shape[0], voxel_size or self.voxel_size)


def generate_phantom(seed: int, config: PhantomConfig | None = None) -> Phantom:
    config = config or PhantomConfig()
    rng = np.random.default_rng(seed)
    shape = random_head_shape(rng, config.asymmetry_strength)
    if config.random_pose:
        r = so3.sample_rotation(rng)
        t = rng.uniform(-config.max_shift_mm, config.max_shift_mm, 3)
        pose = RigidPose(r, t)
    else:
        pose = RigidPose.identity()
    vol, mask = render(shape, pose, config.size, config.voxel_size)
    occ = OccupancyGrid(mask, grid_affine(config.size, config.voxel_size))
    left, right = shape.eyes()
    return Phantom(vol, config.voxel_size, occ, pose.apply(left), pose.apply(right), pose,
                   config.asymmetry_strength, shape)


def mirror_x(volume: np.ndarray) -> np.ndarray:
    """Reflect a volume across the grid-centred plane ``x = 0``."""
    return np.ascontiguousarray(volume[::-1])


# ---------------------------------------------------------------------------
# artifacts


@dataclass(frozen=True)
class ArtifactParams:
    c_slice: tuple
    n_slice: tuple
    sigma: float
    depth: float = 1.0

    def __post_init__(self):
        n = np.asarray(self.n_slice, dtype=np.float64)
        if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValidationError("n_slice must be a unit 3-vector")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if not 0.0 < self.depth <= 1.0:
            raise ValidationError("depth must be in (0, 1]")

    def mirrored(self) -> "ArtifactParams":
        m = np.array([-1.0, 1.0, 1.0])
        return replace(self, c_slice=tuple(np.asarray(self.c_slice) * m), n_slice=tuple(np.asarray(self.n_slice) * m))


def spin_history(volume, p: ArtifactParams, voxel_size: float = 1.0, affine=None) -> np.ndarray:
    """Darken a plane: ``f * (1 - depth * exp(-d^2 / 2 sigma^2))`` with ``d`` the signed plane distance."""
    volume = np.asarray(volume, dtype=np.float64)
    x = _world_points(volume.shape, voxel_size, affine)
    d = (x - np.asarray(p.c_slice)) @ np.asarray(p.n_slice)
    return volume * (1.0 - p.depth * np.exp(-0.5 * (d / p.sigma) ** 2))


def _world_points(shape, voxel_size, affine):
    if affine is None:
        affine = _box_affine(shape, voxel_size)
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1).astype(np.float64)
    return idx @ affine[:3, :3].T + affine[:3, 3]


def apply_gamma(volume, log_gamma: float) -> np.ndarray:
    """``x -> x**gamma`` with ``gamma = exp(log_gamma)`` on intensities in [0, 1].

    Volumes whose maximum exceeds 1 are first divided by that maximum;
    volumes already inside [0, 1] are used as is.
    """
    v = np.asarray(volume, dtype=np.float64)
    scale = max(float(v.max()), 1.0)
    return np.clip(v / scale, 0.0, 1.0) ** math.exp(log_gamma)


BIAS_TERMS = tuple((a, b, c) for a in range(4) for b in range(4) for c in range(4) if 1 <= a + b + c <= 3)


def bias_field(shape, coeffs) -> np.ndarray:
    """``exp(mean_k c_k P_a(x) P_b(y) P_c(z))`` over Legendre products of total order 1..3.

    Coordinates are scaled to [-1, 1] across the grid; ``coeffs`` follow
    :data:`BIAS_TERMS`.
    """
    from numpy.polynomial import legendre

    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (len(BIAS_TERMS),):
        raise ValidationError(f"expected {len(BIAS_TERMS)} bias coefficients")
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    leg = [[legendre.legval(ax, np.eye(4)[k]) for k in range(4)] for ax in axes]
    log_b = np.zeros(shape)
    for c, (a, b, d) in zip(coeffs, BIAS_TERMS):
        log_b += c * np.einsum("i,j,k->ijk", leg[0][a], leg[1][b], leg[2][d])
    return np.exp(log_b / len(BIAS_TERMS))


def mirror_bias_coeffs(coeffs) -> np.ndarray:
    """Coefficients of the bias field reflected across ``x = 0``."""
    sign = np.array([(-1.0) ** a for a, _, _ in BIAS_TERMS])
    return np.asarray(coeffs) * sign


def simulate_low_resolution(volume, voxel_size: float, thickness: float, axis: int) -> np.ndarray:
    """Blur and decimate along ``axis`` to a ``thickness`` mm spacing, then interpolate back."""
    v = np.asarray(volume, dtype=np.float64)
    factor = thickness / voxel_size
    if factor <= 1.0:
        return v.copy()
    sigma = [0.0, 0.0, 0.0]
    sigma[axis] = factor / 2.355
    blurred = ndimage.gaussian_filter(v, sigma, mode="constant")
    n = v.shape[axis]
    coarse = np.arange(0.0, n - 1 + 1e-9, factor)
    if coarse[-1] < n - 1:
        coarse = np.append(coarse, n - 1.0)
    low = np.take(ndimage.map_coordinates(
        blurred, _axis_coords(v.shape, axis, coarse), order=1, mode="nearest").reshape(
        _shape_with(v.shape, axis, len(coarse))), range(len(coarse)), axis=axis)
    interp = np.interp(np.arange(n), coarse, np.arange(len(coarse)))
    return ndimage.map_coordinates(low, _axis_coords(v.shape, axis, interp), order=1,
                                   mode="nearest").reshape(v.shape)


def _shape_with(shape, axis, n):
    s = list(shape)
    s[axis] = n
    return tuple(s)


def _axis_coords(shape, axis, values):
    grids = [np.arange(n, dtype=np.float64) for n in shape]
    grids[axis] = np.asarray(values, dtype=np.float64)
    mesh = np.meshgrid(*grids, indexing="ij")
    return np.stack([m.ravel() for m in mesh])


# ---------------------------------------------------------------------------
# c_slice samplers


def sample_uniform_voxel(mask, rng, n=None):
    """Indices of occupied voxels drawn uniformly; shape ``(3,)`` or ``(n, 3)``."""
    idx = np.argwhere(mask)
    if not len(idx):
        raise ValidationError("cannot sample from an empty mask")
    pick = rng.integers(0, len(idx), size=n)
    return idx[pick]


def boundary_weights(mask, floor: float = 0.5) -> np.ndarray:
    """Per-voxel weights ``1 / max(d, floor)`` inside ``mask``, ``d`` the distance to the boundary in voxels."""
    mask = np.asarray(mask, dtype=bool)
    d = ndimage.distance_transform_edt(mask) - 0.5
    w = np.where(mask, 1.0 / np.maximum(d, floor), 0.0)
    return w


def sample_boundary_voxel(mask, rng, n=None, floor: float = 0.5):
    w = boundary_weights(mask, floor)
    flat = w.ravel()
    if flat.sum() == 0:
        raise ValidationError("cannot sample from an empty mask")
    pick = rng.choice(flat.size, size=n, p=flat / flat.sum())
    return np.stack(np.unravel_index(pick, w.shape), axis=-1)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentProfile:
    name: str
    rotate: bool = True
    max_shift_mm: float = 0.0
    scale_range: tuple = (1.0, 1.0)
    lowres_prob: float = 0.0
    lowres_range: tuple = (3.0, 7.5)
    bias: bool = False
    bias_max: float = 0.5
    log_gamma_range: tuple | None = None
    noise_range: tuple | None = None
    spin_sigma_range: tuple | None = None
    c_slice: str = "uniform"


PROFILES = {
    "regressor": AugmentProfile("regressor", rotate=True, lowres_prob=0.9, lowres_range=(3.0, 7.5), bias=True,
                                log_gamma_range=(-2.0, 0.1), spin_sigma_range=(2.3, 4.6), c_slice="uniform"),
    "segmenter": AugmentProfile("segmenter", rotate=True, max_shift_mm=30.0, scale_range=(0.5, 1.3),
                                lowres_prob=0.75, lowres_range=(3.0, 8.0), bias=True,
                                log_gamma_range=(-0.8, 0.0), noise_range=(0.0, 0.03),
                                spin_sigma_range=(1.5, 2.3), c_slice="boundary"),
    "rotation": AugmentProfile("rotation", rotate=True),
    "none": AugmentProfile("none", rotate=False),
}


def get_profile(profile) -> AugmentProfile:
    if isinstance(profile, AugmentProfile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise ValidationError(f"unknown augmentation profile {profile!r}") from None


def rigid_resample(volume, matrix, shift_mm, voxel_size: float, order: int = 1) -> np.ndarray:
    """Resample so that content at world ``x`` moves to ``A x + shift``; grid-centred."""
    v = np.asarray(volume, dtype=np.float64)
    a = np.asarray(matrix, dtype=np.float64)
    center = (np.asarray(v.shape) - 1) / 2.0
    inv = np.linalg.inv(a)
    offset = center - inv @ (center + np.asarray(shift_mm) / voxel_size)
    return ndimage.affine_transform(v, inv, offset=offset, order=order, mode="constant", cval=0.0)


def augment(volume, seed: int, profile="regressor", voxel_size: float = 1.0, mask=None,
            gt_pose: RigidPose | None = None):
    """Apply the augmentation stack in fixed order and return ``(volume, record)``.

    Order: rigid transform, low-resolution simulation, bias field, gamma,
    Gaussian noise, spin history. ``record`` holds every sampled parameter
    and the augmented ground-truth pose ``(A, shift) o gt_pose``.
    """
    prof = get_profile(profile)
    rng = np.random.default_rng(seed)
    v = np.asarray(volume, dtype=np.float64)
    gt_pose = gt_pose or RigidPose.identity()
    if mask is None:
        mask = v > 0.5 * v.max() if v.max() > 0 else np.zeros(v.shape, bool)
    rec: dict = {"profile": prof.name, "seed": int(seed)}

    r = so3.sample_rotation(rng) if prof.rotate else np.eye(3)
    shift = rng.uniform(-prof.max_shift_mm, prof.max_shift_mm, 3) if prof.max_shift_mm else np.zeros(3)
    scale = float(rng.uniform(*prof.scale_range)) if prof.scale_range != (1.0, 1.0) else 1.0
    rec.update(rotation=r.tolist(), shift_mm=shift.tolist(), scale=scale)
    if prof.rotate or prof.max_shift_mm or scale != 1.0:
        v = rigid_resample(v, scale * r, shift, voxel_size)
        mask = rigid_resample(mask.astype(np.float64), scale * r, shift, voxel_size, order=0) > 0.5
    new_pose = RigidPose(r @ gt_pose.R, scale * r @ gt_pose.t + shift)
    rec["gt_R"] = new_pose.R.tolist()
    rec["gt_t_mm"] = new_pose.t.tolist()

    if prof.lowres_prob and rng.uniform() < prof.lowres_prob:
        thick = float(rng.uniform(*prof.lowres_range))
        axis = int(rng.integers(0, 3))
        v = simulate_low_resolution(v, voxel_size, thick, axis)
        rec["lowres"] = {"thickness_mm": thick, "axis": axis}
    else:
        rec["lowres"] = None

    if prof.bias:
        coeffs = rng.uniform(0.0, prof.bias_max, len(BIAS_TERMS))
        v = v * bias_field(v.shape, coeffs)
        rec["bias_coeffs"] = coeffs.tolist()
    if prof.log_gamma_range is not None:
        lg = float(rng.uniform(*prof.log_gamma_range))
        v = apply_gamma(v, lg)
        rec["log_gamma"] = lg
    if prof.noise_range is not None:
        sd = float(rng.uniform(*prof.noise_range))
        v = np.maximum(v + rng.normal(0.0, sd, v.shape), 0.0) if sd > 0 else v
        rec["noise_sigma"] = sd
    if prof.spin_sigma_range is not None and mask.any():
        sigma = float(rng.uniform(*prof.spin_sigma_range))
        sampler = sample_uniform_voxel if prof.c_slice == "uniform" else sample_boundary_voxel
        idx = sampler(mask, rng)
        c = (idx - (np.asarray(v.shape) - 1) / 2.0) * voxel_size
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        art = ArtifactParams(tuple(float(x) for x in c), tuple(float(x) for x in n), sigma)
        v = spin_history(v, art, voxel_size)
        rec["spin"] = {"c_slice_mm": list(art.c_slice), "n_slice": list(art.n_slice), "sigma_mm": sigma}
    return v, rec


# ---------------------------------------------------------------------------
# network input preparation


def crop_to_brain(volume, mask, voxel_size: float, size: int = 16, fill: float = 0.6):
    """Resample a cube centred on the brain centroid so the brain spans ``fill`` of it.

    The cube side is ``2 r / fill`` where ``r`` is the largest centroid-to-voxel
    distance, a rotation-invariant extent. Returns ``(crop, crop voxel size mm)``.
    """
    mask = np.asarray(mask, dtype=bool)
    occ = OccupancyGrid(mask, _box_affine(mask.shape, voxel_size))
    com = com_translation(occ)
    pts = np.argwhere(mask) @ occ.affine[:3, :3].T + occ.affine[:3, 3]
    radius = float(np.sqrt(((pts - com) ** 2).sum(axis=1).max())) + 0.5 * voxel_size
    side = 2.0 * radius / fill
    step = side / size
    ax = (np.arange(size) - (size - 1) / 2.0) * step
    grid = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1) + com
    inv = np.linalg.inv(occ.affine)
    idx = grid @ inv[:3, :3].T + inv[:3, 3]
    crop = ndimage.map_coordinates(np.asarray(volume, dtype=np.float64), np.moveaxis(idx, -1, 0),
                                   order=1, mode="constant", cval=0.0)
    return crop, step


def _box_affine(shape, voxel_size):
    a = np.eye(4) * voxel_size
    a[3, 3] = 1.0
    a[:3, 3] = -(np.asarray(shape) - 1) / 2.0 * voxel_size
    return a
