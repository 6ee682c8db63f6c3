"""Real representations of O(3).

Conventions
-----------
All conventions live here and are exported in :data:`CONVENTIONS`.

- Real spherical harmonics are orthonormal on the unit sphere
  (``integral Y_lm^2 dS = 1``), without the Condon-Shortley phase.
- For ``l >= 2`` components are ordered ``m = -l .. l``; ``m > 0`` carries
  ``cos(m phi)``, ``m < 0`` carries ``sin(|m| phi)``, polar axis is ``z``.
- For ``l = 1`` components are Cartesian ``(x, y, z)`` so that the order-1
  representation of a rotation is the rotation matrix itself.
- Parity is ``+1`` (even) or ``-1`` (odd). An improper ``g`` acts as
  ``D^l(-g)`` times ``det(g)`` for odd irreps and times 1 for even ones.
- Rotation matrices act on column vectors; quaternions are ``(w, x, y, z)``.
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.linalg import block_diag
from scipy.spatial.transform import Rotation as _ScipyRotation
from scipy.spatial.transform import Slerp
from scipy.special import lpmv

from .errors import EmptySelectionRule, SolverDegeneracy, ValidationError

EVEN = 1
ODD = -1

CONVENTIONS = {
    "harmonic_normalization": "orthonormal_on_sphere",
    "condon_shortley_phase": False,
    "component_order_l1": ("x", "y", "z"),
    "component_order_l_ge_2": "m=-l..l",
    "polar_axis": "z",
    "positive_m": "cos(m*phi)",
    "negative_m": "sin(|m|*phi)",
    "parity_values": {"even": EVEN, "odd": ODD},
    "improper_action": "D(-g) * det(g)**(parity==odd)",
    "quaternion_order": ("w", "x", "y", "z"),
    "kernel_vec_order": "row_major",
}

ORTHO_TOL = 1e-9


class Irrep(NamedTuple):
    """Irreducible representation of O(3): order ``l`` and parity ``p``."""

    l: int
    p: int

    @property
    def dim(self) -> int:
        return 2 * self.l + 1

    @property
    def is_even(self) -> bool:
        return self.p == EVEN

    def __str__(self):
        return f"{self.l}{'e' if self.p == EVEN else 'o'}"

    @classmethod
    def parse(cls, text: str) -> "Irrep":
        text = text.strip()
        if len(text) < 2 or text[-1] not in "eo":
            raise ValidationError(f"bad irrep label {text!r}")
        return cls(int(text[:-1]), EVEN if text[-1] == "e" else ODD)


def _irrep_key(ir: Irrep):
    return (ir.l, 0 if ir.p == EVEN else 1)


@dataclass(frozen=True)
class RepSpec:
    """Direct sum of irreps with multiplicities, in canonical order.

    Channels of a block are stored copy-major: ``mult`` consecutive groups of
    ``2l+1`` components.
    """

    blocks: tuple

    def __init__(self, blocks: Iterable[tuple[int, Irrep]] = ()):
        merged: dict[Irrep, int] = {}
        for mult, ir in blocks:
            ir = Irrep(*ir)
            if ir.l < 0 or ir.p not in (EVEN, ODD):
                raise ValidationError(f"invalid irrep {ir}")
            if mult < 0:
                raise ValidationError("multiplicity must be nonnegative")
            if mult:
                merged[ir] = merged.get(ir, 0) + int(mult)
        ordered = tuple((merged[ir], ir) for ir in sorted(merged, key=_irrep_key))
        object.__setattr__(self, "blocks", ordered)

    @classmethod
    def parse(cls, text: str) -> "RepSpec":
        """Parse ``"4x0e + 2x1o"`` style strings."""
        blocks = []
        for term in text.split("+"):
            term = term.strip()
            if not term:
                continue
            mult, _, lab = term.partition("x")
            if not lab:
                mult, lab = "1", mult
            blocks.append((int(mult), Irrep.parse(lab)))
        return cls(blocks)

    @property
    def dim(self) -> int:
        return sum(m * ir.dim for m, ir in self.blocks)

    def slices(self):
        """Yield ``(mult, irrep, slice)`` for every block."""
        start = 0
        for mult, ir in self.blocks:
            stop = start + mult * ir.dim
            yield mult, ir, slice(start, stop)
            start = stop

    def count(self, ir: Irrep) -> int:
        for m, b in self.blocks:
            if b == ir:
                return m
        return 0

    def __str__(self):
        return " + ".join(f"{m}x{ir}" for m, ir in self.blocks) or "0"


# ---------------------------------------------------------------------------
# validation and basic group elements


def check_orthogonal(g, tol: float = ORTHO_TOL) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (3, 3):
        raise ValidationError(f"expected 3x3 matrix, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValidationError("matrix has non-finite entries")
    err = np.abs(g.T @ g - np.eye(3)).max()
    if err > tol:
        raise ValidationError(f"matrix is not orthogonal (error {err:.2e})")
    return g


def check_rotation(r, tol: float = ORTHO_TOL) -> np.ndarray:
    r = check_orthogonal(r, tol)
    if np.linalg.det(r) < 0:
        raise ValidationError("matrix is a reflection, expected a proper rotation")
    return r


def parity_sign(g) -> int:
    return 1 if np.linalg.det(g) > 0 else -1


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rotation matrix for ``angle`` radians about ``axis`` (right-handed)."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValidationError("zero rotation axis")
    return _ScipyRotation.from_rotvec(axis / n * angle).as_matrix()


def reflection(normal) -> np.ndarray:
    """Householder reflection across the plane with the given normal."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    return np.eye(3) - 2.0 * np.outer(n, n)


INVERSION = -np.eye(3)


@functools.lru_cache(maxsize=None)
def _octahedral(proper_only: bool):
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            g = np.zeros((3, 3))
            for row, col in enumerate(perm):
                g[row, col] = signs[row]
            if proper_only and np.linalg.det(g) < 0:
                continue
            g.setflags(write=False)
            mats.append(g)
    return tuple(mats)


def octahedral_group(proper_only: bool = False) -> tuple:
    """The 48 signed permutation matrices (24 if ``proper_only``)."""
    return _octahedral(bool(proper_only))


# ---------------------------------------------------------------------------
# spherical harmonics and Wigner-D


def _sh_lm(l: int, u: np.ndarray) -> np.ndarray:
    """Real harmonics of order ``l`` in ``m = -l..l`` order."""
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    phi = np.arctan2(y, x)
    ct = np.clip(z, -1.0, 1.0)
    out = np.empty(u.shape[:-1] + (2 * l + 1,))
    for m in range(0, l + 1):
        norm = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))
        # scipy's lpmv carries the Condon-Shortley phase; remove it
        p = (-1) ** m * lpmv(m, l, ct)
        if m == 0:
            out[..., l] = norm * p
        else:
            out[..., l + m] = math.sqrt(2.0) * norm * p * np.cos(m * phi)
            out[..., l - m] = math.sqrt(2.0) * norm * p * np.sin(m * phi)
    return out


def real_spherical_harmonics(j: int, u) -> np.ndarray:
    """Real orthonormal spherical harmonics of degree ``j`` at unit vectors ``u``.

    ``u`` has shape ``(..., 3)``; the result has shape ``(..., 2j+1)``.
    Satisfies ``Y_j(R u) = wigner_d(j, R) @ Y_j(u)``.
    """
    if j < 0:
        raise ValidationError("harmonic degree must be nonnegative")
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 3:
        raise ValidationError("directions must have a trailing axis of size 3")
    norms = np.linalg.norm(u, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValidationError("directions must be unit vectors")
    if j == 0:
        return np.full(u.shape[:-1] + (1,), 0.5 / math.sqrt(math.pi))
    if j == 1:
        return math.sqrt(3.0 / (4.0 * math.pi)) * u.copy()
    return _sh_lm(j, u)


@functools.lru_cache(maxsize=None)
def _fit_points(l: int):
    n = 6 * (2 * l + 1)
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = math.pi * (1.0 + math.sqrt(5.0)) * i
    s = np.sqrt(1.0 - z * z)
    pts = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)
    pinv = np.linalg.pinv(real_spherical_harmonics(l, pts).T)
    return pts, pinv


def wigner_d(l: int, r) -> np.ndarray:
    """Real Wigner-D matrix of order ``l`` for a proper rotation ``r``.

    Obtained as the unique linear map carrying ``Y_l(u)`` to ``Y_l(r u)``,
    fit on a fixed spiral point set.
    """
    r = np.asarray(r, dtype=np.float64)
    if l == 0:
        return np.ones((1, 1))
    if l == 1:
        return r.copy()
    pts, pinv = _fit_points(l)
    rotated = pts @ r.T
    rotated /= np.linalg.norm(rotated, axis=-1, keepdims=True)
    return real_spherical_harmonics(l, rotated).T @ pinv


def irrep_matrix(label, g) -> np.ndarray:
    """Matrix of the irrep ``label`` evaluated at the orthogonal transform ``g``."""
    label = Irrep(*label)
    g = check_orthogonal(g)
    if np.linalg.det(g) > 0:
        return wigner_d(label.l, g)
    d = wigner_d(label.l, -g)
    return -d if label.p == ODD else d


def rep_matrix(rep: RepSpec, g) -> np.ndarray:
    """Block-diagonal matrix of a full :class:`RepSpec`."""
    g = check_orthogonal(g)
    blocks = []
    for mult, ir, _ in rep.slices():
        d = irrep_matrix(ir, g)
        blocks.extend([d] * mult)
    if not blocks:
        return np.zeros((0, 0))
    return block_diag(*blocks)


# ---------------------------------------------------------------------------
# intertwiners


def selection_set(l_f: int, p_f: int, l_h: int, p_h: int) -> tuple:
    """Harmonic orders allowed between input ``(l_f, p_f)`` and output ``(l_h, p_h)``."""
    want_even = p_f == p_h
    return tuple(j for j in range(abs(l_f - l_h), l_f + l_h + 1) if (j % 2 == 0) == want_even)


@dataclass(frozen=True)
class Intertwiner:
    source: tuple
    target_j: int
    matrix: np.ndarray


def _commutant(a_list, b_list, n: int, d: int) -> np.ndarray:
    """Null space basis of ``{Q : A Q = Q B}`` (Q is n x d, row-major vec)."""
    rows = []
    eye_n, eye_d = np.eye(n), np.eye(d)
    for a, b in zip(a_list, b_list):
        rows.append(np.kron(a, eye_d) - np.kron(eye_n, b.T))
    m = np.vstack(rows)
    _, sv, vt = np.linalg.svd(m, full_matrices=False)
    tol = 1e-9 * max(sv[0], 1.0)
    return vt[sv <= tol].T


def _fixed_rotations(count: int, seed: int = 7):
    return list(_ScipyRotation.random(count, random_state=seed).as_matrix())


def _pair_matrix(l_f, p_f, l_h, p_h, g):
    return np.kron(irrep_matrix((l_h, p_h), g), irrep_matrix((l_f, p_f), g))


def solve_intertwiner_raw(l_f, p_f, l_h, p_h, j, p_j, n_rotations: int = 20, with_inversion: bool = True):
    """Null space of the intertwiner equation without selection checks.

    Returns an array of shape ``(k, n, 2j+1)``; ``k`` is the multiplicity.
    """
    n = (2 * l_h + 1) * (2 * l_f + 1)
    d = 2 * j + 1
    gs = _fixed_rotations(n_rotations)
    if with_inversion:
        gs.append(INVERSION)
    a = [_pair_matrix(l_f, p_f, l_h, p_h, g) for g in gs]
    b = [irrep_matrix((j, p_j), g) for g in gs]
    ns = _commutant(a, b, n, d)
    return ns.T.reshape(-1, n, d)


@functools.lru_cache(maxsize=None)
def _solve_cached(l_f, p_f, l_h, p_h, j):
    p_j = EVEN if j % 2 == 0 else ODD
    sols = solve_intertwiner_raw(l_f, p_f, l_h, p_h, j, p_j)
    if sols.shape[0] != 1:
        raise SolverDegeneracy(
            f"intertwiner {l_f},{p_f} -> {l_h},{p_h} at j={j}: null space of dimension {sols.shape[0]}")
    q = sols[0]
    # Schur: Q^T Q is a multiple of identity
    q = q / math.sqrt(np.trace(q.T @ q) / q.shape[1])
    flat = q.ravel()
    pivot = flat[np.argmax(np.abs(flat) > 1e-8)]
    if pivot < 0:
        q = -q
    q.setflags(write=False)
    return q


def solve_intertwiner(l_f: int, p_f: int, l_h: int, p_h: int, j: int) -> Intertwiner:
    """Change of basis ``Q_j`` from the harmonic order ``j`` into ``l_h x l_f`` kernels.

    ``Q_j`` has orthonormal columns and obeys
    ``(rho_h(g) kron rho_f(g)) Q_j = Q_j rho_Y(g)`` for all ``g`` in O(3), where
    ``rho_Y`` is the order-``j`` irrep with parity ``(-1)^j``.
    """
    if j not in selection_set(l_f, p_f, l_h, p_h):
        raise EmptySelectionRule(
            f"j={j} not allowed for {Irrep(l_f, p_f)} -> {Irrep(l_h, p_h)}")
    q = _solve_cached(int(l_f), int(p_f), int(l_h), int(p_h), int(j))
    return Intertwiner(((l_f, p_f), (l_h, p_h)), j, q)


# ---------------------------------------------------------------------------
# sampling, distances, interpolation


def sample_rotation(rng=None, size: int | None = None) -> np.ndarray:
    """Uniformly distributed rotation(s) via random unit quaternions."""
    rng = np.random.default_rng(rng)
    r = _ScipyRotation.random(size, random_state=rng)
    return r.as_matrix()


def geodesic_distance(r1, r2) -> float:
    """Angle in radians of ``r1 r2^T``, in ``[0, pi]``.

    Uses Frobenius chords, ``|r1 - r2|^2 = 8 sin^2(t/2)`` and
    ``|r1 + r2|^2 - 4 = 8 cos^2(t/2)``, which agree with
    ``arccos((tr(r1 r2^T) - 1) / 2)`` but stay exact for identical inputs
    and well conditioned near 0 and pi.
    """
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    s = np.linalg.norm(r1 - r2)
    c = math.sqrt(max(float(np.sum((r1 + r2) ** 2)) - 4.0, 0.0))
    return float(2.0 * math.atan2(s, c))


def matrix_to_quaternion(r) -> np.ndarray:
    xyzw = _ScipyRotation.from_matrix(r).as_quat()
    q = np.roll(xyzw, 1, axis=-1)
    return q


def quaternion_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > 1e-12):
        raise ValidationError("quaternion must have unit norm")
    return _ScipyRotation.from_quat(np.roll(q, -1, axis=-1)).as_matrix()


def slerp(r0, r1, t) -> np.ndarray:
    """Spherical linear interpolation between rotations, ``t`` in [0, 1]."""
    s = Slerp([0.0, 1.0], _ScipyRotation.from_matrix(np.stack([r0, r1])))
    return s(np.clip(t, 0.0, 1.0)).as_matrix()


def rotation_angle(r) -> float:
    return geodesic_distance(r, np.eye(3))


def project_orthogonal(m) -> np.ndarray:
    """Nearest orthogonal matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(m)
    return u @ vt


__all__: Sequence[str] = [
    "CONVENTIONS", "EVEN", "ODD", "INVERSION", "Irrep", "RepSpec", "Intertwiner",
    "axis_angle", "check_orthogonal", "check_rotation", "geodesic_distance",
    "irrep_matrix", "matrix_to_quaternion", "octahedral_group", "parity_sign",
    "quaternion_to_matrix", "real_spherical_harmonics", "reflection", "rep_matrix",
    "rotation_angle", "sample_rotation", "selection_set", "slerp",
    "solve_intertwiner", "solve_intertwiner_raw", "wigner_d",
]
