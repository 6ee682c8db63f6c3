"""Steerable 3D kernel bases built from radial profiles, harmonics and intertwiners."""
from __future__ import annotations

import functools
import io
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import so3
from .errors import FormatError, ValidationError

RADIAL_SCALE = 8.433573
N_RADIAL = 5


def soft_unit_step(x):
    """``exp(-1/x)`` for ``x > 0`` and 0 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


@dataclass(frozen=True)
class RadialBasis:
    """Five smooth bumps centred on ``{0, r/4, r/2, 3r/4, r}`` with ``r = 2**(k-2)``."""

    level: int

    def __post_init__(self):
        if self.level < 1:
            raise ValidationError("radial level index must be positive")

    @property
    def r_max(self) -> float:
        return 2.0 ** (self.level - 2)

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(0.0, self.r_max, N_RADIAL)

    @property
    def step(self) -> float:
        return self.r_max / (N_RADIAL - 1)


def radial_eval(basis: RadialBasis, r) -> np.ndarray:
    """Evaluate all radial functions at radius ``r``; returns shape ``r.shape + (5,)``."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValidationError("radius must be nonnegative")
    d = (r[..., None] - basis.centers) / basis.step
    return RADIAL_SCALE * soft_unit_step(d + 1.0) * soft_unit_step(1.0 - d)


def kernel_offsets(size: int) -> np.ndarray:
    """Integer voxel offsets of an ``S x S x S`` kernel, shape ``(S, S, S, 3)``."""
    if size < 1 or size % 2 == 0:
        raise ValidationError("kernel size must be a positive odd integer")
    c = np.arange(size) - size // 2
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).astype(np.float64)


@dataclass(frozen=True)
class KernelBasis:
    """Basis tensors for kernels mapping an ``l_f`` field onto an ``l_h`` field.

    ``tensors`` has shape ``(n, 2l_h+1, 2l_f+1, S, S, S)``; ``labels[i]`` is the
    ``(j, m)`` pair of tensor ``i``. Offsets are measured in units of the kernel
    half width, so the radial profile spans the same fraction of any kernel.
    """

    source: so3.Irrep
    target: so3.Irrep
    size: int
    level: int
    js: tuple
    labels: tuple
    tensors: np.ndarray = field(repr=False)
    status: str = "ok"

    def __len__(self):
        return len(self.labels)

    def live(self, tol: float = 1e-12) -> np.ndarray:
        """Mask of tensors that are not identically zero on the grid."""
        if not len(self):
            return np.zeros(0, dtype=bool)
        return np.abs(self.tensors).reshape(len(self), -1).max(axis=1) > tol


def _angular(j: int, offsets: np.ndarray) -> np.ndarray:
    """``Y_j`` on the offset grid, zero at the origin for ``j > 0``."""
    r = np.linalg.norm(offsets, axis=-1)
    out = np.zeros(offsets.shape[:-1] + (2 * j + 1,))
    nz = r > 0
    if j == 0:
        out[...] = so3.real_spherical_harmonics(0, np.array([0.0, 0.0, 1.0]))
        return out
    out[nz] = so3.real_spherical_harmonics(j, offsets[nz] / r[nz][:, None])
    return out


def basis_from_intertwiner(q: np.ndarray, j: int, d_h: int, d_f: int, size: int, level: int) -> np.ndarray:
    """Basis tensors ``phi_m(|x|) Q Y_j(x/|x|)`` for one intertwiner ``q``."""
    offsets = kernel_offsets(size)
    unit = max(size // 2, 1)
    radii = np.linalg.norm(offsets, axis=-1) / unit
    phi = radial_eval(RadialBasis(level), radii)             # S,S,S,M
    ang = _angular(j, offsets) @ q.T                          # S,S,S,dh*df
    t = np.einsum("xyzm,xyzc->mcxyz", phi, ang)
    return t.reshape(N_RADIAL, d_h, d_f, size, size, size)


@functools.lru_cache(maxsize=None)
def _build(src: so3.Irrep, dst: so3.Irrep, size: int, level: int) -> KernelBasis:
    js = so3.selection_set(src.l, src.p, dst.l, dst.p)
    tensors, labels = [], []
    for j in js:
        q = so3.solve_intertwiner(src.l, src.p, dst.l, dst.p, j).matrix
        tensors.append(basis_from_intertwiner(q, j, dst.dim, src.dim, size, level))
        labels.extend((j, m) for m in range(N_RADIAL))
    if tensors:
        arr = np.concatenate(tensors)
        status = "ok"
    else:
        arr = np.zeros((0, dst.dim, src.dim, size, size, size))
        status = "empty"
    arr.setflags(write=False)
    return KernelBasis(src, dst, size, level, js, tuple(labels), arr, status)


def build_kernel_basis(src, dst, size: int = 5, level: int = 2) -> KernelBasis:
    """Equivariant kernel basis between two irreps on an ``S^3`` voxel support.

    An empty selection set gives an empty basis with ``status == "empty"``.
    Results are cached; the returned arrays are read-only.
    """
    src, dst = so3.Irrep(*src), so3.Irrep(*dst)
    kernel_offsets(size)
    basis = _build(src, dst, int(size), int(level))
    if basis.status == "empty":
        warnings.warn(f"no equivariant kernels from {src} to {dst}", stacklevel=2)
    return basis


def assemble_kernel(basis: KernelBasis, w) -> np.ndarray:
    """Linear combination of basis tensors; shape ``(2l_h+1, 2l_f+1, S, S, S)``."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(basis),):
        raise ValidationError(f"expected {len(basis)} coefficients, got shape {w.shape}")
    if not len(basis):
        return np.zeros(basis.tensors.shape[1:])
    return np.tensordot(w, basis.tensors, axes=1)


def kernel_residual(kernel: np.ndarray, src, dst, g) -> float:
    """Max abs of ``rho_h(g) K(g^-1 x) rho_f(g)^T - K(x)`` for a signed permutation ``g``."""
    g = np.asarray(g, dtype=np.float64)
    size = kernel.shape[-1]
    offsets = kernel_offsets(size).reshape(-1, 3)
    c = size // 2
    moved = np.rint(offsets @ g).astype(int) + c       # g^-1 x = g^T x, as rows x @ g
    k_flat = kernel.reshape(kernel.shape[0], kernel.shape[1], -1)
    pulled = kernel[:, :, moved[:, 0], moved[:, 1], moved[:, 2]]
    rho_h = so3.irrep_matrix(dst, g)
    rho_f = so3.irrep_matrix(src, g)
    lhs = np.einsum("ab,bcn,dc->adn", rho_h, pulled, rho_f)
    return float(np.abs(lhs - k_flat).max())


# ---------------------------------------------------------------------------
# binary dump format
#
# header: magic b"SKB\x01" | u16 version | i8 l_f | i8 p_f | i8 l_h | i8 p_h |
#         u16 size | u16 level | u32 n_tensors | n * (u8 j, u8 m) |
#         float64 little-endian tensors in C order

BASIS_MAGIC = b"SKB\x01"
BASIS_VERSION = 1


def dump_basis(basis: KernelBasis) -> bytes:
    buf = io.BytesIO()
    buf.write(BASIS_MAGIC)
    buf.write(struct.pack("<HbbbbHHI", BASIS_VERSION, basis.source.l, basis.source.p,
                          basis.target.l, basis.target.p, basis.size, basis.level, len(basis)))
    for j, m in basis.labels:
        buf.write(struct.pack("<BB", j, m))
    buf.write(np.ascontiguousarray(basis.tensors, dtype="<f8").tobytes())
    return buf.getvalue()


def load_basis(data: bytes) -> KernelBasis:
    head = struct.calcsize("<HbbbbHHI")
    if data[:4] != BASIS_MAGIC:
        raise FormatError("bad magic for kernel basis dump", offset=0)
    if len(data) < 4 + head:
        raise FormatError("truncated basis header", offset=len(data), missing=4 + head - len(data))
    version, lf, pf, lh, ph, size, level, n = struct.unpack_from("<HbbbbHHI", data, 4)
    if version != BASIS_VERSION:
        raise FormatError(f"unsupported basis version {version}", offset=4)
    off = 4 + head
    labels = []
    for _ in range(n):
        if len(data) < off + 2:
            raise FormatError("truncated label table", offset=off, missing=off + 2 - len(data))
        labels.append(struct.unpack_from("<BB", data, off))
        off += 2
    src, dst = so3.Irrep(lf, pf), so3.Irrep(lh, ph)
    count = n * dst.dim * src.dim * size ** 3
    need = off + 8 * count
    if len(data) < need:
        raise FormatError("truncated tensor payload", offset=len(data), missing=need - len(data))
    arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64)
    arr = arr.reshape(n, dst.dim, src.dim, size, size, size)
    js = tuple(sorted({j for j, _ in labels}))
    return KernelBasis(src, dst, size, level, js, tuple(labels), arr, "ok" if n else "empty")


def kernel_norm(kernel) -> float:
    return float(math.sqrt(np.sum(np.asarray(kernel) ** 2)))
