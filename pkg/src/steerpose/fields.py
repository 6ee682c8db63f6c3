"""Voxel grids carrying typed irreducible channels, and their E(3) action."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from . import so3
from .errors import ValidationError


@dataclass
class IrrepField:
    """Channels-first voxel field ``data[C, X, Y, Z]`` typed by ``rep``.

    Array axes 0, 1, 2 are the x, y, z directions; the grid centre is the
    origin for group actions.
    """

    data: np.ndarray
    rep: so3.RepSpec
    voxel_size: float = 1.0
    approximate: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ValidationError("field data must have shape (C, X, Y, Z)")
        if self.data.shape[0] != self.rep.dim:
            raise ValidationError(
                f"channel count {self.data.shape[0]} does not match {self.rep} (dim {self.rep.dim})")

    @property
    def shape(self):
        return self.data.shape[1:]

    @classmethod
    def scalar(cls, volume, voxel_size: float = 1.0) -> "IrrepField":
        volume = np.asarray(volume, dtype=np.float64)
        return cls(volume[None], so3.RepSpec([(1, so3.Irrep(0, so3.EVEN))]), voxel_size)

    def block(self, ir) -> np.ndarray:
        """Return ``(mult, 2l+1, X, Y, Z)`` view of one irrep block."""
        ir = so3.Irrep(*ir)
        for mult, b, sl in self.rep.slices():
            if b == ir:
                return self.data[sl].reshape((mult, ir.dim) + self.shape)
        return np.zeros((0, ir.dim) + self.shape)


def is_signed_permutation(g, tol: float = 1e-12) -> bool:
    g = np.asarray(g, dtype=np.float64)
    r = np.rint(g)
    return bool(np.abs(g - r).max() < tol and np.all(np.abs(r).sum(axis=0) == 1)
                and np.all(np.abs(r).sum(axis=1) == 1))


def grid_coordinates(shape) -> np.ndarray:
    """Centred voxel coordinates, shape ``(X, Y, Z, 3)``."""
    axes = [np.arange(n) - (n - 1) / 2.0 for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def move_samples(data: np.ndarray, g, shift=None, exact: bool | None = None):
    """Resample every channel at ``g^-1 (x - shift)``; returns ``(moved, approximate)``."""
    g = so3.check_orthogonal(g)
    shape = data.shape[1:]
    shift = np.zeros(3) if shift is None else np.asarray(shift, dtype=np.float64)
    grid_exact = is_signed_permutation(g) and np.allclose(shift, np.rint(shift), atol=1e-12)
    if exact is None:
        exact = grid_exact
    coords = grid_coordinates(shape)
    center = (np.asarray(shape) - 1) / 2.0
    src = (coords - shift) @ g + center           # rows: g^T (x - shift)
    if exact:
        if not grid_exact:
            raise ValidationError("exact transform requires a signed permutation and integer shift")
        idx = np.rint(src).astype(int)
        inside = np.all((idx >= 0) & (idx < np.asarray(shape)), axis=-1)
        idx = np.where(inside[..., None], idx, 0)
        moved = data[:, idx[..., 0], idx[..., 1], idx[..., 2]]
        moved = np.where(inside[None], moved, 0.0)
        return moved, False
    pts = np.moveaxis(src, -1, 0)
    moved = np.stack([ndimage.map_coordinates(ch, pts, order=1, mode="constant", cval=0.0)
                      for ch in data])
    return moved, True


def transform_field(f: IrrepField, g, shift=None, exact: bool | None = None) -> IrrepField:
    """Apply ``[pi(g) f](x) = rho(g) f(g^-1 (x - shift))``.

    Signed permutations with integer shifts are applied exactly; any other
    transform uses trilinear resampling and marks the result ``approximate``.
    """
    if np.array_equal(g, np.eye(3)) and (shift is None or not np.any(shift)):
        return replace(f, data=f.data.copy())
    moved, approx = move_samples(f.data, g, shift, exact)
    rho = so3.rep_matrix(f.rep, g)
    out = np.tensordot(rho, moved, axes=1)
    if out.shape != f.data.shape:
        raise ValidationError("transformed field changed shape")
    return replace(f, data=out, approximate=f.approximate or approx)
