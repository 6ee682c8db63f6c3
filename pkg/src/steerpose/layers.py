"""Equivariant layers with explicit forward/backward passes.

Every layer works on raw channel-first arrays ``(C, X, Y, Z)``. ``forward``
returns ``(out, cache)`` and ``backward(grad_out, cache)`` returns
``(grad_in, grad_params)``; the network records ``(layer, cache)`` pairs on a
tape and replays them in reverse.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import so3
from .errors import ValidationError
from .kernels import build_kernel_basis

SCALAR_E = so3.Irrep(0, so3.EVEN)
SCALAR_O = so3.Irrep(0, so3.ODD)


def _windows(x: np.ndarray, size: int) -> np.ndarray:
    pad = size // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    return sliding_window_view(xp, (size, size, size), axis=(1, 2, 3))


def correlate(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 3D cross-correlation, ``out[o, y] = sum K[o, i, d] x[i, y + d]``."""
    size = kernel.shape[-1]
    if size == 1:
        return np.tensordot(kernel[..., 0, 0, 0], x, axes=1)
    win = _windows(x, size)
    return np.tensordot(kernel, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))


def correlate_backward(grad: np.ndarray, x: np.ndarray, kernel: np.ndarray):
    size = kernel.shape[-1]
    if size == 1:
        k = kernel[..., 0, 0, 0]
        gk = np.tensordot(grad, x, axes=([1, 2, 3], [1, 2, 3]))[..., None, None, None]
        return np.tensordot(k.T, grad, axes=1), gk
    gk = np.tensordot(grad, _windows(x, size), axes=([1, 2, 3], [1, 2, 3]))
    flipped = kernel[:, :, ::-1, ::-1, ::-1]
    gx = np.tensordot(flipped, _windows(grad, size), axes=([0, 2, 3, 4], [0, 4, 5, 6]))
    return gx, gk


class EquivariantConv:
    """Steerable convolution between two :class:`~steerpose.so3.RepSpec` layouts."""

    def __init__(self, rep_in: so3.RepSpec, rep_out: so3.RepSpec, size: int = 5, level: int = 2, name: str = "conv"):
        self.rep_in, self.rep_out = rep_in, rep_out
        self.size, self.level, self.name = size, level, name
        self.pairs = []       # (in slice, out slice, mult_in, mult_out, basis tensors, param offset)
        offset = 0
        for mo, ir_o, sl_o in rep_out.slices():
            for mi, ir_i, sl_i in rep_in.slices():
                basis = _quiet_basis(ir_i, ir_o, size, level)
                live = basis.live()
                if not live.any():
                    continue
                tensors = np.ascontiguousarray(basis.tensors[live])
                count = mo * mi * len(tensors)
                self.pairs.append((sl_i, sl_o, mi, mo, tensors, offset, ir_i, ir_o))
                offset += count
        self.n_params = offset
        self.fault = None

    def init_params(self, rng) -> np.ndarray:
        w = np.empty(self.n_params)
        for sl_i, sl_o, mi, mo, tensors, off, *_ in self.pairs:
            n = mo * mi * len(tensors)
            w[off:off + n] = rng.normal(0.0, 1.0 / np.sqrt(mi * len(tensors)), n)
        return w

    def kernel(self, w: np.ndarray) -> np.ndarray:
        s = self.size
        k = np.zeros((self.rep_out.dim, self.rep_in.dim, s, s, s))
        for sl_i, sl_o, mi, mo, tensors, off, ir_i, ir_o in self.pairs:
            n = len(tensors)
            wp = w[off:off + mo * mi * n].reshape(mo, mi, n)
            block = np.einsum("abn,npqxyz->apbqxyz", wp, tensors)
            k[sl_o, sl_i] = block.reshape(mo * ir_o.dim, mi * ir_i.dim, s, s, s)
        if self.fault is not None:
            k = k + self.fault
        return k

    def kernel_grad(self, gk: np.ndarray) -> np.ndarray:
        gw = np.zeros(self.n_params)
        s = self.size
        for sl_i, sl_o, mi, mo, tensors, off, ir_i, ir_o in self.pairs:
            n = len(tensors)
            blk = gk[sl_o, sl_i].reshape(mo, ir_o.dim, mi, ir_i.dim, s, s, s)
            gw[off:off + mo * mi * n] = np.einsum("apbqxyz,npqxyz->abn", blk, tensors).ravel()
        return gw

    def inject_fault(self, rng, scale: float = 1.0):
        """Add an unconstrained random perturbation to the assembled kernel."""
        s = self.size
        self.fault = scale * rng.normal(size=(self.rep_out.dim, self.rep_in.dim, s, s, s))

    def forward(self, x, w):
        k = self.kernel(w)
        return correlate(x, k), (x, k)

    def backward(self, grad, cache):
        x, k = cache
        gx, gk = correlate_backward(grad, x, k)
        return gx, self.kernel_grad(gk)


def _quiet_basis(ir_i, ir_o, size, level):
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_kernel_basis(ir_i, ir_o, size, level)


class InstanceNorm:
    """Scalars: zero mean, unit variance per channel. Higher orders: divide by RMS norm."""

    n_params = 0

    def __init__(self, rep: so3.RepSpec, eps: float = 1e-5):
        self.rep, self.eps = rep, eps

    def forward(self, x, w=None):
        out = np.empty_like(x)
        caches = []
        for mult, ir, sl in self.rep.slices():
            blk = x[sl]
            if ir.l == 0:
                mu = _spatial_mean(blk)
                sigma = np.sqrt(_spatial_mean((blk - mu) ** 2) + self.eps)
                y = (blk - mu) / sigma
                caches.append((y, sigma))
            else:
                v = blk.reshape((mult, ir.dim) + blk.shape[1:])
                sigma = np.sqrt(_spatial_mean((v ** 2).sum(axis=1)) + self.eps)[:, None]
                y = (v / sigma).reshape(blk.shape)
                caches.append((v, sigma))
            out[sl] = y
        return out, caches

    def backward(self, grad, caches):
        gx = np.empty_like(grad)
        for (mult, ir, sl), (a, sigma) in zip(self.rep.slices(), caches):
            g = grad[sl]
            if ir.l == 0:
                y = a
                gm = g.mean(axis=(1, 2, 3), keepdims=True)
                gy = (g * y).mean(axis=(1, 2, 3), keepdims=True)
                gx[sl] = (g - gm - y * gy) / sigma
            else:
                v = a
                gv = g.reshape(v.shape)
                n = np.prod(v.shape[2:])
                dot = (gv * v).sum(axis=(1, 2, 3, 4), keepdims=True)
                gx[sl] = (gv / sigma - v * dot / (n * sigma ** 3)).reshape(g.shape)
        return gx, np.zeros(0)


def _spatial_mean(a):
    """Mean over the last three axes with exactly rounded sums.

    The result does not depend on voxel order, so shifted or permuted inputs
    give bitwise-identical statistics and near-ties downstream break the same way.
    """
    flat = a.reshape(a.shape[:-3] + (-1,))
    n = flat.shape[-1]
    out = np.array([math.fsum(row) / n for row in flat.reshape(-1, n)])
    return out.reshape(a.shape[:-3] + (1, 1, 1))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Gate:
    """Pointwise nonlinearity: ReLU on even scalars, tanh on odd scalars,
    sigmoid gates on higher orders.

    ``rep_in`` is ``features + n_gates x 0e``; the gate scalars are the last
    ``n_gates`` even-scalar copies and are consumed here. Gate ``k`` scales the
    ``k``-th higher-order copy in canonical order.
    """

    n_params = 0

    def __init__(self, features: so3.RepSpec):
        self.features = features
        self.n_gates = sum(m for m, ir in features.blocks if ir.l > 0)
        self.rep_in = so3.RepSpec(list(features.blocks) + [(self.n_gates, SCALAR_E)])
        self.rep_out = features
        n_even = features.count(SCALAR_E)
        in_slices = {ir: sl for _, ir, sl in self.rep_in.slices()}
        e0 = in_slices.get(SCALAR_E, slice(0, 0)).start
        self.gate_slice = slice(e0 + n_even, e0 + n_even + self.n_gates)
        self.routes = []      # (in slice, out slice, irrep, mult, first gate)
        gate = 0
        for mult, ir, sl_out in features.slices():
            sl_in = in_slices[ir]
            if ir == SCALAR_E:
                sl_in = slice(sl_in.start, sl_in.start + mult)
            self.routes.append((sl_in, sl_out, ir, mult, gate))
            if ir.l > 0:
                gate += mult

    def forward(self, x, w=None):
        out = np.empty((self.rep_out.dim,) + x.shape[1:])
        gates = _sigmoid(x[self.gate_slice])
        for sl_in, sl_out, ir, mult, g0 in self.routes:
            blk = x[sl_in]
            if ir == SCALAR_E:
                out[sl_out] = np.maximum(blk, 0.0)
            elif ir == SCALAR_O:
                out[sl_out] = np.tanh(blk)
            else:
                v = blk.reshape((mult, ir.dim) + blk.shape[1:])
                out[sl_out] = (v * gates[g0:g0 + mult, None]).reshape(blk.shape)
        return out, (x, gates, out)

    def backward(self, grad, cache):
        x, gates, out = cache
        gx = np.zeros_like(x)
        ggate = np.zeros_like(gates)
        for sl_in, sl_out, ir, mult, g0 in self.routes:
            g = grad[sl_out]
            if ir == SCALAR_E:
                gx[sl_in] = g * (x[sl_in] > 0)
            elif ir == SCALAR_O:
                gx[sl_in] = g * (1.0 - out[sl_out] ** 2)
            else:
                shape = (mult, ir.dim) + g.shape[1:]
                gv = g.reshape(shape)
                v = x[sl_in].reshape(shape)
                s = gates[g0:g0 + mult]
                gx[sl_in] = (gv * s[:, None]).reshape(g.shape)
                ggate[g0:g0 + mult] = (gv * v).sum(axis=1) * s * (1.0 - s)
        gx[self.gate_slice] += ggate
        return gx, np.zeros(0)


class NormPool:
    """Strided pooling that keeps, per window, the element of largest magnitude.

    Even scalars use plain max pooling, odd scalars the largest absolute value
    (so the sign flip under inversion commutes), and higher orders the tensor
    of largest Euclidean norm, moved as a whole.
    """

    n_params = 0

    def __init__(self, rep: so3.RepSpec, stride: int = 2):
        self.rep, self.stride = rep, stride

    def _split(self, x):
        s = self.stride
        c, nx, ny, nz = x.shape
        if nx % s or ny % s or nz % s:
            raise ValidationError(f"grid {x.shape[1:]} not divisible by pooling stride {s}")
        v = x.reshape(c, nx // s, s, ny // s, s, nz // s, s)
        return v.transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, nx // s, ny // s, nz // s, s ** 3)

    def forward(self, x, w=None):
        if self.stride == 1:
            return x, None
        win = self._split(x)
        out = np.empty(win.shape[:-1])
        picks = []
        for mult, ir, sl in self.rep.slices():
            blk = win[sl]
            v = blk.reshape((mult, ir.dim) + blk.shape[1:])
            if ir == SCALAR_E:
                score = v[:, 0]
            elif ir.l == 0:
                score = np.abs(v[:, 0])
            else:
                score = (v ** 2).sum(axis=1)
            idx = np.argmax(score, axis=-1)
            sel = np.take_along_axis(v, idx[:, None, ..., None], axis=-1)[..., 0]
            out[sl] = sel.reshape((mult * ir.dim,) + sel.shape[2:])
            picks.append(idx)
        return out, (x.shape, picks)

    def backward(self, grad, cache):
        if self.stride == 1:
            return grad, np.zeros(0)
        shape, picks = cache
        s = self.stride
        c = shape[0]
        gwin = np.zeros(grad.shape + (s ** 3,))
        for (mult, ir, sl), idx in zip(self.rep.slices(), picks):
            g = grad[sl].reshape((mult, ir.dim) + grad.shape[1:])
            tgt = np.zeros(g.shape + (s ** 3,))
            np.put_along_axis(tgt, np.broadcast_to(idx[:, None, ..., None], g.shape + (1,)), g[..., None], axis=-1)
            gwin[sl] = tgt.reshape((mult * ir.dim,) + tgt.shape[2:])
        nx, ny, nz = shape[1:]
        gx = gwin.reshape(c, nx // s, ny // s, nz // s, s, s, s).transpose(0, 1, 4, 2, 5, 3, 6)
        return gx.reshape(shape), np.zeros(0)


class MeanPool:
    """Average over all voxels; output shape ``(C,)``."""

    n_params = 0

    def forward(self, x, w=None):
        return x.mean(axis=(1, 2, 3)), x.shape

    def backward(self, grad, shape):
        n = np.prod(shape[1:])
        return np.broadcast_to((grad / n)[:, None, None, None], shape).copy(), np.zeros(0)
