"""The equivariant rotation regressor: architecture spec, forward/backward, checkpoints."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import so3
from .errors import DegenerateOutput, FormatError, ValidationError
from .fields import IrrepField
from .layers import EquivariantConv, Gate, InstanceNorm, MeanPool, NormPool
from .pose import PoseParametrization, normalize_backward, output_rep

DEGENERATE_NORM = 1e-6


@dataclass(frozen=True)
class LevelSpec:
    """One resolution level: ``convs`` x (conv, instance norm, gate), then pooling.

    ``even`` and ``odd`` give feature multiplicities for orders 0, 1, 2.
    ``radial_level`` is the radial basis index ``k`` (support ``2**(k-2)``
    kernel half-widths).
    """

    even: tuple = (4, 2, 1)
    odd: tuple = (4, 2, 1)
    convs: int = 1
    kernel_size: int = 5
    radial_level: int = 2
    pool: int = 2

    def features(self) -> so3.RepSpec:
        blocks = [(m, so3.Irrep(l, so3.EVEN)) for l, m in enumerate(self.even)]
        blocks += [(m, so3.Irrep(l, so3.ODD)) for l, m in enumerate(self.odd)]
        return so3.RepSpec(blocks)


@dataclass(frozen=True)
class NetworkSpec:
    levels: tuple = field(default_factory=lambda: (LevelSpec(radial_level=2), LevelSpec(radial_level=3)))
    head: str = "pseudovector"
    head_kernel_size: int = 1
    input_size: int = 16
    norm_eps: float = 1e-5

    def __post_init__(self):
        output_rep(self.head)
        if not self.levels:
            raise ValidationError("network needs at least one level")
        stride = int(np.prod([lv.pool for lv in self.levels]))
        if self.input_size % stride:
            raise ValidationError(f"input size {self.input_size} not divisible by total stride {stride}")

    def canonical(self) -> str:
        """Stable text form, also the config-file representation."""
        lines = ["version=1", f"head={self.head}", f"head_kernel_size={self.head_kernel_size}",
                 f"input_size={self.input_size}", f"norm_eps={self.norm_eps!r}", f"levels={len(self.levels)}"]
        for i, lv in enumerate(self.levels):
            for key, val in asdict(lv).items():
                if isinstance(val, tuple):
                    val = ",".join(str(v) for v in val)
                lines.append(f"level{i}.{key}={val}")
        return "\n".join(lines) + "\n"

    def hash(self) -> bytes:
        return hashlib.sha256(self.canonical().encode()).digest()


def desk_spec(head: str = "pseudovector", input_size: int = 16) -> NetworkSpec:
    """Two-level CPU configuration."""
    return NetworkSpec(head=head, input_size=input_size)


def full_spec() -> NetworkSpec:
    """Four levels of two 5^3 convolutions, (8, 4, 2) features doubling per level."""
    levels = tuple(
        LevelSpec(even=(8 * 2 ** i, 4 * 2 ** i, 2 * 2 ** i), odd=(8 * 2 ** i, 4 * 2 ** i, 2 * 2 ** i),
                  convs=2, kernel_size=5, radial_level=i + 1, pool=2)
        for i in range(4))
    return NetworkSpec(levels=levels, input_size=64)


SCALAR_IN = so3.RepSpec([(1, so3.Irrep(0, so3.EVEN))])


class EquivariantNet:
    """Layer stack and flat parameter layout for a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.layers = []            # (name, layer, param slice or None)
        offset = 0
        rep = SCALAR_IN
        for i, lv in enumerate(spec.levels):
            feats = lv.features()
            for c in range(lv.convs):
                gate = Gate(feats)
                conv = EquivariantConv(rep, gate.rep_in, lv.kernel_size, lv.radial_level, name=f"level{i}.conv{c}")
                self.layers.append((conv.name, conv, slice(offset, offset + conv.n_params)))
                offset += conv.n_params
                self.layers.append((f"level{i}.norm{c}", InstanceNorm(gate.rep_in, spec.norm_eps), None))
                self.layers.append((f"level{i}.gate{c}", gate, None))
                rep = feats
            self.layers.append((f"level{i}.pool", NormPool(rep, lv.pool), None))
        out = output_rep(spec.head)
        last = spec.levels[-1]
        head = EquivariantConv(rep, out, spec.head_kernel_size, last.radial_level, name="head.conv")
        self.layers.append((head.name, head, slice(offset, offset + head.n_params)))
        offset += head.n_params
        self.layers.append(("head.mean", MeanPool(), None))
        self.n_params = offset
        self.out_rep = out

    def conv_layers(self):
        return [(n, l) for n, l, sl in self.layers if isinstance(l, EquivariantConv)]

    def layer(self, name):
        for n, l, _ in self.layers:
            if n == name:
                return l
        raise KeyError(name)

    def init_params(self, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        w = np.empty(self.n_params)
        for _, layer, sl in self.layers:
            if sl is not None:
                w[sl] = layer.init_params(rng)
        return w

    # ------------------------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape[0] != 1 or x.ndim != 4:
            raise ValidationError("network input must be a single scalar volume")
        if not np.all(np.isfinite(x)):
            raise ValidationError("network input has non-finite values")
        return x

    def run(self, x, params, tape: list | None = None, trace: list | None = None):
        """Raw head output (before normalization); optionally records a tape."""
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValidationError(f"expected {self.n_params} parameters, got {params.shape}")
        h = self._check_input(x)
        for name, layer, sl in self.layers:
            w = params[sl] if sl is not None else None
            h, cache = layer.forward(h, w)
            if tape is not None:
                tape.append((name, layer, sl, cache))
            if trace is not None:
                trace.append((name, h))
        return h

    def backward_tape(self, tape, grad_out):
        grads = np.zeros(self.n_params)
        g = np.asarray(grad_out, dtype=np.float64)
        for name, layer, sl, cache in reversed(tape):
            g, gw = layer.backward(g, cache)
            if sl is not None:
                if not np.all(np.isfinite(gw)):
                    raise FloatingPointError(f"non-finite gradient in layer {name}")
                grads[sl] += gw
        return grads

    def forward(self, volume, params) -> PoseParametrization:
        return to_parametrization(self.run(_volume_array(volume), params), self.spec.head)

    def value_and_grad(self, volume, params, adjoint):
        """Gradient of ``<adjoint, unit outputs>`` with respect to the parameters."""
        tape = []
        raw = self.run(_volume_array(volume), params, tape)
        p = to_parametrization(raw, self.spec.head)
        graw = normalize_backward(raw, np.asarray(adjoint, dtype=np.float64))
        return p, self.backward_tape(tape, graw)


def _volume_array(volume):
    if isinstance(volume, IrrepField):
        if volume.rep != SCALAR_IN:
            raise ValidationError("network input must be a scalar field")
        return volume.data
    return volume


def to_parametrization(raw, mode: str) -> PoseParametrization:
    vs = np.asarray(raw).reshape(-1, 3)
    norms = np.linalg.norm(vs, axis=1)
    if np.any(norms < DEGENERATE_NORM):
        raise DegenerateOutput(f"output norm too small: {norms}", raw=np.array(raw))
    return PoseParametrization.from_array(raw, mode)


def forward(volume, params, net: EquivariantNet) -> PoseParametrization:
    return net.forward(volume, params)


def backward(volume, params, adjoint, net: EquivariantNet) -> np.ndarray:
    """Parameter gradient for a loss adjoint on the unit outputs."""
    return net.value_and_grad(volume, params, adjoint)[1]


# ---------------------------------------------------------------------------
# checkpoints
#
# magic b"SPCK" | u16 version | 32-byte spec hash | u64 seed | u64 n |
# n float64 little-endian coefficients

CKPT_MAGIC = b"SPCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sH32sQQ")


def save_checkpoint(path, spec: NetworkSpec, params, seed: int):
    params = np.ascontiguousarray(params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, spec.hash(), int(seed), params.size))
        fh.write(params.tobytes())


def load_checkpoint(path, spec: NetworkSpec | None = None):
    """Returns ``(params, seed, spec_hash)``; checks the hash when ``spec`` is given."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _CKPT_HEAD.size:
        raise FormatError("truncated checkpoint header", offset=len(data), missing=_CKPT_HEAD.size - len(data))
    magic, version, digest, seed, n = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    need = _CKPT_HEAD.size + 8 * n
    if len(data) < need:
        raise FormatError("truncated checkpoint payload", offset=len(data), missing=need - len(data))
    if spec is not None and digest != spec.hash():
        raise ValidationError("checkpoint was trained with a different network spec")
    params = np.frombuffer(data, dtype="<f8", count=n, offset=_CKPT_HEAD.size).astype(np.float64)
    return params, seed, digest
