"""Layer-by-layer equivariance residuals for a network and parameter set."""
from __future__ import annotations

import numpy as np

from . import so3
from .fields import IrrepField, transform_field
from .layers import EquivariantConv, MeanPool
from .network import SCALAR_IN, EquivariantNet
from .pose import rho_h

EXACT_TOL = 1e-6


def _rel(a, b) -> float:
    scale = max(float(np.abs(b).max()), 1e-300)
    return float(np.abs(a - b).max()) / scale


def layer_reps(net: EquivariantNet):
    """Output RepSpec after every layer (``None`` for the pooled head vector)."""
    reps = []
    rep = SCALAR_IN
    for _, layer, _ in net.layers:
        if isinstance(layer, MeanPool):
            reps.append(None)
            continue
        rep = getattr(layer, "rep_out", getattr(layer, "rep", rep))
        reps.append(rep)
    return reps


def residuals(net: EquivariantNet, params, x, g, exact: bool = True):
    """Per-layer relative residuals ``|F(g f) - rho(g) F(f)| / |F(f)|``."""
    x = np.asarray(x, dtype=np.float64)
    base, moved = [], []
    net.run(x, params, trace=base)
    xg = transform_field(IrrepField.scalar(x), g, exact=exact).data
    net.run(xg, params, trace=moved)
    out = []
    for (name, h), (_, hg), rep in zip(base, moved, layer_reps(net)):
        if rep is None:
            expect = rho_h(g, net.spec.head) @ h
        else:
            expect = transform_field(IrrepField(h, rep), g, exact=exact).data
        out.append((name, _rel(hg, expect)))
    return out


def element_classes(n_resampled: int = 3, seed: int = 0):
    """``[(class name, matrix, exact)]``: proper and improper octahedral elements plus random rotations."""
    out = []
    for g in so3.octahedral_group():
        cls = "proper/grid-exact" if np.linalg.det(g) > 0 else "improper/grid-exact"
        out.append((cls, g, True))
    rng = np.random.default_rng(seed)
    for _ in range(n_resampled):
        out.append(("proper/resampled", so3.sample_rotation(rng), False))
    return out


def report(net: EquivariantNet, params, x, n_resampled: int = 3, seed: int = 0) -> dict:
    """Max residual per (layer, element class) plus an end-to-end row.

    ``ok`` is False when any grid-exact residual exceeds :data:`EXACT_TOL`.
    Resampled rows are informative only (trilinear interpolation error).
    """
    table: dict = {}
    for cls, g, exact in element_classes(n_resampled, seed):
        for name, r in residuals(net, params, x, g, exact):
            key = (name, cls)
            table[key] = max(table.get(key, 0.0), r)
    last = net.layers[-1][0]
    rows = []
    for (name, cls), r in table.items():
        rows.append({"layer": "end-to-end" if name == last else name, "class": cls, "max_residual": r})
    failing = [row["layer"] for row in rows
               if "grid-exact" in row["class"] and row["max_residual"] > EXACT_TOL]
    first = None
    order = [n for n, _, _ in net.layers]
    if failing:
        first = min((f for f in failing if f in order), key=order.index, default=failing[0])
    return {"rows": rows, "ok": not failing, "first_failing_layer": first}


def inject_fault(net: EquivariantNet, layer_name: str | None = None, seed: int = 0, scale: float = 0.1) -> str:
    """Corrupt one convolution kernel with an unconstrained perturbation; returns its name."""
    convs = [(n, l) for n, l, _ in net.layers if isinstance(l, EquivariantConv)]
    name, layer = next(((n, l) for n, l in convs if n == layer_name), convs[0])
    layer.inject_fault(np.random.default_rng(seed), scale)
    return name


def format_report(rep: dict) -> str:
    lines = [f"{'layer':<18} {'class':<22} max_residual"]
    for row in rep["rows"]:
        lines.append(f"{row['layer']:<18} {row['class']:<22} {row['max_residual']:.3e}")
    lines.append("PASS" if rep["ok"] else f"FAIL: first failing layer {rep['first_failing_layer']}")
    return "\n".join(lines)
