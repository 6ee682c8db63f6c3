"""Toy-scale trainer for the rotation regressor."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import so3, synth
from .errors import DegenerateOutput
from .network import EquivariantNet, to_parametrization
from .pose import RigidPose, loss, normalize_backward, project_to_rotation


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-2
    momentum: float = 0.99
    weight_decay: float = 3e-5
    beta: float = 1.0
    grad_eps: float = 1e-4
    clip_norm: float = 1.0
    seed: int = 0
    fill: float = 0.6
    log_every: int = 0


def render_input(shape: synth.HeadShape, r, size: int, fill: float = 0.6) -> np.ndarray:
    """Render a head at rotation ``r`` straight onto a network crop.

    The crop is centred on the brain centre and sized so the brain's
    circumscribed sphere spans ``fill`` of the side, matching
    :func:`synth.crop_to_brain` without an intermediate resampling step.
    """
    radius = max(shape.semi_axes)
    step = 2.0 * radius / fill / size
    vol, _ = synth.render(shape, RigidPose(r, np.zeros(3)), size, step)
    return vol


class ToyDataset:
    """Fixed-seed phantoms; each draw is a freshly rotated rendering."""

    def __init__(self, n: int = 32, seed: int = 0, size: int = 16, asymmetry_strength: float = 0.05,
                 fill: float = 0.6):
        rng = np.random.default_rng(seed)
        self.shapes = [synth.random_head_shape(np.random.default_rng(int(s)), asymmetry_strength)
                       for s in rng.integers(0, 2 ** 31, n)]
        self.size = size
        self.fill = fill
        eval_rng = np.random.default_rng(seed + 1)
        self.eval_rotations = [so3.sample_rotation(eval_rng) for _ in range(n)]

    def __len__(self):
        return len(self.shapes)

    def sample(self, i: int, r) -> tuple:
        """Volume and ground-truth frame for phantom ``i`` at rotation ``r``."""
        return render_input(self.shapes[i], r, self.size, self.fill), np.asarray(r)


def evaluate(net: EquivariantNet, params, data: ToyDataset) -> np.ndarray:
    """Geodesic error (rad) per phantom at its fixed evaluation rotation."""
    errs = []
    for i, r in enumerate(data.eval_rotations):
        x, gt = data.sample(i, r)
        try:
            pred = project_to_rotation(net.forward(x, params))
            errs.append(so3.geodesic_distance(pred, gt))
        except (DegenerateOutput, ArithmeticError, ValueError):
            errs.append(math.pi)
    return np.asarray(errs)


def train_toy(net: EquivariantNet, data: ToyDataset, config: TrainConfig = TrainConfig(), params=None,
              callback=None):
    """SGD with momentum and weight decay, batch size 1.

    Returns ``(params, history)``; ``history`` lists ``(step, loss)``. The run
    is deterministic given ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    w = net.init_params(config.seed) if params is None else np.array(params, dtype=np.float64)
    vel = np.zeros_like(w)
    history = []
    for step in range(config.steps):
        i = int(rng.integers(len(data)))
        x, gt = data.sample(i, so3.sample_rotation(rng))
        tape = []
        raw = net.run(x, w, tape)
        try:
            p = to_parametrization(raw, net.spec.head)
        except DegenerateOutput:
            continue
        value, g_unit = loss(p, gt, config.beta, config.grad_eps)
        grad = net.backward_tape(tape, normalize_backward(raw, g_unit))
        gn = float(np.linalg.norm(grad))
        if config.clip_norm and gn > config.clip_norm:
            grad *= config.clip_norm / gn
        grad += config.weight_decay * w
        vel = config.momentum * vel - config.lr * grad
        w = w + vel
        history.append((step, value))
        if callback is not None and config.log_every and (step + 1) % config.log_every == 0:
            callback(step + 1, w, history)
    return w, history
