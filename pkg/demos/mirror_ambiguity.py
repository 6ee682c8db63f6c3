"""Why the left-right axis is predicted as a pseudovector.

A head is nearly mirror symmetric. Under the L-R mirror an ordinary vector
output must flip its x component, so on a symmetric input it is forced into
the y-z plane. A pseudovector output is instead forced onto the x axis,
which is where the true left-right direction lies.
"""
import numpy as np

from steerpose import synth, train
from steerpose.network import EquivariantNet, desk_spec
from steerpose.pose import PoseParametrization, loss

mirror = np.diag([-1.0, 1.0, 1.0])
shape = synth.random_head_shape(np.random.default_rng(3), asymmetry_strength=0.0)
x = train.render_input(shape, np.eye(3), 16)
print("input mirror residual:", np.abs(synth.mirror_x(x) - x).max())

for head in ("pseudovector", "no_pseudovector"):
    net = EquivariantNet(desk_spec(head))
    raw = net.run(x, net.init_params(0))
    ex = raw[:3] / np.linalg.norm(raw[:3])
    print(f"{head:16s} e_x = {np.round(ex, 4)}")

# the loss only cares about the line of e_x, not its sign
gt = np.eye(3)
p = PoseParametrization(gt[:, 0], gt[:, 1], gt[:, 2])
q = PoseParametrization(-gt[:, 0], gt[:, 1], gt[:, 2])
print("loss at gt / at mirrored e_x:", loss(p, gt)[0], loss(q, gt)[0])
q_vec = PoseParametrization(-gt[:, 0], gt[:, 1], gt[:, 2], mode="no_pseudovector")
print("vector-head loss at mirrored e_x:", loss(q_vec, gt)[0])
