"""Rotate a head phantom by grid rotations and watch the pose output follow.

Run with ``python3 demos/equivariance_walkthrough.py``.
"""
import numpy as np

from steerpose import so3, synth, train
from steerpose.fields import IrrepField, transform_field
from steerpose.network import EquivariantNet, desk_spec
from steerpose.pose import project_to_rotation, rho_h

# a small two-level net; weights are random, equivariance holds for any weights
net = EquivariantNet(desk_spec())
w = net.init_params(0)
print(f"desk net: {net.n_params} parameters, output rep {net.out_rep}")

shape = synth.random_head_shape(np.random.default_rng(7), asymmetry_strength=0.05)
x = train.render_input(shape, np.eye(3), 16)
h = net.run(x, w)
r0 = project_to_rotation(net.forward(x, w))

# the 48 signed permutation matrices map the voxel grid onto itself,
# so the network commutes with them up to roundoff
print("\n  det  |h(gx) - rho(g) h(x)| / |h|   frame error (deg)")
for g in so3.octahedral_group()[::6]:
    xg = transform_field(IrrepField.scalar(x), g).data
    hg = net.run(xg, w)
    rel = np.linalg.norm(hg - rho_h(g) @ h) / np.linalg.norm(h)
    line = f"  {np.linalg.det(g):+.0f}   {rel:.2e}"
    if np.linalg.det(g) > 0:
        r1 = project_to_rotation(net.forward(xg, w))
        line += f"                      {np.degrees(so3.geodesic_distance(r1, g @ r0)):.1e}"
    print(line)

# off-grid rotations need interpolation; the 5^3 kernels only approximate the
# continuous symmetry at this resolution, so expect tens of degrees here
g = so3.axis_angle([1.0, 1.0, 0.0], np.radians(30))
xg = transform_field(IrrepField.scalar(x), g, exact=False).data
r1 = project_to_rotation(net.forward(xg, w))
print(f"\n30 deg off-grid rotation: frame error {np.degrees(so3.geodesic_distance(r1, g @ r0)):.1f} deg")
