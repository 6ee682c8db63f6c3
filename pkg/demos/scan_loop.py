"""A mock scanner talking to the pose server over a socket pair.

Every navigator is answered with the next slice plane. Step 3 is made to
overrun the deadline, so its reply falls back to the previous pose. The
weights are untrained, so the planes are far off; the point is timing.
"""
from steerpose import scanloop, slicesim
from steerpose.network import EquivariantNet, desk_spec

net = EquivariantNet(desk_spec())
est = scanloop.NetworkEstimator(net, net.init_params(0))
est = scanloop.SleepyEstimator(est, delay=0.5, steps={3})

shape = slicesim.simulation_shape(2)
traj = slicesim.synth_trajectory(2, 8)
plan = slicesim.plan_for_brain("axial", slicesim.brain_points(shape))
cfg = scanloop.ScannerConfig(deadline=0.25)

records = scanloop.run_loopback(est, shape, traj, plan, cfg)
print(" k  status    compute_ms  obliqueness_deg  com_in_fov")
for r in records:
    print(f"{r['k']:2d}  {r['status']:8s}  {r['compute_ms']:10.1f}  {r['obliqueness_deg']:15.2f}  {r['com_in_fov']}")
