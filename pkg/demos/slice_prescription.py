"""Adaptive versus motion-blind slice prescription on a moving head.

Each 2D slice is planned in head coordinates. The adaptive scheme moves
the plane with the latest pose estimate; the blind scheme keeps the pose
from the start of the stack.
"""
import numpy as np

from steerpose import slicesim

shape = slicesim.simulation_shape(0)
pts = slicesim.brain_points(shape)
profile = slicesim.MotionProfile((2.0, 5.0), (0.0, 2.0))

print("orientation  slices  gap(oracle)  gap(blind)  obliq(blind, deg)")
for orient in ("sagittal", "coronal", "axial"):
    a = slicesim.simulate(shape, orient, 1, "oracle", profile, pts)
    b = slicesim.simulate(shape, orient, 1, "motion_blind", profile, pts)
    print(f"{orient:11s}  {a['n_slices']:6d}  {a['gap']:11.3f}  {b['gap']:10.3f}  {b['mean_obliqueness_deg']:10.1f}")

# a constant drift makes the blind error grow linearly, 5 deg per slice here
plan = slicesim.make_plan("axial", 25)
traj = slicesim.constant_rotation_trajectory([0, 1, 0], 5.0, 25)
rx = slicesim.prescribe(plan, traj, "motion_blind")
ob = [np.degrees(slicesim.obliqueness(rx.estimates[k], traj.poses[k])) for k in range(0, 25, 4)]
print("\nblind obliqueness every 4th slice under steady drift:", np.round(ob, 1))
