"""Rotated boxes: corners, exact IoU against a Monte Carlo estimate, and BEV NMS.

Run with ``python demos/geometry_tour.py``.
"""
import numpy as np

from v2pdet import geom3d
from v2pdet.rpn import nms_bev

rng = np.random.default_rng(0)

car = np.array([10.0, 2.0, -0.9, 4.0, 1.7, 1.5, 0.3])
print("corners (bottom face first, counter-clockwise):")
print(np.round(geom3d.corners(car), 3))

# a copy nudged forward and turned a little
other = car.copy()
other[0] += 0.8
other[6] += 0.25
exact = geom3d.iou_3d(car, other)
mc, se = geom3d.iou_3d_montecarlo(car, other, 1_000_000, rng)
print(f"\nexact 3D IoU {exact:.4f}, Monte Carlo {mc:.4f} +/- {se:.4f}")
print(f"BEV IoU {geom3d.iou_bev(car, other):.4f}")

# a pile of noisy copies around two cars; NMS keeps one per car
centers = np.array([[10.0, 2.0], [16.0, -3.0]])
boxes = np.repeat(car[None], 20, axis=0)
boxes[:, :2] = centers[np.arange(20) % 2] + rng.normal(0, 0.3, (20, 2))
boxes[:, 6] += rng.normal(0, 0.1, 20)
scores = rng.random(20)
keep = nms_bev(boxes, scores, thresh=0.1)
print(f"\nNMS kept {len(keep)} of {len(boxes)} boxes:", keep.tolist())
