"""Train a small two-stage detector on synthetic scenes and compare the NMS confidences.

This takes a few minutes on one core.  Pass a step count to shorten it:
``python demos/train_and_compare.py 100``.
"""
import sys

from v2pdet import bundled
from v2pdet.evaluation import FrameDetections, actual_iou, correlation, evaluate
from v2pdet.roi import CONFIDENCE_MODES
from v2pdet.scene_io import SynthSpec, synth_dataset
from v2pdet.train import train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
cfg = bundled("desk")
scenes = synth_dataset(SynthSpec(num_scenes=4, seed=7))


def show(rep):
    if rep.step % 25 == 0:
        print(f"step {rep.step:4d}  total {rep.total:7.3f}  rpn {rep.rpn:6.3f}  seg {rep.seg:6.3f}  "
              f"refine {rep.refine:6.3f}")


model, reports = train(cfg, scenes, steps, callback=show)
gts = [gt for _, gt in scenes]
for mode in CONFIDENCE_MODES:
    dets = [model.detect(pc, mode=mode) for pc, _ in scenes]
    frames = [FrameDetections(d.boxes, d.class_ids, d.scores) for d in dets]
    ap = evaluate(frames, gts, ["Car"], {"Car": 0.5}).ap_3d["Car"]
    print(f"{mode:18s} AP3D@0.5 = {ap:.3f}")

# how well do the IoU estimates track the real overlap of the refined boxes?
d = model.detect(scenes[0][0])
act = actual_iou(d.refined, d.proposals.class_ids, gts[0].boxes, gts[0].class_ids)
print("PLCC/SRCC unaligned:", correlation(d.iou_unaligned, act))
print("PLCC/SRCC aligned:  ", correlation(d.iou_aligned, act))
