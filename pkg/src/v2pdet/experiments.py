"""Overfit study on synthetic scenes: trains with and without refinement and compares them."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .evaluation import (FrameDetections, actual_iou, correlation, evaluate, iou_shift,
                         merge_shifts)
from .model import Detector
from .scene_io import crop_to_bounds
from .train import train

log = logging.getLogger(__name__)


@dataclass
class StudyResult:
    ap_two_stage: float
    ap_rpn_only: float
    mean_iou_proposal: float
    mean_iou_refined: float
    srcc_aligned: float | None
    srcc_unaligned: float | None
    plcc_aligned: float | None
    plcc_unaligned: float | None
    seg_accuracy: float
    loss_start: float
    loss_end: float
    seconds: float
    details: dict = field(default_factory=dict, repr=False)


def seg_accuracy(model: Detector, scenes, thresh: float = 0.5) -> float:
    from .decoder import seg_labels
    hits = total = 0
    for pc, gt in scenes:
        det = model.detect(pc, refine=False)
        pts = det.extras["points"]
        lab = seg_labels(pts, gt)
        pred = det.extras["seg"] >= thresh
        hits += int((pred == lab.astype(bool)).sum())
        total += len(lab)
    return hits / max(total, 1)


def _frames(model, scenes, mode, refine):
    dets, raw = [], []
    for pc, _ in scenes:
        d = model.detect(pc, mode=mode, refine=refine)
        dets.append(FrameDetections(d.boxes, d.class_ids, d.scores))
        raw.append(d)
    return dets, raw


def _moving(xs, n=10):
    return float(np.mean(xs[:n])), float(np.mean(xs[-n:]))


def overfit_study(cfg: Config, scenes, steps: int, ap_iou: float = 0.5) -> StudyResult:
    """Train a two-stage and an RPN-only model on ``scenes`` and evaluate on the same scenes."""
    t0 = time.time()
    classes = list(cfg.classes)
    thresholds = {c: ap_iou for c in classes}
    gts = [gt for _, gt in scenes]

    two = copy.deepcopy(cfg)
    two.train.refine = True
    model, reports = train(two, scenes, steps)
    one = copy.deepcopy(cfg)
    one.train.refine = False
    rpn_model, _ = train(one, scenes, steps)

    dets_two, raw = _frames(model, scenes, "aligned-iou-x-cls", True)
    dets_one, _ = _frames(rpn_model, scenes, "cls", False)
    ap_two = evaluate(dets_two, gts, classes, thresholds).ap_3d[classes[0]]
    ap_one = evaluate(dets_one, gts, classes, thresholds).ap_3d[classes[0]]

    # diagnostics over proposals that overlap some ground truth, paired row by row
    shifts, est_un, est_al, act = [], [], [], []
    for d, (pc, gt) in zip(raw, scenes):
        props = d.proposals
        touch = actual_iou(props.boxes, props.class_ids, gt.boxes, gt.class_ids) > 0
        cid = props.class_ids[touch]
        shifts.append(iou_shift(props.boxes[touch], d.refined[touch], gt.boxes, cid, gt.class_ids))
        est_un.append(d.iou_unaligned[touch])
        est_al.append(d.iou_aligned[touch])
        act.append(actual_iou(d.refined[touch], cid, gt.boxes, gt.class_ids))
    shift = merge_shifts(shifts)
    act = np.concatenate(act)
    plcc_al, srcc_al = correlation(np.concatenate(est_al), act)
    plcc_un, srcc_un = correlation(np.concatenate(est_un), act)
    seg = seg_accuracy(model, [(crop_to_bounds(pc, model.grid.bounds), gt) for pc, gt in scenes])
    start, end = _moving([r.total for r in reports])
    return StudyResult(ap_two, ap_one, float(shift.before.mean()), float(shift.after.mean()),
                       srcc_al, srcc_un, plcc_al, plcc_un, seg, start, end, time.time() - t0,
                       {"reports": reports, "shift": shift, "model": model, "rpn_model": rpn_model})
