"""End-to-end training with the weighted multi-task loss."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import geom3d
from .autodiff import AdamW, NonFiniteError, Tensor, concat, focal_loss, sigmoid, smooth_l1
from .config import Config
from .decoder import seg_labels
from .model import Detector
from .roi import RefineTargets, Refinement, refine_losses, refine_targets
from .rpn import POSITIVE, assign_targets
from .scene_io import GroundTruth, PointCloud, augment, crop_to_bounds

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"loss became non-finite at step {step} {detail}".strip())
        self.step = step


@dataclass
class LossReport:
    step: int
    rpn: float
    seg: float
    cls: float
    reg: float
    iou: float
    refine: float
    total: float

    def identity_holds(self, w_rpn=1.0, w_seg=4.0, w_refine=1.0) -> bool:
        return (self.refine == self.cls + self.reg + self.iou
                and self.total == w_rpn * self.rpn + w_seg * self.seg + w_refine * self.refine)


def total_loss(parts: dict, w_rpn=1.0, w_seg=4.0, w_refine=1.0):
    """Weighted sum; returns (total, refine) tensors.  Missing parts count as zero."""
    zero = Tensor(0.0)
    refine = parts.get("cls", zero) + parts.get("reg", zero) + parts.get("iou", zero)
    total = w_rpn * parts.get("rpn", zero) + w_seg * parts.get("seg", zero) + w_refine * refine
    return total, refine


# ---------------------------------------------------------------------------
# proposal sampling for the refinement stage

def jitter_boxes(boxes, n_per_box, rng, center=0.5, size=0.15, yaw=0.3) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    if len(boxes) == 0 or n_per_box == 0:
        return np.zeros((0, 7))
    rep = np.repeat(boxes, n_per_box, axis=0)
    rep[:, 0:2] += rng.normal(0, center, (len(rep), 2))
    rep[:, 2] += rng.normal(0, center / 2, len(rep))
    rep[:, 3:6] *= np.exp(rng.normal(0, size, (len(rep), 3)))
    rep[:, 6] = geom3d.wrap_angle(rep[:, 6] + rng.normal(0, yaw, len(rep)))
    return rep


def sample_proposals(boxes, classes, gt: GroundTruth, roi_cfg, rng):
    """Pick up to ``num_sample`` proposals with a fixed foreground share when available."""
    jit = jitter_boxes(gt.boxes, roi_cfg.gt_jitter_per_box, rng, roi_cfg.gt_jitter_center,
                       roi_cfg.gt_jitter_size, roi_cfg.gt_jitter_yaw)
    pool = np.concatenate([np.asarray(boxes).reshape(-1, 7), jit])
    pool_cls = np.concatenate([np.asarray(classes, dtype=np.int64),
                               np.repeat(gt.class_ids, roi_cfg.gt_jitter_per_box)])
    if len(pool) == 0:
        return pool, pool_cls
    iou = np.zeros(len(pool))
    if len(gt):
        mat = geom3d.iou_3d_matrix(pool, gt.boxes)
        mat = np.where(pool_cls[:, None] == gt.class_ids[None, :], mat, 0.0)
        iou = mat.max(axis=1)
    fg = np.flatnonzero(iou >= roi_cfg.reg_thresh)
    bg = np.flatnonzero(iou < roi_cfg.reg_thresh)
    n = roi_cfg.num_sample
    n_fg = min(len(fg), int(round(roi_cfg.fg_fraction * n)))
    n_bg = min(len(bg), n - n_fg)
    n_fg = min(len(fg), n - n_bg)
    pick = np.concatenate([rng.choice(fg, n_fg, replace=False), rng.choice(bg, n_bg, replace=False)])
    pick = np.sort(pick.astype(np.int64))
    return pool[pick], pool_cls[pick]


# ---------------------------------------------------------------------------

@dataclass
class PreparedScene:
    pc: PointCloud
    gt: GroundTruth
    rpn_labels: np.ndarray
    rpn_targets: np.ndarray
    seg: np.ndarray


def prepare_scene(model: Detector, pc: PointCloud, gt: GroundTruth) -> PreparedScene:
    pc = crop_to_bounds(pc, model.grid.bounds)
    t = assign_targets(model.anchors, gt.boxes, gt.class_ids, model.cfg.rpn.pos_iou, model.cfg.rpn.neg_iou,
                       model.cfg.rpn.angle_period)
    return PreparedScene(pc, gt, t.labels, t.reg_targets, seg_labels(pc, gt))


def _augmented(model: Detector, pc, gt, rng) -> PreparedScene:
    tc = model.cfg.train
    if tc.aug_flip and rng.random() < 0.5:
        pc, gt = augment(pc, gt, "flip")
    pc, gt = augment(pc, gt, "rotate", rng, rot_range=tc.aug_rotate)
    pc, gt = augment(pc, gt, "scale", rng, scale_range=tc.aug_scale)
    return prepare_scene(model, pc, gt)


def step_losses(model: Detector, batch: list[PreparedScene], rng, seg_supervision=True):
    """Forward a batch and build the loss parts (pooled over the batch)."""
    cfg = model.cfg
    probs, labels, regs, reg_t = [], [], [], []
    seg_p, seg_y = [], []
    refs: list[Refinement] = []
    tgts: list[RefineTargets] = []
    for item in batch:
        out = model.forward_scene(item.pc)
        valid = np.flatnonzero(item.rpn_labels != -1)
        probs.append(sigmoid(out.rpn_logits[valid]))
        labels.append((item.rpn_labels[valid] == POSITIVE).astype(np.float64))
        pos = np.flatnonzero(item.rpn_labels == POSITIVE)
        if len(pos):
            regs.append(out.rpn_regs[pos])
            reg_t.append(item.rpn_targets[pos])
        seg_p.append(out.decoded.seg)
        seg_y.append(item.seg)
        if model.roi is not None:
            props = model.proposals(out)
            boxes, cls = sample_proposals(props.boxes, props.class_ids, item.gt, cfg.roi, rng)
            if len(boxes):
                ref = model.roi(out.scene, boxes)
                refs.append(ref)
                tgts.append(refine_targets(boxes, cls, item.gt.boxes, item.gt.class_ids, cfg.roi.cls_fg,
                                           cfg.roi.cls_bg, cfg.roi.reg_thresh, cfg.rpn.angle_period,
                                           cfg.roi.reg_target_std))
    n_pos = sum(len(r) for r in regs)
    p_all = concat(probs, axis=0)
    y_all = np.concatenate(labels)
    l_rpn_cls = focal_loss(p_all, y_all, cfg.rpn.focal_alpha, cfg.rpn.focal_gamma, normalizer=max(n_pos, 1))
    if n_pos:
        l_rpn_reg = smooth_l1(concat(regs, axis=0), np.concatenate(reg_t)).sum() / float(n_pos)
        parts_rpn = l_rpn_cls + cfg.rpn.reg_weight * l_rpn_reg
    else:
        parts_rpn = l_rpn_cls
    parts = {"rpn": parts_rpn}
    if seg_supervision:
        y = np.concatenate(seg_y)
        parts["seg"] = focal_loss(concat(seg_p, axis=0), y, cfg.loss.seg_alpha, cfg.loss.seg_gamma,
                                  normalizer=max(int(y.sum()), 1))
    if refs:
        merged = Refinement(np.concatenate([r.boxes for r in refs]),
                            concat([r.cls_logit for r in refs], axis=0),
                            concat([r.reg for r in refs], axis=0),
                            concat([r.iou for r in refs], axis=0), "first",
                            np.concatenate([r.low_evidence for r in refs]))
        merged_t = RefineTargets(*[np.concatenate([getattr(t, f) for t in tgts]) for f in
                                   ("iou", "cls_label", "reg_mask", "reg_target", "gt_index")])
        l_cls, l_reg, l_iou = refine_losses(merged, merged_t)
        parts.update(cls=l_cls, reg=l_reg, iou=l_iou)
    return parts


def train(cfg: Config, scenes, steps: int | None = None, model: Detector | None = None, callback=None):
    """Train on ``scenes`` (a list of (PointCloud, GroundTruth)); returns (model, reports)."""
    steps = cfg.train.steps if steps is None else steps
    if not scenes:
        raise ValueError("training needs at least one scene")
    tc = cfg.train
    model = model or Detector(cfg, np.random.default_rng(tc.seed))
    rng = np.random.default_rng([tc.seed, 1])
    prepared = None if tc.augment else [prepare_scene(model, pc, gt) for pc, gt in scenes]
    opt = AdamW(list(model.named_parameters()), tc.lr, tc.weight_decay, tuple(tc.betas), tc.eps, tc.grad_clip)
    w = cfg.loss
    reports = []
    order = np.zeros(0, dtype=np.int64)
    for step in range(steps):
        if len(order) < tc.batch_size:
            order = np.concatenate([order, rng.permutation(len(scenes))])
        pick, order = order[:tc.batch_size], order[tc.batch_size:]
        if prepared is None:
            batch = [_augmented(model, *scenes[i], rng) for i in pick]
        else:
            batch = [prepared[i] for i in pick]
        opt.zero_grad()
        try:
            parts = step_losses(model, batch, rng, tc.seg_supervision)
        except NonFiniteError as err:
            raise TrainingDiverged(step, f"({err})") from err
        total, refine = total_loss(parts, w.w_rpn, w.w_seg, w.w_refine)
        rep = LossReport(step, *(float(parts[k].data) if k in parts else 0.0
                                 for k in ("rpn", "seg", "cls", "reg", "iou")),
                         float(refine.data), float(total.data))
        if not np.isfinite(rep.total):
            raise TrainingDiverged(step)
        total.backward()
        if not opt.step():
            raise TrainingDiverged(step, "(non-finite gradient)")
        reports.append(rep)
        if callback is not None:
            callback(rep)
        log.debug("step %d total %.4f", step, rep.total)
    return model, reports


def write_reports(path, reports) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(asdict(r)) + "\n")
