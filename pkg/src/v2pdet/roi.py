"""Multi-stream 3D RoI pooling, refinement heads and the IoU alignment pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom3d
from .autodiff import (Linear, Module, Tensor, bce_loss, concat, gather_rows, no_grad, relu,
                       segment_max, sigmoid, smooth_l1, weighted_gather)
from .autodiff.nn import mlp
from .backbone import BevMap
from .rpn import decode_box, encode_box, nms_bev

CONFIDENCE_MODES = ("cls", "unaligned-iou", "aligned-iou", "aligned-iou-x-cls")


# ---------------------------------------------------------------------------
# grid points

def unit_grid(n: int) -> np.ndarray:
    """Cell centers of an n^3 lattice over the unit cube centered at the origin."""
    c = (np.arange(n) + 0.5) / n - 0.5
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def make_grid(box, n: int, world: bool = False) -> np.ndarray:
    """``n^3`` grid points of a box, canonical frame by default."""
    box = np.asarray(box, dtype=np.float64)
    pts = unit_grid(n) * box[3:6]
    return geom3d.decanonicalize(box, pts) if world else pts


# ---------------------------------------------------------------------------
# scene-level inputs shared by all proposals

@dataclass
class SceneFeatures:
    xyz: np.ndarray          # (N, 3) raw points
    p0: Tensor               # (N, C) point features
    seg: Tensor              # (N,) foreground probability
    bev: BevMap


@dataclass
class PointCrop:
    rows: np.ndarray         # point index of each cropped entry
    roi: np.ndarray          # proposal index of each cropped entry
    local: np.ndarray        # canonical coordinates
    counts: np.ndarray       # cropped points per proposal


def crop_points(boxes, xyz, margin: float) -> PointCrop:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    rows, rois, local = [], [], []
    counts = np.zeros(len(boxes), dtype=np.int64)
    for r, b in enumerate(boxes):
        eb = b.copy()
        eb[3:6] += 2 * margin
        reach = np.hypot(np.hypot(eb[3], eb[4]), eb[5]) / 2
        near = np.flatnonzero(np.sum((xyz - b[:3]) ** 2, axis=1) <= reach * reach)
        loc = geom3d.canonicalize(b, xyz[near])
        ok = np.all(np.abs(loc) <= eb[3:6] / 2, axis=1)
        rows.append(near[ok])
        rois.append(np.full(int(ok.sum()), r, dtype=np.int64))
        local.append(loc[ok])
        counts[r] = ok.sum()
    if not rows:
        return PointCrop(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), counts)
    return PointCrop(np.concatenate(rows), np.concatenate(rois), np.concatenate(local), counts)


def ball_groups(crop: PointCrop, grids: np.ndarray, radius: float, nsample: int):
    """Up to ``nsample`` nearest cropped points within ``radius`` of each grid point.

    Returns (member entry index into the crop, segment id = roi * N_G + n).
    """
    R, NG, _ = grids.shape
    members, segs = [], []
    starts = np.r_[0, np.cumsum(crop.counts)]
    for r in range(R):
        lo, hi = starts[r], starts[r + 1]
        if hi == lo:
            continue
        d2 = ((grids[r][:, None, :] - crop.local[None, lo:hi, :]) ** 2).sum(-1)
        k = min(nsample, hi - lo)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        dk = np.take_along_axis(d2, order, axis=1)
        ok = dk < radius * radius
        n_idx = np.broadcast_to(np.arange(NG)[:, None], ok.shape)
        members.append(lo + order[ok])
        segs.append(r * NG + n_idx[ok])
    if not members:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(members), np.concatenate(segs)


def bev_coords(world_xy, spec) -> np.ndarray:
    """Continuous map coordinates of metric points: ``(g - min) / (d * s_bev)``."""
    step = np.asarray(spec.voxel_size[:2]) * spec.stride
    return (np.asarray(world_xy)[..., :2] - spec.bounds.mins[:2]) / step


def bilinear_taps(coords, H: int, W: int):
    """Four neighbor cells and weights per point; coordinates clamp to the map border."""
    gx = np.clip(coords[:, 0], 0, H - 1)
    gy = np.clip(coords[:, 1], 0, W - 1)
    x0 = np.minimum(np.floor(gx).astype(np.int64), max(H - 2, 0))
    y0 = np.minimum(np.floor(gy).astype(np.int64), max(W - 2, 0))
    x1 = np.minimum(x0 + 1, H - 1)
    y1 = np.minimum(y0 + 1, W - 1)
    fx, fy = gx - x0, gy - y0
    idx = np.stack([x0 * W + y0, x0 * W + y1, x1 * W + y0, x1 * W + y1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), (1 - fx) * fy, fx * (1 - fy), fx * fy], axis=1)
    return idx, w


# ---------------------------------------------------------------------------
# the refinement head

@dataclass
class Refinement:
    boxes: np.ndarray        # pooled boxes
    cls_logit: Tensor
    reg: Tensor              # (R, 8) residual w.r.t. the pooled box
    iou: Tensor              # (R,) in [0, 1]
    pass_tag: str
    low_evidence: np.ndarray

    @property
    def cls_prob(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.cls_logit.data))


class RoiHead(Module):
    def __init__(self, roi_cfg, point_width: int, bev_width: int, rng, angle_period=2 * np.pi):
        c = roi_cfg
        self.cfg = c
        self.angle_period = angle_period
        self.margin = max(c.radii) if c.margin is None else c.margin
        self.grid_unit = unit_grid(c.grid_size)
        ng = len(self.grid_unit)
        per_scale = c.point_channels // len(c.radii)
        if per_scale * len(c.radii) != c.point_channels:
            raise ValueError("point_channels must split evenly across the grouping radii")
        if bev_width != c.map_channels:
            raise ValueError(f"BEV width {bev_width} must equal map_channels {c.map_channels}")
        self.mlp1 = mlp([5, *c.mlp1], rng)
        self.mlp2 = mlp([c.mlp1[-1] + point_width, *c.mlp2], rng)
        self.mlp3 = [mlp([3 + c.mlp2[-1], *c.mlp3, per_scale], rng) for _ in c.radii]
        self.corner_lift = Linear(3, c.corner_lift, rng)
        self.corner_agg = Linear(8 * c.corner_lift, c.corner_channels, rng)
        self.shared = mlp([ng * (c.point_channels + c.map_channels), *c.shared_fc], rng)
        self.fuse = mlp([c.shared_fc[-1] + c.corner_channels, *c.corner_fc], rng)
        q = c.corner_fc[-1]
        self.cls_branch = mlp([q, *c.branch_fc, 1], rng, activate_last=False)
        self.reg_branch = mlp([q, *c.branch_fc, 8], rng, activate_last=False)
        self.iou_branch = mlp([q, *c.branch_fc, 1], rng, activate_last=False)

    @property
    def num_grid(self) -> int:
        return len(self.grid_unit)

    def grids(self, boxes) -> np.ndarray:
        return self.grid_unit[None, :, :] * boxes[:, None, 3:6]

    # -- streams ------------------------------------------------------------
    def point_stream(self, boxes, scene: SceneFeatures, crop: PointCrop | None = None) -> Tensor:
        """RoI-aligned point features, shape (R * N_G, C_h)."""
        c = self.cfg
        R, NG = len(boxes), self.num_grid
        crop = crop or crop_points(boxes, scene.xyz, self.margin)
        if len(crop.rows) == 0:
            return Tensor(np.zeros((R * NG, c.point_channels)))
        depth = np.linalg.norm(scene.xyz[crop.rows], axis=1, keepdims=True) / c.geom_scale
        seg = gather_rows(scene.seg.reshape(-1, 1), crop.rows)
        local = concat([Tensor(crop.local), Tensor(depth), seg], axis=1)
        p_local = self.mlp1(local)
        p_feat = self.mlp2(concat([p_local, gather_rows(scene.p0, crop.rows)], axis=1))
        grids = self.grids(boxes)
        outs = []
        for radius, net in zip(c.radii, self.mlp3):
            members, segs = ball_groups(crop, grids, radius, c.nsample)
            rel = crop.local[members] - grids.reshape(-1, 3)[segs]
            rows = concat([Tensor(rel), gather_rows(p_feat, members)], axis=1)
            outs.append(segment_max(net(rows), segs, R * NG))
        return concat(outs, axis=1)

    def map_stream(self, boxes, bev: BevMap) -> Tensor:
        """Bilinearly sampled BEV features at the world grid points, shape (R * N_G, C_m)."""
        H, W, C = bev.shape
        world = np.concatenate([geom3d.decanonicalize(b, g) for b, g in zip(boxes, self.grids(boxes))])
        idx, w = bilinear_taps(bev_coords(world, bev.spec), H, W)
        return weighted_gather(bev.features.reshape(H * W, C), idx, w)

    def corner_stream(self, boxes) -> Tensor:
        R = len(boxes)
        pts = geom3d.corners(boxes).reshape(R * 8, 3) / self.cfg.geom_scale
        lifted = relu(self.corner_lift(Tensor(pts)))
        return self.corner_agg(lifted.reshape(R, 8 * self.cfg.corner_lift))

    # -- fusion -------------------------------------------------------------
    def predict(self, H: Tensor, M: Tensor, B: Tensor, R: int):
        c = self.cfg
        hm = concat([H, M], axis=1).reshape(R, self.num_grid * (c.point_channels + c.map_channels))
        q = self.fuse(concat([self.shared(hm), B], axis=1))
        cls = self.cls_branch(q).reshape(R)
        reg = self.reg_branch(q)
        iou = sigmoid(self.iou_branch(q).reshape(R))
        return cls, reg, iou

    def __call__(self, scene: SceneFeatures, boxes, pass_tag: str = "first") -> Refinement:
        c = self.cfg
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
        R, NG = len(boxes), self.num_grid
        crop = crop_points(boxes, scene.xyz, self.margin)
        H = self.point_stream(boxes, scene, crop) if c.use_point else Tensor(np.zeros((R * NG, c.point_channels)))
        M = self.map_stream(boxes, scene.bev) if c.use_map else Tensor(np.zeros((R * NG, c.map_channels)))
        B = self.corner_stream(boxes) if c.use_cge else Tensor(np.zeros((R, c.corner_channels)))
        cls, reg, iou = self.predict(H, M, B, R)
        return Refinement(boxes, cls, reg, iou, pass_tag, crop.counts == 0)

    def refine_boxes(self, ref: Refinement) -> np.ndarray:
        deltas = ref.reg.data * np.asarray(self.cfg.reg_target_std)
        return decode_box(deltas, ref.boxes, self.angle_period, box_frame=True)


def point_roi_align(boxes, scene: SceneFeatures, head: RoiHead) -> Tensor:
    return head.point_stream(np.asarray(boxes, dtype=np.float64).reshape(-1, 7), scene)


def map_roi_align(boxes, bev: BevMap, head: RoiHead) -> Tensor:
    return head.map_stream(np.asarray(boxes, dtype=np.float64).reshape(-1, 7), bev)


def corner_embed(boxes, head: RoiHead) -> Tensor:
    return head.corner_stream(np.asarray(boxes, dtype=np.float64).reshape(-1, 7))


def fuse_and_predict(H, M, B, head: RoiHead, boxes, pass_tag="first") -> Refinement:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    cls, reg, iou = head.predict(H, M, B, len(boxes))
    return Refinement(boxes, cls, reg, iou, pass_tag, np.zeros(len(boxes), dtype=bool))


def align_iou(head: RoiHead, scene: SceneFeatures, refined_boxes) -> Refinement:
    """Second pass: pool again on the refined boxes; only the IoU output is meant to be used."""
    with no_grad():
        return head(scene, refined_boxes, pass_tag="aligned")


# ---------------------------------------------------------------------------
# training targets and losses

@dataclass
class RefineTargets:
    iou: np.ndarray          # best 3D IoU with a same-class gt
    cls_label: np.ndarray    # 1 / 0 / -1 (ignored)
    reg_mask: np.ndarray     # IoU >= reg threshold
    reg_target: np.ndarray   # (R, 8)
    gt_index: np.ndarray


def refine_targets(proposals, proposal_classes, gt_boxes, gt_classes, cls_fg=0.75, cls_bg=0.25,
                   reg_thresh=0.55, period=2 * np.pi, target_std=None) -> RefineTargets:
    """Labels and masked residual targets; residuals are divided by ``target_std`` when given."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 7)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    R = len(proposals)
    iou = np.zeros(R)
    gt_index = np.full(R, -1, dtype=np.int64)
    if len(gt_boxes) and R:
        mat = geom3d.iou_3d_matrix(proposals, gt_boxes)
        same = np.asarray(proposal_classes)[:, None] == np.asarray(gt_classes)[None, :]
        mat = np.where(same, mat, 0.0)
        gt_index = mat.argmax(axis=1)
        iou = mat.max(axis=1)
        gt_index[iou <= 0] = -1
    cls_label = np.where(iou >= cls_fg, 1, np.where(iou <= cls_bg, 0, -1))
    reg_mask = iou >= reg_thresh
    reg_target = np.zeros((R, 8))
    sel = np.flatnonzero(reg_mask)
    if len(sel):
        reg_target[sel] = encode_box(gt_boxes[gt_index[sel]], proposals[sel], period, box_frame=True)
        if target_std is not None:
            reg_target[sel] /= np.asarray(target_std)
    return RefineTargets(iou, cls_label, reg_mask, reg_target, gt_index)


def refine_losses(ref: Refinement, t: RefineTargets):
    """(L_cls, L_reg, L_iou) with regression and IoU terms averaged over the N_reg masked proposals."""
    valid = np.flatnonzero(t.cls_label >= 0)
    if len(valid):
        l_cls = bce_loss(sigmoid(ref.cls_logit[valid]), t.cls_label[valid])
    else:
        l_cls = Tensor(0.0)
    sel = np.flatnonzero(t.reg_mask)
    if len(sel) == 0:
        return l_cls, Tensor(0.0), Tensor(0.0)
    n_reg = float(len(sel))
    l_reg = smooth_l1(ref.reg[sel], t.reg_target[sel]).sum() / n_reg
    l_iou = smooth_l1(ref.iou[sel], t.iou[sel]).sum() / n_reg
    return l_cls, l_reg, l_iou


# ---------------------------------------------------------------------------
# final NMS

def confidence(mode: str, cls_prob, iou_unaligned, iou_aligned) -> np.ndarray:
    if mode == "cls":
        return np.asarray(cls_prob)
    if mode == "unaligned-iou":
        return np.asarray(iou_unaligned)
    if mode == "aligned-iou":
        return np.asarray(iou_aligned)
    if mode == "aligned-iou-x-cls":
        return np.asarray(iou_aligned) * np.asarray(cls_prob)
    raise ValueError(f"unknown confidence mode {mode!r}; expected one of {CONFIDENCE_MODES}")


def final_nms(boxes, class_ids, cls_prob, iou_unaligned, iou_aligned, mode: str, thresh: float = 0.1):
    """Per-class greedy BEV NMS ranked by the chosen confidence.

    Returns (kept indices, confidence of every kept box), sorted by confidence.
    """
    conf = confidence(mode, cls_prob, iou_unaligned, iou_aligned)
    class_ids = np.asarray(class_ids)
    keep = []
    for c in np.unique(class_ids):
        sel = np.flatnonzero(class_ids == c)
        keep.extend(sel[nms_bev(np.asarray(boxes)[sel], conf[sel], thresh)])
    keep = np.array(keep, dtype=np.int64)
    if len(keep):
        keep = keep[np.lexsort((keep, -conf[keep]))]
    return keep, conf[keep]
