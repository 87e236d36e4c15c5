"""The full two-stage detector: encoder, RPN, voxel-to-point decoder and RoI refinement."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Module, no_grad
from .autodiff import checkpoint as ckpt
from .backbone import BevMap, BevProjection, SparseEncoder
from .config import Config, loads
from .decoder import DecoderOutput, VoxelToPointDecoder
from .roi import RoiHead, SceneFeatures, final_nms
from .rpn import AnchorGrid, ProposalSet, RpnHead, make_anchors, propose
from .scene_io import PointCloud, SceneBounds, crop_to_bounds
from .voxelizer import SparseVoxelTensor, VoxelGridSpec, voxelize


@dataclass
class SceneOutput:
    points: PointCloud
    voxels: SparseVoxelTensor
    levels: list
    bev: BevMap
    rpn_logits: object
    rpn_regs: object
    decoded: DecoderOutput

    @property
    def scene(self) -> SceneFeatures:
        return SceneFeatures(self.points.xyz, self.decoded.p0, self.decoded.seg, self.bev)


@dataclass
class Detections:
    """Final detections of one frame plus the intermediate boxes used for diagnostics."""
    boxes: np.ndarray
    class_ids: np.ndarray
    scores: np.ndarray
    mode: str
    proposals: ProposalSet | None = None
    refined: np.ndarray | None = None
    cls_prob: np.ndarray | None = None
    iou_unaligned: np.ndarray | None = None
    iou_aligned: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.boxes)


class Detector(Module):
    def __init__(self, cfg: Config, rng: np.random.Generator | None = None, refine: bool | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.train.seed)
        self.cfg = cfg
        self.with_refine = cfg.train.refine if refine is None else refine
        bounds = SceneBounds.from_range(cfg.voxel.point_cloud_range)
        self.grid = VoxelGridSpec(tuple(cfg.voxel.voxel_size), bounds)
        widths = tuple(cfg.backbone.widths)
        self.bev_spec = self.grid.at_stride(2 ** (len(widths) - 1))
        H, W, nz = self.bev_spec.grid_shape
        self.encoder = SparseEncoder(widths, rng)
        self.bev_proj = BevProjection(widths[-1], nz, cfg.backbone.bev_channels, rng)
        self.anchors: AnchorGrid = make_anchors(self.bev_spec, (H, W), list(cfg.classes), cfg.rpn.anchor_sizes,
                                                cfg.rpn.anchor_z, cfg.rpn.anchor_rotations)
        self.rpn = RpnHead(cfg.backbone.bev_channels, cfg.rpn.head_channels, self.anchors.per_cell, rng)
        d = cfg.decoder
        self.decoder = VoxelToPointDecoder(widths, d.widths, rng, d.knn_k, d.block_layers, d.seg_hidden,
                                           d.knn_method)
        self.roi = (RoiHead(cfg.roi, d.widths[-1], cfg.backbone.bev_channels, rng, cfg.rpn.angle_period)
                    if self.with_refine else None)

    # -- forward ------------------------------------------------------------
    def forward_scene(self, pc: PointCloud) -> SceneOutput:
        pc = crop_to_bounds(pc, self.grid.bounds)
        vox = voxelize(pc, self.grid)
        levels = self.encoder(vox)
        bev = self.bev_proj(levels[-1])
        logits, regs = self.rpn(bev)
        dec = self.decoder(levels, pc)
        return SceneOutput(pc, vox, levels, bev, logits, regs, dec)

    def proposals(self, out: SceneOutput) -> ProposalSet:
        r = self.cfg.rpn
        return propose(out.rpn_logits, out.rpn_regs, self.anchors, r.nms_iou, r.post_nms_top, r.angle_period)

    def detect(self, pc: PointCloud, mode: str = "aligned-iou-x-cls", refine: bool | None = None) -> Detections:
        """Inference on one frame.

        Without refinement the RPN proposals (ranked by objectness) are the
        detections.  With refinement the proposals are refined once, then
        pooled again on the refined boxes to get IoU estimates that belong to
        them; ``mode`` picks the NMS ranking.
        """
        refine = self.with_refine if refine is None else refine
        thresh = self.cfg.roi.final_nms_iou
        with no_grad():
            out = self.forward_scene(pc)
            props = self.proposals(out)
            if not refine or self.roi is None or len(props) == 0:
                ones = np.ones(len(props))
                keep, conf = final_nms(props.boxes, props.class_ids, props.scores, ones, ones, "cls", thresh)
                return Detections(props.boxes[keep], props.class_ids[keep], conf, "rpn", props,
                                  props.boxes.copy(), props.scores.copy(), None, None,
                                  {"seg": out.decoded.seg.data, "points": out.points})
            scene = out.scene
            first = self.roi(scene, props.boxes, "first")
            refined = self.roi.refine_boxes(first)
            second = self.roi(scene, refined, "aligned")
            cls_prob = first.cls_prob
            iou_un = first.iou.data.copy()
            iou_al = second.iou.data.copy()
            keep, conf = final_nms(refined, props.class_ids, cls_prob, iou_un, iou_al, mode, thresh)
            return Detections(refined[keep], props.class_ids[keep], conf, mode, props, refined, cls_prob,
                              iou_un, iou_al, {"seg": out.decoded.seg.data, "points": out.points,
                                               "pass_tags": (first.pass_tag, second.pass_tag)})

    # -- persistence --------------------------------------------------------
    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} vs model {p.data.shape}")
            p.data[...] = arrays[name]

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"config": self.cfg.to_toml(), "refine": self.with_refine}
        meta.update(extra_meta or {})
        ckpt.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "Detector":
        arrays, meta = ckpt.load(path)
        model = cls(loads(meta["config"]), refine=meta.get("refine", True))
        model.load_state_dict(arrays)
        return model
