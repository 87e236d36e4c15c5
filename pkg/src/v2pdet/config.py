"""Run configuration.

Every tunable constant of the detector lives here, grouped by subsystem.
Defaults are the KITTI values used by the original detector; the bundled
``desk.toml`` shrinks the scene and the refinement stage so that a full
train/eval cycle fits on one CPU core.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import tomli
import tomli_w


@dataclass
class VoxelConfig:
    # x_min, y_min, z_min, x_max, y_max, z_max in meters
    point_cloud_range: tuple = (0.0, -40.0, -3.0, 70.4, 40.0, 1.0)
    voxel_size: tuple = (0.05, 0.05, 0.1)


@dataclass
class BackboneConfig:
    widths: tuple = (16, 32, 64, 128)
    bev_channels: int = 128


@dataclass
class RpnConfig:
    head_channels: int = 128
    # per class: l, w, h and the z of the box center
    anchor_sizes: dict = field(default_factory=lambda: {
        "Car": [3.9, 1.6, 1.56],
        "Pedestrian": [0.8, 0.6, 1.73],
        "Cyclist": [1.76, 0.6, 1.73],
    })
    anchor_z: dict = field(default_factory=lambda: {
        "Car": -1.0,
        "Pedestrian": -0.6 + 1.73 / 2,
        "Cyclist": -0.6 + 1.73 / 2,
    })
    anchor_rotations: tuple = (0.0, math.pi / 2)
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    nms_iou: float = 0.85
    post_nms_top: int = 100
    # 2*pi regresses (sin, cos) of the heading; pi treats opposite headings as one box
    angle_period: float = 2 * math.pi
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    reg_weight: float = 1.0


@dataclass
class DecoderConfig:
    # P4, P3, P2, P1, P0
    widths: tuple = (256, 192, 160, 128, 128)
    knn_k: int = 3
    block_layers: int = 1
    seg_hidden: int = 64
    knn_method: str = "kdtree"


@dataclass
class RoiConfig:
    grid_size: int = 6
    radii: tuple = (0.8, 1.6)
    nsample: int = 16
    # None means "largest grouping radius"
    margin: float | None = None
    mlp1: tuple = (32, 32)
    mlp2: tuple = (64,)
    mlp3: tuple = (64, 64)
    point_channels: int = 128
    map_channels: int = 128
    corner_channels: int = 128
    corner_lift: int = 32
    # metric inputs (sensor distance, world corners) are divided by this
    geom_scale: float = 10.0
    shared_fc: tuple = (256, 256)
    corner_fc: tuple = (256,)
    branch_fc: tuple = (256,)
    cls_fg: float = 0.75
    cls_bg: float = 0.25
    reg_thresh: float = 0.55
    # refinement residuals are regressed divided by these (per encoded component)
    reg_target_std: tuple = (0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.3, 1.0)
    num_sample: int = 128
    fg_fraction: float = 0.5
    gt_jitter_per_box: int = 16
    gt_jitter_center: float = 0.5
    gt_jitter_size: float = 0.15
    gt_jitter_yaw: float = 0.3
    final_nms_iou: float = 0.1
    use_point: bool = True
    use_map: bool = True
    use_cge: bool = True


@dataclass
class LossConfig:
    w_rpn: float = 1.0
    w_seg: float = 4.0
    w_refine: float = 1.0
    seg_alpha: float = 0.25
    seg_gamma: float = 2.0


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 10.0
    batch_size: int = 2
    steps: int = 200
    seed: int = 0
    refine: bool = True
    seg_supervision: bool = True
    aug_flip: bool = False
    aug_scale: tuple = (0.95, 1.05)
    aug_rotate: tuple = (-math.pi / 4, math.pi / 4)
    augment: bool = False


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: {
        "Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5,
    })
    num_recall: int = 40


@dataclass
class Config:
    classes: tuple = ("Car",)
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rpn: RpnConfig = field(default_factory=RpnConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def roi_margin(self) -> float:
        return max(self.roi.radii) if self.roi.margin is None else self.roi.margin

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _to_plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _update(dc: Any, values: dict, where: str) -> None:
    names = {f.name: f for f in dataclasses.fields(dc)}
    for key, value in values.items():
        if key not in names:
            raise KeyError(f"unknown config key {where}{key}")
        current = getattr(dc, key)
        if dataclasses.is_dataclass(current):
            _update(current, value, f"{where}{key}.")
        elif isinstance(current, tuple) or (current is None and isinstance(value, list)):
            setattr(dc, key, tuple(value))
        elif isinstance(current, float) and isinstance(value, int):
            setattr(dc, key, float(value))
        elif isinstance(current, dict):
            merged = dict(current)
            merged.update(value)
            setattr(dc, key, merged)
        else:
            setattr(dc, key, value)


def from_dict(values: dict) -> Config:
    cfg = Config()
    _update(cfg, values, "")
    return cfg


def loads(text: str) -> Config:
    return from_dict(tomli.loads(text))


def load(path: str | Path) -> Config:
    with open(path, "rb") as fh:
        return from_dict(tomli.load(fh))


def bundled(name: str) -> Config:
    """Load one of the configs shipped with the package (``default`` or ``desk``)."""
    text = resources.files("v2pdet.configs").joinpath(f"{name}.toml").read_text()
    return loads(text)
