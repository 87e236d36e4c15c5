"""Residual voxel-to-point decoder with a point-wise segmentation head."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import geom3d
from .autodiff import Linear, Module, Tensor, relu, sigmoid, weighted_gather
from .autodiff.nn import mlp
from .scene_io import GroundTruth, PointCloud
from .voxelizer import SparseVoxelTensor, devoxelize

log = logging.getLogger(__name__)

COINCIDENCE_EPS = 1e-9


def knn_search(queries, sources, k: int, method: str = "exhaustive"):
    """Indices and distances of the ``k`` nearest sources per query, nearest first.

    ``exhaustive`` is the reference; ``kdtree`` must agree with it whenever
    distances are distinct.  With fewer than ``k`` sources all are used.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    sources = np.asarray(sources, dtype=np.float64).reshape(-1, 3)
    if len(sources) == 0:
        raise ValueError("knn needs at least one source point")
    k = min(k, len(sources))
    if method == "kdtree":
        dist, idx = cKDTree(sources).query(queries, k=k)
        return idx.reshape(len(queries), k).astype(np.int64), dist.reshape(len(queries), k)
    if method != "exhaustive":
        raise ValueError(f"unknown knn method {method!r}")
    idx_out = np.empty((len(queries), k), dtype=np.int64)
    dist_out = np.empty((len(queries), k))
    chunk = max(1, 2_000_000 // max(len(sources), 1))
    for lo in range(0, len(queries), chunk):
        q = queries[lo:lo + chunk]
        d2 = ((q[:, None, :] - sources[None, :, :]) ** 2).sum(-1)
        if k < len(sources):
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        else:
            part = np.broadcast_to(np.arange(len(sources)), (len(q), len(sources)))
        pd = np.take_along_axis(d2, part, axis=1)
        order = np.lexsort((part, pd))
        idx_out[lo:lo + chunk] = np.take_along_axis(part, order, axis=1)
        dist_out[lo:lo + chunk] = np.sqrt(np.take_along_axis(pd, order, axis=1))
    return idx_out, dist_out


def idw_weights(dist: np.ndarray) -> np.ndarray:
    """Normalized inverse-distance weights; a coincident nearest source takes all the weight."""
    w = np.zeros_like(dist)
    hit = dist[:, 0] < COINCIDENCE_EPS
    w[hit, 0] = 1.0
    inv = 1.0 / dist[~hit]
    w[~hit] = inv / inv.sum(axis=1, keepdims=True)
    return w


def knn_interpolate(queries, sources, feats, k: int = 3, method: str = "exhaustive") -> Tensor:
    feats = feats if isinstance(feats, Tensor) else Tensor(feats)
    idx, dist = knn_search(queries, sources, k, method)
    return weighted_gather(feats, idx, idw_weights(dist))


class DecodeBlock(Module):
    """``ReLU(identity(P_prev) + residual(interp(V_l)))`` at the level's target width."""

    def __init__(self, c_prev: int, c_voxel: int, c_out: int, rng, layers: int = 1):
        widths_id = [c_prev] + [c_out] * layers
        widths_res = [c_voxel] + [c_out] * layers
        self.identity = mlp(widths_id, rng, activate_last=False)
        self.residual = mlp(widths_res, rng, activate_last=False)

    def __call__(self, p_prev: Tensor, xyz: np.ndarray, v: SparseVoxelTensor, k=3,
                 method="exhaustive") -> Tensor:
        ident = self.identity(p_prev)
        if len(v) == 0:
            log.warning("empty voxel level in decoder; residual path is zero")
            return relu(ident)
        centers = devoxelize(v.indices, v.spec)
        res = self.residual(knn_interpolate(xyz, centers, v.features, k, method))
        return relu(ident + res)


def decode_block(p_prev, xyz, v, block: DecodeBlock, k=3) -> Tensor:
    return block(p_prev, xyz, v, k)


@dataclass
class DecoderOutput:
    p0: Tensor
    seg: Tensor
    # P4, P3, P2, P1 in that order
    levels: list = field(default_factory=list)


class VoxelToPointDecoder(Module):
    def __init__(self, voxel_widths, point_widths, rng, k=3, block_layers=1, seg_hidden=64,
                 knn_method="exhaustive"):
        voxel_widths = tuple(voxel_widths)
        point_widths = tuple(point_widths)
        if len(point_widths) != len(voxel_widths) + 1:
            raise ValueError("need one point width per voxel level plus one for P0")
        self.k, self.knn_method = k, knn_method
        self.blocks = []
        prev = voxel_widths[-1]
        # blocks run from the coarsest level to the finest
        for vw, pw in zip(reversed(voxel_widths), point_widths[:-1]):
            self.blocks.append(DecodeBlock(prev, vw, pw, rng, block_layers))
            prev = pw
        self.embed = Linear(prev, point_widths[-1], rng)
        self.seg_head = mlp([point_widths[-1], seg_hidden, 1], rng, activate_last=False)

    def __call__(self, levels, raw: PointCloud) -> DecoderOutput:
        xyz = raw.xyz
        top = levels[-1]
        if len(top) == 0:
            log.warning("empty top voxel level; initial point features are zero")
            p = Tensor(np.zeros((len(xyz), top.width if top.features.ndim == 2 else 0)))
        else:
            p = knn_interpolate(xyz, devoxelize(top.indices, top.spec), top.features, self.k, self.knn_method)
        outs = []
        for block, v in zip(self.blocks, reversed(levels)):
            p = block(p, xyz, v, self.k, self.knn_method)
            outs.append(p)
        p0 = relu(self.embed(p))
        seg = sigmoid(self.seg_head(p0).reshape(len(xyz)))
        return DecoderOutput(p0, seg, outs)


def decode_all(levels, raw: PointCloud, decoder: VoxelToPointDecoder) -> tuple[Tensor, Tensor]:
    out = decoder(levels, raw)
    return out.p0, out.seg


def seg_labels(raw: PointCloud, gt: GroundTruth) -> np.ndarray:
    """1 for points inside any ground-truth box (closed faces), else 0."""
    labels = np.zeros(len(raw), dtype=np.int64)
    for box in gt.boxes:
        labels |= geom3d.points_in_box(box, raw.xyz).astype(np.int64)
    return labels
