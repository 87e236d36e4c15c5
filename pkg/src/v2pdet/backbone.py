"""Sparse 3D convolutional encoder and the bird's-eye-view projection."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Linear, Module, Tensor, gather_rows, matmul, relu, scatter_rows
from .autodiff.nn import kaiming_uniform
from .voxelizer import SparseVoxelTensor, VoxelGridSpec

log = logging.getLogger(__name__)

# kernel offsets in (dx, dy, dz) order; kernel slot k = 9*(dx+1) + 3*(dy+1) + (dz+1)
OFFSETS = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.int64)


def _keys(idx: np.ndarray, shape) -> np.ndarray:
    return (idx[..., 0] * shape[1] + idx[..., 1]) * shape[2] + idx[..., 2]


def neighbor_table(in_idx: np.ndarray, out_idx: np.ndarray, in_shape, stride: int) -> np.ndarray:
    """For each output voxel and kernel slot, the row of the input voxel it reads, or -1.

    Output voxel ``o`` reads input ``stride * o + offset``.
    """
    in_shape = np.asarray(in_shape)
    if len(in_idx) == 0 or len(out_idx) == 0:
        return np.full((len(out_idx), 27), -1, dtype=np.int64)
    keys = _keys(in_idx, in_shape)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    q = stride * out_idx[:, None, :] + OFFSETS[None, :, :]
    inside = np.all((q >= 0) & (q < in_shape), axis=-1)
    qk = _keys(np.where(inside[..., None], q, 0), in_shape)
    pos = np.clip(np.searchsorted(sorted_keys, qk), 0, len(keys) - 1)
    hit = inside & (sorted_keys[pos] == qk)
    return np.where(hit, order[pos], -1)


def downsample_indices(idx: np.ndarray) -> np.ndarray:
    """Occupied set after a stride-2 block: unique floor-halved indices, sorted."""
    if len(idx) == 0:
        return idx.reshape(0, 3)
    return np.unique(idx // 2, axis=0)


class SparseConv3d(Module):
    """3x3x3 sparse convolution followed by bias and ReLU.

    Stride 1 is submanifold (output sites = input sites); stride 2 keeps the
    floor-halved input sites.  Weight layout: ``(27 * c_in, c_out)`` with the
    kernel slot as the slow axis.
    """

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.weight = Tensor(kaiming_uniform(rng, 27 * c_in, (27 * c_in, c_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: SparseVoxelTensor) -> SparseVoxelTensor:
        feats = x.features if isinstance(x.features, Tensor) else Tensor(x.features)
        if self.stride == 1:
            out_idx, out_spec = x.indices, x.spec
        else:
            out_idx, out_spec = downsample_indices(x.indices), x.spec.at_stride(x.spec.stride * 2)
        if len(out_idx) == 0:
            return SparseVoxelTensor(out_idx, Tensor(np.zeros((0, self.c_out))), out_spec)
        table = neighbor_table(x.indices, out_idx, x.spec.grid_shape, self.stride)
        cols = gather_rows(feats, table.reshape(-1)).reshape(len(out_idx), 27 * self.c_in)
        out = relu(matmul(cols, self.weight) + self.bias)
        return SparseVoxelTensor(out_idx, out, out_spec)


def sparse_conv_block(x: SparseVoxelTensor, conv: SparseConv3d) -> SparseVoxelTensor:
    return conv(x)


class SparseEncoder(Module):
    """Four levels at strides 1, 2, 4, 8: one submanifold block per level,
    preceded by a stride-2 block on levels 2-4."""

    def __init__(self, widths, rng: np.random.Generator, c_in: int = 4):
        self.widths = tuple(widths)
        self.subm = []
        self.down = []
        prev = c_in
        for level, w in enumerate(self.widths):
            if level > 0:
                self.down.append(SparseConv3d(prev, w, 2, rng))
                prev = w
            self.subm.append(SparseConv3d(prev, w, 1, rng))
            prev = w

    def __call__(self, v0: SparseVoxelTensor) -> list[SparseVoxelTensor]:
        if len(v0) == 0:
            log.warning("empty voxel tensor entering the encoder")
        x = v0
        levels = []
        for level in range(len(self.widths)):
            if level > 0:
                x = self.down[level - 1](x)
            x = self.subm[level](x)
            levels.append(x)
        return levels


def encode(v0: SparseVoxelTensor, encoder: SparseEncoder) -> list[SparseVoxelTensor]:
    return encoder(v0)


@dataclass
class BevMap:
    """Dense map ``features`` of shape (H, W, C); row i covers x, column j covers y."""
    features: Tensor
    spec: VoxelGridSpec

    @property
    def shape(self):
        return self.features.shape


class BevProjection(Module):
    """Stack the Z planes of the stride-8 tensor into channels and mix them per column."""

    def __init__(self, c_in: int, nz: int, c_out: int, rng: np.random.Generator):
        self.c_in, self.nz, self.c_out = c_in, nz, c_out
        self.mix = Linear(nz * c_in, c_out, rng)

    def __call__(self, v: SparseVoxelTensor) -> BevMap:
        H, W, nz = v.spec.grid_shape
        if nz != self.nz:
            raise ValueError(f"expected {self.nz} z planes, grid has {nz}")
        if len(v) == 0:
            return BevMap(Tensor(np.zeros((H, W, self.c_out))), v.spec)
        col_key = v.indices[:, 0] * W + v.indices[:, 1]
        cols, col_of = np.unique(col_key, return_inverse=True)
        col_of = col_of.reshape(-1)
        stacked = scatter_rows(v.features, col_of * nz + v.indices[:, 2], len(cols) * nz)
        stacked = stacked.reshape(len(cols), nz * self.c_in)
        mixed = relu(self.mix(stacked))
        dense = scatter_rows(mixed, cols, H * W).reshape(H, W, self.c_out)
        return BevMap(dense, v.spec)


def to_bev(v4: SparseVoxelTensor, proj: BevProjection) -> BevMap:
    return proj(v4)
