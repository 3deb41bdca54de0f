"""Submanifold sparse 3D convolution with prefix-scan rulebook construction.

Semantics: output active set equals input active set (no sparsity dilation),
stride 1, zero padding, odd kernel sizes only.  Execution is rulebook-driven
gather-multiply-scatter: for every kernel tap the rulebook lists the
(input_row, output_row) pairs whose coordinates differ by that tap's
displacement.  Per output row the accumulation always runs in ascending tap
order, so results are bit-identical for any worker partitioning.

A dense zero-padded cross-correlation (:func:`dense_conv_oracle`) serves as
the independent reference path, and :func:`fma_op_count` exposes the
sparse-vs-dense multiply-add counts.

Kernel weight files are flat binaries: six little-endian int32 header words
``(magic, kx, ky, kz, c_in, c_out)`` followed by float32 weights in
tap-major order (tap, then input channel, then output channel).
"""

from __future__ import annotations

import dataclasses
import struct
from typing import NamedTuple, Optional

import numpy as np

from . import kernels
from .errors import ShapeError, UnsupportedKernelError
from .voxels import SparseVoxelTensor, linearize_many

KERNEL_FILE_MAGIC = 0x4C4E524B  # b"KRNL" read as little-endian uint32


def tap_displacements(size: tuple[int, int, int]) -> np.ndarray:
    """Centered tap displacements in ascending lexicographic order, (K3, 3)."""
    kx, ky, kz = size
    rx, ry, rz = kx // 2, ky // 2, kz // 2
    grid = np.mgrid[-rx:kx - rx, -ry:ky - ry, -rz:kz - rz]
    return grid.reshape(3, -1).T.astype(np.int64)


@dataclasses.dataclass(frozen=True)
class KernelSpec:
    """Convolution kernel: odd size triple, channel counts, tap-major weights."""

    size: tuple[int, int, int]
    in_channels: int
    out_channels: int
    weights: np.ndarray  # (kx*ky*kz, c_in, c_out)
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        size = tuple(int(v) for v in self.size)
        if len(size) != 3 or any(s < 1 for s in size):
            raise UnsupportedKernelError(f"kernel size must be a positive triple, got {size}")
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64))
        taps = size[0] * size[1] * size[2]
        expect = (taps, int(self.in_channels), int(self.out_channels))
        if w.shape != expect:
            raise ShapeError(f"weights shape {w.shape} inconsistent with {expect}")
        bias = self.bias
        if bias is not None:
            bias = np.asarray(bias, dtype=np.float64).ravel()
            if bias.shape[0] != int(self.out_channels):
                raise ShapeError(f"bias length {bias.shape[0]} != out_channels {self.out_channels}")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "in_channels", int(self.in_channels))
        object.__setattr__(self, "out_channels", int(self.out_channels))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", bias)

    @property
    def num_taps(self) -> int:
        kx, ky, kz = self.size
        return kx * ky * kz

    @property
    def is_odd(self) -> bool:
        return all(s % 2 == 1 for s in self.size)

    @classmethod
    def identity(cls, channels: int) -> "KernelSpec":
        """1x1x1 kernel with an identity weight matrix."""
        w = np.eye(channels, dtype=np.float64)[None, :, :]
        return cls((1, 1, 1), channels, channels, w)


@dataclasses.dataclass(frozen=True)
class Rulebook:
    """Per-tap (input_row, output_row) pair lists, each ordered by output row."""

    kernel_size: tuple[int, int, int]
    pair_in: np.ndarray   # (P,) int64
    pair_out: np.ndarray  # (P,) int64
    counts: np.ndarray    # (K3,) int64 pairs per tap
    num_rows: int         # active voxels (inputs == outputs, submanifold)

    def __post_init__(self):
        if self.pair_in.shape != self.pair_out.shape:
            raise ShapeError("pair_in / pair_out length mismatch")
        if int(self.counts.sum()) != self.pair_in.shape[0]:
            raise ShapeError("tap counts do not sum to pair count")
        if self.pair_in.shape[0]:
            lo = min(int(self.pair_in.min()), int(self.pair_out.min()))
            hi = max(int(self.pair_in.max()), int(self.pair_out.max()))
            if lo < 0 or hi >= self.num_rows:
                raise ShapeError("rulebook references a row out of range")

    @property
    def num_pairs(self) -> int:
        return int(self.pair_in.shape[0])

    def pairs_for_tap(self, tap: int) -> tuple[np.ndarray, np.ndarray]:
        starts = np.concatenate(([0], np.cumsum(self.counts)))
        s, e = int(starts[tap]), int(starts[tap + 1])
        return self.pair_in[s:e], self.pair_out[s:e]


def exclusive_prefix_sum(flags, workers: int = 1) -> tuple[np.ndarray, int]:
    """Exclusive scan: ``offsets[i] = sum(flags[:i])``; returns (offsets, total).

    ``workers`` sets the internal chunk partitioning; the result equals the
    sequential scan for every value.
    """
    flags = np.asarray(flags, dtype=np.int64)
    if flags.ndim != 1:
        raise ShapeError(f"flags must be 1-D, got shape {flags.shape}")
    offsets, total = kernels.exclusive_scan(flags, max(1, int(workers)))
    return offsets, int(total)


def build_rulebook(tensor: SparseVoxelTensor, kernel: KernelSpec,
                   workers: int = 1) -> Rulebook:
    """Enumerate (input_row, output_row) pairs for every kernel tap.

    Submanifold semantics: outputs sit exactly at the input sites.  A pair
    ``(j, i)`` exists for tap displacement ``d`` iff ``coords[i] + d`` is an
    active coordinate inside the grid extents.
    """
    if not kernel.is_odd:
        raise UnsupportedKernelError(f"kernel size must be odd per axis, got {kernel.size}")
    taps = tap_displacements(kernel.size)
    n = tensor.num_voxels
    if n == 0:
        return Rulebook(kernel.size, np.empty(0, np.int64), np.empty(0, np.int64),
                        np.zeros(taps.shape[0], np.int64), 0)
    keys = linearize_many(tensor.coords, tensor.grid)
    extents = np.asarray(tensor.grid.extents, dtype=np.int64)
    pair_in, pair_out, counts = kernels.rulebook_pairs(
        tensor.coords, keys, extents, taps, max(1, int(workers)))
    return Rulebook(kernel.size, pair_in, pair_out, counts, n)


def sparse_conv(tensor: SparseVoxelTensor, kernel: KernelSpec,
                rulebook: Optional[Rulebook] = None, workers: int = 1) -> SparseVoxelTensor:
    """Submanifold sparse convolution; output coords identical to input coords.

    ``out[i] = sum over rulebook pairs of feats[j] @ weights[tap] (+ bias)``,
    accumulated in ascending tap order per output row.
    """
    if tensor.num_channels != kernel.in_channels:
        raise ShapeError(
            f"tensor has {tensor.num_channels} channels, kernel expects {kernel.in_channels}")
    if rulebook is None:
        rulebook = build_rulebook(tensor, kernel, workers=workers)
    elif rulebook.kernel_size != kernel.size or rulebook.num_rows != tensor.num_voxels:
        raise ShapeError("rulebook does not match tensor/kernel")
    out = kernels.scatter_fma(tensor.feats, kernel.weights, rulebook.pair_in,
                              rulebook.pair_out, rulebook.counts, tensor.num_voxels)
    if kernel.bias is not None:
        out = out + kernel.bias
    return SparseVoxelTensor(tensor.grid, tensor.coords, out)


def dense_conv_oracle(dense: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """Textbook zero-padded dense 3D cross-correlation, stride 1.

    Independent reference path for :func:`sparse_conv`: operates on a full
    ``(X, Y, Z, C_in)`` array and never touches the rulebook machinery.
    """
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != 4 or dense.shape[3] != kernel.in_channels:
        raise ShapeError(f"dense input shape {dense.shape} does not match kernel")
    kx, ky, kz = kernel.size
    rx, ry, rz = kx // 2, ky // 2, kz // 2
    x, y, z, _ = dense.shape
    padded = np.pad(dense, ((rx, rx), (ry, ry), (rz, rz), (0, 0)))
    out = np.zeros((x, y, z, kernel.out_channels), np.float64)
    tap = 0
    for dx in range(kx):
        for dy in range(ky):
            for dz in range(kz):
                patch = padded[dx:dx + x, dy:dy + y, dz:dz + z, :]
                out += patch @ kernel.weights[tap]
                tap += 1
    if kernel.bias is not None:
        out = out + kernel.bias
    return out


def densify(tensor: SparseVoxelTensor) -> np.ndarray:
    """Scatter a sparse tensor into the full (X, Y, Z, C) array."""
    ex, ey, ez = tensor.grid.extents
    dense = np.zeros((ex, ey, ez, tensor.num_channels), np.float64)
    c = tensor.coords
    dense[c[:, 0], c[:, 1], c[:, 2]] = tensor.feats
    return dense


class OpCount(NamedTuple):
    sparse_fmas: int
    dense_fmas: int


def fma_op_count(tensor: SparseVoxelTensor, kernel: KernelSpec,
                 rulebook: Optional[Rulebook] = None) -> OpCount:
    """Fused multiply-add counts for the sparse path vs. the dense equivalent.

    ``sparse = pairs * c_in * c_out`` (bounded by ``N * K^3 * c_in * c_out``),
    ``dense = X*Y*Z * K^3 * c_in * c_out`` exactly.
    """
    if rulebook is None:
        rulebook = build_rulebook(tensor, kernel)
    per_pair = kernel.in_channels * kernel.out_channels
    sparse = rulebook.num_pairs * per_pair
    dense = tensor.grid.num_cells * kernel.num_taps * per_pair
    return OpCount(sparse, dense)


def save_kernel_weights(path, kernel: KernelSpec) -> None:
    """Write the flat binary weight format (header + tap-major float32)."""
    kx, ky, kz = kernel.size
    header = struct.pack("<6i", KERNEL_FILE_MAGIC, kx, ky, kz,
                         kernel.in_channels, kernel.out_channels)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(kernel.weights.astype("<f4").tobytes())


def load_kernel_weights(path) -> KernelSpec:
    """Read the flat binary weight format; bias is never stored in the file."""
    with open(path, "rb") as fh:
        header = fh.read(24)
        if len(header) != 24:
            raise ValueError(f"{path}: truncated kernel header")
        magic, kx, ky, kz, cin, cout = struct.unpack("<6i", header)
        if magic != KERNEL_FILE_MAGIC:
            raise ValueError(f"{path}: bad magic 0x{magic:08X}")
        count = kx * ky * kz * cin * cout
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.shape[0] != count:
        raise ValueError(f"{path}: expected {count} weights, found {data.shape[0]}")
    weights = data.astype(np.float64).reshape(kx * ky * kz, cin, cout)
    return KernelSpec((kx, ky, kz), cin, cout, weights)
