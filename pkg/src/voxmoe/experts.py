"""The three scenario-optimized detection pipelines.

* LPE: compresses region voxels into a bird's-eye-view map and runs a 2D
  head; cheapest path for close, clearly visible scenes.
* VEE: sparse 3D conv stack over region voxels with per-voxel class and box
  heads; one detection per region via the max-score voxel.
* APE: structurally identical to VEE but runs on fused LiDAR+image features
  with its own parameters.

Detections decode as: class probabilities via normalized exponentials,
score = winning class probability (LPE: logistic objectness), box center =
cell center + regressed offset, box sizes = exp(regressed), yaw = regressed
scalar.  Detections serialize as JSON lines.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Sequence

import numpy as np

from .amdb import ProposalRegion, SparseConvLayer, apply_sparse_stack
from .errors import ShapeError
from .layers import Conv2dLayer, apply_conv2d_stack, sigmoid, softmax
from .voxels import SparseVoxelTensor, VoxelGridSpec


@dataclasses.dataclass(frozen=True)
class Detection:
    class_probs: np.ndarray        # simplex over configured classes
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    score: float

    def __post_init__(self):
        probs = np.asarray(self.class_probs, dtype=np.float64).ravel()
        if abs(float(probs.sum()) - 1.0) > 1e-9 or np.any(probs < 0):
            raise ValueError("class_probs must be a simplex vector")
        size = tuple(float(v) for v in self.size)
        if any(s <= 0 for s in size):
            raise ValueError(f"box sizes must be positive, got {size}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        object.__setattr__(self, "class_probs", probs)
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "score", float(self.score))


@dataclasses.dataclass(frozen=True)
class BevMap:
    """Top-down compression of region voxels over the (x, y) columns.

    ``feats`` has shape (extent_x, extent_y, 3) with channels
    ``[max cell-center height, mean intensity, voxel count]``; columns outside
    every region are all zero.
    """

    grid: VoxelGridSpec
    feats: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(np.asarray(self.feats, dtype=np.float64))
        ex, ey, _ = self.grid.extents
        if feats.shape != (ex, ey, 3):
            raise ShapeError(f"BEV feats must be ({ex}, {ey}, 3), got {feats.shape}")
        object.__setattr__(self, "feats", feats)

    @property
    def width(self) -> int:
        return self.grid.extents[0]

    @property
    def height(self) -> int:
        return self.grid.extents[1]


@dataclasses.dataclass(frozen=True)
class AffineHead:
    """Per-voxel (or per-cell) affine map: feats @ weights + bias."""

    weights: np.ndarray  # (C, M)
    bias: np.ndarray     # (M,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ShapeError(f"head weights must be 2-D, got {w.shape}")
        b = np.asarray(self.bias, dtype=np.float64).ravel()
        if b.shape[0] != w.shape[1]:
            raise ShapeError("head bias width mismatch")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    def __call__(self, feats: np.ndarray) -> np.ndarray:
        if feats.shape[-1] != self.weights.shape[0]:
            raise ShapeError(
                f"head expects {self.weights.shape[0]} channels, got {feats.shape[-1]}")
        return feats @ self.weights + self.bias


@dataclasses.dataclass(frozen=True)
class BevHeadSpec:
    """LPE parameters: optional 2D stack, then a per-cell affine head emitting
    ``n_classes`` logits + an objectness logit + a yaw channel."""

    stack: tuple[Conv2dLayer, ...]
    head: AffineHead
    n_classes: int
    score_floor: float = 0.5

    def __post_init__(self):
        if self.head.weights.shape[1] != self.n_classes + 2:
            raise ShapeError("BEV head must emit n_classes + 2 channels")


@dataclasses.dataclass(frozen=True)
class VoxelHeadSpec:
    """VEE/APE parameters: sparse 3D stack plus class and 7-channel box heads."""

    stack: tuple[SparseConvLayer, ...]
    class_head: AffineHead
    box_head: AffineHead

    def __post_init__(self):
        if self.box_head.weights.shape[1] != 7:
            raise ShapeError("box head must emit 7 channels (offset, log-size, yaw)")

    @property
    def n_classes(self) -> int:
        return self.class_head.weights.shape[1]


def region_member_mask(tensor: SparseVoxelTensor,
                       regions: Sequence[ProposalRegion]) -> np.ndarray:
    """True for voxels whose cell center lies inside some region (inclusive)."""
    mask = np.zeros(tensor.num_voxels, bool)
    if tensor.num_voxels == 0 or not len(regions):
        return mask
    centers = tensor.cell_centers()
    for region in regions:
        mask |= region.contains(centers)
    return mask


def bev_project(tensor: SparseVoxelTensor, regions: Sequence[ProposalRegion],
                intensity_channel: int = 0) -> BevMap:
    """Collapse region voxels into per-(x, y) column statistics."""
    ex, ey, _ = tensor.grid.extents
    feats = np.zeros((ex, ey, 3), np.float64)
    mask = region_member_mask(tensor, regions)
    if not np.any(mask):
        return BevMap(tensor.grid, feats)
    coords = tensor.coords[mask]
    heights = tensor.cell_centers()[mask][:, 2]
    intensity = tensor.feats[mask][:, intensity_channel]
    xs, ys = coords[:, 0], coords[:, 1]

    height_max = np.full((ex, ey), -np.inf)
    np.maximum.at(height_max, (xs, ys), heights)
    count = np.zeros((ex, ey), np.float64)
    np.add.at(count, (xs, ys), 1.0)
    i_sum = np.zeros((ex, ey), np.float64)
    np.add.at(i_sum, (xs, ys), intensity)

    occupied = count > 0
    feats[:, :, 0] = np.where(occupied, height_max, 0.0)
    feats[:, :, 1] = np.where(occupied, i_sum / np.where(occupied, count, 1.0), 0.0)
    feats[:, :, 2] = count
    return BevMap(tensor.grid, feats)


def lpe_detect(bev: BevMap, spec: BevHeadSpec,
               tensor: SparseVoxelTensor) -> list[Detection]:
    """2D head over the BEV map; boxes recover z extent from the source tensor.

    A cell yields a detection when its logistic objectness score reaches the
    configured floor and its column holds at least one voxel (the column's
    occupied cells bound the box in z).  Cells scan in ascending (x, y).
    """
    x = apply_conv2d_stack(bev.feats, spec.stack)
    out = spec.head(x)
    logits = out[:, :, :spec.n_classes]
    obj = out[:, :, spec.n_classes]
    yaw = out[:, :, spec.n_classes + 1]
    probs = softmax(logits, axis=-1)
    score = sigmoid(obj)

    grid = bev.grid
    origin = grid.lower_bound()
    vx, vy, vz = grid.voxel_size
    ex, ey, _ = grid.extents

    # Column z extents from the source tensor.
    zmin = np.full((ex, ey), np.iinfo(np.int64).max, np.int64)
    zmax = np.full((ex, ey), -1, np.int64)
    if tensor.num_voxels:
        c = tensor.coords
        np.minimum.at(zmin, (c[:, 0], c[:, 1]), c[:, 2])
        np.maximum.at(zmax, (c[:, 0], c[:, 1]), c[:, 2])

    detections = []
    for ix, iy in zip(*np.nonzero((score >= spec.score_floor) & (zmax >= 0))):
        lo = origin[2] + vz * zmin[ix, iy]
        hi = origin[2] + vz * (zmax[ix, iy] + 1)
        center = (origin[0] + vx * (ix + 0.5), origin[1] + vy * (iy + 0.5),
                  (lo + hi) / 2.0)
        detections.append(Detection(probs[ix, iy], center, (vx, vy, hi - lo),
                                    float(yaw[ix, iy]), float(score[ix, iy])))
    return detections


def _decode_voxel_detections(tensor: SparseVoxelTensor,
                             regions: Sequence[ProposalRegion],
                             spec: VoxelHeadSpec,
                             workers: int = 1) -> list[Detection]:
    if not len(regions) or tensor.num_voxels == 0:
        return []
    mask = region_member_mask(tensor, regions)
    if not np.any(mask):
        return []
    sub = SparseVoxelTensor(tensor.grid, tensor.coords[mask], tensor.feats[mask])
    feats = apply_sparse_stack(sub, spec.stack, workers=workers).feats

    probs = softmax(spec.class_head(feats), axis=-1)
    scores = probs.max(axis=-1)
    box_raw = spec.box_head(feats)
    centers = sub.cell_centers()

    detections = []
    for region in regions:
        members = np.flatnonzero(region.contains(centers))
        if members.size == 0:
            continue
        best = int(members[np.argmax(scores[members])])
        raw = box_raw[best]
        center = tuple(centers[best] + raw[:3])
        size = tuple(np.exp(raw[3:6]))
        detections.append(Detection(probs[best], center, size,
                                    float(raw[6]), float(scores[best])))
    return detections


def vee_detect(tensor: SparseVoxelTensor, regions: Sequence[ProposalRegion],
               spec: VoxelHeadSpec, workers: int = 1) -> list[Detection]:
    """Sparse 3D stack over region voxels; one detection per region (max score)."""
    if tensor.num_voxels and spec.stack and \
            tensor.num_channels != spec.stack[0].kernel.in_channels:
        raise ShapeError(
            f"tensor has {tensor.num_channels} channels, stack expects "
            f"{spec.stack[0].kernel.in_channels}")
    return _decode_voxel_detections(tensor, regions, spec, workers=workers)


def ape_detect(fused: SparseVoxelTensor, regions: Sequence[ProposalRegion],
               spec: VoxelHeadSpec, workers: int = 1) -> list[Detection]:
    """VEE-shaped pipeline with independent parameters over fused features."""
    if fused.num_voxels and spec.stack and \
            fused.num_channels != spec.stack[0].kernel.in_channels:
        raise ShapeError(
            f"fused tensor has {fused.num_channels} channels, stack expects "
            f"{spec.stack[0].kernel.in_channels}")
    return _decode_voxel_detections(fused, regions, spec, workers=workers)


def detection_record(det: Detection, classes: Sequence[str], expert: str) -> dict:
    """JSON-serializable record for one detection."""
    label = int(np.argmax(det.class_probs))
    name = classes[label] if label < len(classes) else str(label)
    return {
        "class": name,
        "probs": [float(p) for p in det.class_probs],
        "center": list(det.center),
        "size": list(det.size),
        "yaw": det.yaw,
        "score": det.score,
        "expert": expert,
    }


def write_detections_jsonl(path, detections: Sequence[Detection],
                           classes: Sequence[str], expert: str) -> None:
    with open(path, "w") as fh:
        for det in detections:
            fh.write(json.dumps(detection_record(det, classes, expert)) + "\n")
