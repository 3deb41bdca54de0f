"""Preprocessing bridge: LiDAR feature backbone, scored proposal regions, and
an image feature branch.

The LiDAR branch is a configurable stack of submanifold sparse convolutions
with a per-voxel logistic score head; proposal regions are 26-connected
components of voxels above a score threshold, each wrapped in the tight
metric box that covers its member cells.  The image branch is a plain dense
2D convolution stack.

Backbone descriptions load from JSON; 3D layer weights reference the flat
binary kernel format, 2D layer weights reference ``.npy`` files.  Small
vectors (heads, biases) may be inlined in the JSON.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .layers import Conv2dLayer, apply_activation, apply_conv2d_stack, sigmoid
from .fusion import PixelFeatureGrid
from .spconv import KernelSpec, load_kernel_weights, sparse_conv
from .voxels import SparseVoxelTensor

_NEIGHBORS_26 = [(dx, dy, dz)
                 for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
                 if (dx, dy, dz) != (0, 0, 0)]


@dataclasses.dataclass(frozen=True)
class ProposalRegion:
    """Axis-aligned metric box with a confidence score.

    ``centroid_distance`` is derived: the Euclidean norm of the box center,
    i.e. the distance of the proposal from the sensor origin.
    """

    box_min: tuple[float, float, float]
    box_max: tuple[float, float, float]
    confidence: float

    def __post_init__(self):
        lo = tuple(float(v) for v in self.box_min)
        hi = tuple(float(v) for v in self.box_max)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("box_min/box_max must be triples")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"box min {lo} exceeds max {hi}")
        conf = float(self.confidence)
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {conf}")
        object.__setattr__(self, "box_min", lo)
        object.__setattr__(self, "box_max", hi)
        object.__setattr__(self, "confidence", conf)

    @property
    def center(self) -> tuple[float, float, float]:
        return tuple((a + b) / 2.0 for a, b in zip(self.box_min, self.box_max))

    @property
    def centroid_distance(self) -> float:
        return math.sqrt(sum(c * c for c in self.center))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Inclusive containment mask for (N, 3) metric points."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo = np.asarray(self.box_min)
        hi = np.asarray(self.box_max)
        return np.all((pts >= lo) & (pts <= hi), axis=1)


@dataclasses.dataclass(frozen=True)
class SparseConvLayer:
    kernel: KernelSpec
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclasses.dataclass(frozen=True)
class ScoreHead:
    """Affine map from the final feature vector to a scalar logit."""

    weights: np.ndarray  # (C,)
    bias: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))


@dataclasses.dataclass(frozen=True)
class BackboneSpec:
    """Sparse conv stack plus the per-voxel score head; channel-chained."""

    layers: tuple[SparseConvLayer, ...]
    head: ScoreHead

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("backbone needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.kernel.out_channels != nxt.kernel.in_channels:
                raise ShapeError(
                    f"layer chain breaks: {prev.kernel.out_channels} -> {nxt.kernel.in_channels}")
        if self.head.weights.shape[0] != layers[-1].kernel.out_channels:
            raise ShapeError("score head width does not match final layer channels")
        object.__setattr__(self, "layers", layers)

    @property
    def in_channels(self) -> int:
        return self.layers[0].kernel.in_channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].kernel.out_channels


def apply_sparse_stack(tensor: SparseVoxelTensor, layers: Sequence[SparseConvLayer],
                       workers: int = 1) -> SparseVoxelTensor:
    for layer in layers:
        tensor = sparse_conv(tensor, layer.kernel, workers=workers)
        tensor = tensor.with_feats(apply_activation(tensor.feats, layer.activation))
    return tensor


def lidar_branch(tensor: SparseVoxelTensor, spec: BackboneSpec,
                 workers: int = 1) -> tuple[SparseVoxelTensor, np.ndarray]:
    """Run the sparse conv stack and score every voxel with the logistic head."""
    if tensor.num_channels != spec.in_channels:
        raise ShapeError(
            f"tensor has {tensor.num_channels} channels, backbone expects {spec.in_channels}")
    feats = apply_sparse_stack(tensor, spec.layers, workers=workers)
    scores = sigmoid(feats.feats @ spec.head.weights + spec.head.bias)
    return feats, np.asarray(scores, dtype=np.float64).reshape(-1)


def make_proposals(tensor: SparseVoxelTensor, scores: np.ndarray,
                   score_threshold: float) -> list[ProposalRegion]:
    """26-connected components of voxels scoring at or above the threshold.

    Each component yields the tight metric box covering its member cells,
    confidence = max member score.  Output is sorted by descending
    confidence (ties broken by ascending box minimum for determinism).
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.shape[0] != tensor.num_voxels:
        raise ShapeError("one score per voxel required")
    keep = np.flatnonzero(scores >= score_threshold)
    if keep.size == 0:
        return []
    coords = tensor.coords[keep]
    cell_of = {tuple(c): i for i, c in enumerate(coords.tolist())}
    visited = np.zeros(keep.size, bool)
    origin = tensor.grid.lower_bound()
    size = np.asarray(tensor.grid.voxel_size)

    proposals = []
    for seed in range(keep.size):
        if visited[seed]:
            continue
        stack = [seed]
        visited[seed] = True
        members = []
        while stack:
            cur = stack.pop()
            members.append(cur)
            cx, cy, cz = coords[cur]
            for dx, dy, dz in _NEIGHBORS_26:
                nb = cell_of.get((cx + dx, cy + dy, cz + dz))
                if nb is not None and not visited[nb]:
                    visited[nb] = True
                    stack.append(nb)
        cells = coords[members]
        lo = origin + size * cells.min(axis=0)
        hi = origin + size * (cells.max(axis=0) + 1)
        conf = float(scores[keep[members]].max())
        proposals.append(ProposalRegion(tuple(lo), tuple(hi), conf))
    proposals.sort(key=lambda p: (-p.confidence, p.box_min))
    return proposals


def image_branch(image: PixelFeatureGrid, layers: Sequence[Conv2dLayer]) -> PixelFeatureGrid:
    """Dense 2D conv stack over pixel features; depth and mask pass through."""
    feats = apply_conv2d_stack(image.feats, layers)
    return PixelFeatureGrid(image.width, image.height, feats, image.depth, image.valid)


def _resolve(base_dir: str, ref: str) -> str:
    return ref if os.path.isabs(ref) else os.path.join(base_dir, ref)


def _load_vector(base_dir: str, ref) -> np.ndarray:
    if isinstance(ref, str):
        return np.load(_resolve(base_dir, ref)).astype(np.float64)
    return np.asarray(ref, dtype=np.float64)


def load_backbone_spec(path) -> BackboneSpec:
    """Backbone JSON: layer list referencing kernel weight files, inline head.

    ::

        {"layers": [{"weights": "l0.krn", "bias": [..]|null, "activation": "relu"}],
         "head": {"weights": [..] | "head.npy", "bias": 0.0}}
    """
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        doc = json.load(fh)
    layers = []
    for entry in doc["layers"]:
        kernel = load_kernel_weights(_resolve(base, entry["weights"]))
        bias = entry.get("bias")
        if bias is not None:
            kernel = dataclasses.replace(kernel, bias=_load_vector(base, bias))
        layers.append(SparseConvLayer(kernel, entry.get("activation", "relu")))
    head_doc = doc["head"]
    head = ScoreHead(_load_vector(base, head_doc["weights"]),
                     float(head_doc.get("bias", 0.0)))
    return BackboneSpec(tuple(layers), head)


def load_conv2d_stack(path) -> tuple[Conv2dLayer, ...]:
    """Image-branch JSON: 2D layers whose weights live in .npy files.

    ::

        {"layers": [{"weights": "w0.npy", "bias": "b0.npy"|[..]|null,
                     "activation": "relu"}]}
    """
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        doc = json.load(fh)
    layers = []
    for entry in doc["layers"]:
        weights = np.load(_resolve(base, entry["weights"])).astype(np.float64)
        bias = entry.get("bias")
        if bias is not None:
            bias = _load_vector(base, bias)
        layers.append(Conv2dLayer(weights, bias, entry.get("activation", "relu")))
    return tuple(layers)
