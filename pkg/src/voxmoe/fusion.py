"""Image-to-3D feature fusion: pooling, pinhole back-projection, concatenation.

Pixel features carry a per-pixel metric depth; valid pixels are back-projected
through the camera, transformed into the LiDAR frame, quantized onto the voxel
grid, and fused with the LiDAR voxel features.  Fusion concatenates channels:
a LiDAR voxel matched by projected pixels becomes ``[f_lidar, f_image]``, an
unmatched LiDAR voxel ``[f_lidar, 0]``, and a projected pixel landing on an
inactive cell appends a new voxel ``[0, f_image]``.  Only projected entries
whose cell center lies inside some proposal region participate.

Pixel-grid files are flat binaries: four little-endian int32 header words
``(magic, width, height, channels)``, float32 features row-major (H, W, C),
a float32 depth plane (H, W), then a uint8 validity mask (H, W).
"""

from __future__ import annotations

import dataclasses
import math
import struct
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import BudgetError, CameraError, ShapeError
from .voxels import SparseVoxelTensor, VoxelGridSpec, delinearize_many, linearize_many

PIXEL_FILE_MAGIC = 0x47465850  # b"PXFG" read as little-endian uint32


@dataclasses.dataclass(frozen=True)
class PixelFeatureGrid:
    """Per-pixel feature vectors with metric depth and a validity mask."""

    width: int
    height: int
    feats: np.ndarray   # (H, W, C)
    depth: np.ndarray   # (H, W), meters, > 0 where valid
    valid: np.ndarray   # (H, W) bool

    def __post_init__(self):
        feats = np.ascontiguousarray(np.asarray(self.feats, dtype=np.float64))
        depth = np.ascontiguousarray(np.asarray(self.depth, dtype=np.float64))
        valid = np.ascontiguousarray(np.asarray(self.valid, dtype=bool))
        w, h = int(self.width), int(self.height)
        if w < 1 or h < 1:
            raise ShapeError(f"pixel grid dimensions must be positive, got {w}x{h}")
        if feats.ndim != 3 or feats.shape[:2] != (h, w):
            raise ShapeError(f"feats shape {feats.shape} does not match {h}x{w}")
        if depth.shape != (h, w) or valid.shape != (h, w):
            raise ShapeError("depth/valid planes must be (H, W)")
        dv = depth[valid]
        if dv.size and (not np.all(np.isfinite(dv)) or np.any(dv <= 0)):
            raise ValueError("depth must be finite and > 0 at valid pixels")
        object.__setattr__(self, "width", w)
        object.__setattr__(self, "height", h)
        object.__setattr__(self, "feats", feats)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @property
    def channels(self) -> int:
        return self.feats.shape[2]


@dataclasses.dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the rigid camera-to-LiDAR transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (3, 3), camera -> LiDAR
    translation: np.ndarray  # (3,), meters

    def __post_init__(self):
        fx, fy = float(self.fx), float(self.fy)
        if not (math.isfinite(fx) and math.isfinite(fy)) or fx <= 0 or fy <= 0:
            raise CameraError(f"focal lengths must be positive, got ({fx}, {fy})")
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise CameraError("principal point must be finite")
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).ravel()
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise CameraError("extrinsics must be a 3x3 rotation and length-3 translation")
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9:
            raise CameraError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise CameraError("rotation must be proper (det = +1)")
        object.__setattr__(self, "fx", fx)
        object.__setattr__(self, "fy", fy)
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    def scaled(self, scale: int) -> "CameraModel":
        """Intrinsics adjusted for an s-times block-pooled pixel grid.

        Pooled pixel ``j`` sits at original column ``s*j + (s-1)/2``, so the
        pooled-grid ray of index ``j`` is reproduced by ``fx/s`` and
        ``(cx - (s-1)/2) / s``.
        """
        s = int(scale)
        if s == 1:
            return self
        half = (s - 1) / 2.0
        return CameraModel(self.fx / s, self.fy / s,
                           (self.cx - half) / s, (self.cy - half) / s,
                           self.rotation, self.translation)


def multiscale_pool(grid: PixelFeatureGrid, scale: int,
                    op: str = "mean") -> PixelFeatureGrid:
    """Block downscale by ``scale``; output dims are ceil(H/s) x ceil(W/s).

    Each output feature (and depth) aggregates the valid pixels of its
    s x s block with ``op`` ("mean", the default, or "max"); the output
    pixel is valid iff the block holds at least one valid pixel.  Invalid
    output pixels carry zeros.
    """
    s = int(scale)
    if s < 1:
        raise ValueError(f"pooling scale must be >= 1, got {scale}")
    if op not in ("mean", "max"):
        raise ValueError(f"pooling op must be 'mean' or 'max', got {op!r}")
    if s == 1:
        return grid
    h, w, c = grid.height, grid.width, grid.channels
    ho, wo = -(-h // s), -(-w // s)
    pad_h, pad_w = ho * s - h, wo * s - w
    feats = np.pad(grid.feats, ((0, pad_h), (0, pad_w), (0, 0)))
    depth = np.pad(grid.depth, ((0, pad_h), (0, pad_w)))
    valid = np.pad(grid.valid, ((0, pad_h), (0, pad_w)))

    cnt = valid.reshape(ho, s, wo, s).sum(axis=(1, 3))
    out_valid = cnt > 0
    if op == "mean":
        vm = valid.astype(np.float64)
        fsum = (feats * vm[:, :, None]).reshape(ho, s, wo, s, c).sum(axis=(1, 3))
        dsum = (depth * vm).reshape(ho, s, wo, s).sum(axis=(1, 3))
        denom = np.where(out_valid, cnt, 1.0)
        out_feats = fsum / denom[:, :, None]
        out_depth = dsum / denom
    else:
        masked_f = np.where(valid[:, :, None], feats, -np.inf)
        masked_d = np.where(valid, depth, -np.inf)
        out_feats = masked_f.reshape(ho, s, wo, s, c).max(axis=(1, 3))
        out_depth = masked_d.reshape(ho, s, wo, s).max(axis=(1, 3))
    out_feats[~out_valid] = 0.0
    out_depth[~out_valid] = 0.0
    return PixelFeatureGrid(wo, ho, out_feats, out_depth, out_valid)


def pick_scale(width: int, height: int, channels: int, budget_bytes: int) -> int:
    """Smallest pooling scale whose float32 feature plane fits the budget."""
    width, height, channels = int(width), int(height), int(channels)
    budget = int(budget_bytes)
    if budget < channels * 4:
        raise BudgetError(
            f"budget {budget} B below a single {channels}-channel float32 vector")
    for s in range(1, max(height, width) + 1):
        if (-(-height // s)) * (-(-width // s)) * channels * 4 <= budget:
            return s
    return max(height, width)


@dataclasses.dataclass(frozen=True)
class ProjectedFeatures:
    """Projected pixel entries: voxel cells plus their image feature vectors."""

    coords: np.ndarray  # (M, 3) int64
    feats: np.ndarray   # (M, C) float64
    dropped: int = 0

    def __post_init__(self):
        coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.int64).reshape(-1, 3))
        feats = np.ascontiguousarray(np.asarray(self.feats, dtype=np.float64))
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ShapeError("projected coords/feats row mismatch")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "feats", feats)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.feats.shape[1]


def project_pixels(grid: PixelFeatureGrid, cam: CameraModel,
                   vox: VoxelGridSpec) -> ProjectedFeatures:
    """Back-project valid pixels through the camera and quantize onto the grid.

    Pixel (u=column, v=row) with depth d maps to camera coordinates
    ``((u-cx)/fx*d, (v-cy)/fy*d, d)``, then through the rigid transform into
    the LiDAR frame, then to the floor-quantized voxel cell.  Entries landing
    outside the grid extents are dropped and counted.  Output rows follow
    row-major pixel scan order.
    """
    vs, us = np.nonzero(grid.valid)
    if vs.size == 0:
        return ProjectedFeatures(np.empty((0, 3), np.int64),
                                 np.empty((0, grid.channels), np.float64), 0)
    d = grid.depth[vs, us]
    u = us.astype(np.float64)
    v = vs.astype(np.float64)
    xc = (u - cam.cx) / cam.fx * d
    yc = (v - cam.cy) / cam.fy * d
    zc = d
    r, t = cam.rotation, cam.translation
    # Per-axis expansion keeps the arithmetic identical to a scalar oracle.
    px = r[0, 0] * xc + r[0, 1] * yc + r[0, 2] * zc + t[0]
    py = r[1, 0] * xc + r[1, 1] * yc + r[1, 2] * zc + t[1]
    pz = r[2, 0] * xc + r[2, 1] * yc + r[2, 2] * zc + t[2]
    origin = vox.lower_bound()
    size = np.asarray(vox.voxel_size, np.float64)
    ix = np.floor((px - origin[0]) / size[0]).astype(np.int64)
    iy = np.floor((py - origin[1]) / size[1]).astype(np.int64)
    iz = np.floor((pz - origin[2]) / size[2]).astype(np.int64)
    coords = np.stack([ix, iy, iz], axis=1)
    inside = vox.contains_coords(coords)
    dropped = int(coords.shape[0] - np.count_nonzero(inside))
    return ProjectedFeatures(coords[inside], grid.feats[vs, us][inside], dropped)


ProjectedInput = Union[ProjectedFeatures, Iterable[tuple[Sequence[int], np.ndarray]]]


def _normalize_projected(projected: ProjectedInput,
                         image_channels: Optional[int]) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(projected, ProjectedFeatures):
        return projected.coords, projected.feats
    pairs = list(projected)
    if not pairs:
        if image_channels is None:
            raise ValueError("empty projected list needs an explicit image_channels")
        return np.empty((0, 3), np.int64), np.empty((0, image_channels), np.float64)
    coords = np.asarray([tuple(int(v) for v in c) for c, _ in pairs], dtype=np.int64)
    vecs = [np.asarray(f, dtype=np.float64).ravel() for _, f in pairs]
    width = vecs[0].shape[0]
    if any(v.shape[0] != width for v in vecs):
        raise ShapeError("projected feature vectors have inconsistent channel counts")
    return coords, np.stack(vecs)


def fuse(vox: SparseVoxelTensor, projected: ProjectedInput, proposals,
         image_channels: Optional[int] = None) -> SparseVoxelTensor:
    """Concatenate projected image features onto LiDAR voxel features.

    Output channel count is ``C_lidar + C_img``.  Every input voxel starts as
    ``[f_lidar, 0]``; projected entries whose cell center falls inside some
    proposal region are grouped by cell and averaged, then either fill the
    image half of a matching active voxel or append a new ``[0, f_image]``
    voxel.  Rows come out in lexicographic coordinate order.
    """
    coords, feats = _normalize_projected(projected, image_channels)
    c_img = feats.shape[1]
    c_lidar = vox.num_channels
    grid = vox.grid
    if coords.shape[0] and not bool(np.all(grid.contains_coords(coords))):
        raise ValueError("projected coordinate outside the voxel grid extents")

    # Only entries inside some proposal region participate.
    if coords.shape[0] and len(proposals):
        centers = grid.cell_centers(coords)
        keep = np.zeros(coords.shape[0], bool)
        for region in proposals:
            keep |= region.contains(centers)
        coords, feats = coords[keep], feats[keep]
    elif not len(proposals):
        coords = np.empty((0, 3), np.int64)
        feats = np.empty((0, c_img), np.float64)

    # Average collided entries per cell (order-independent by grouping).
    if coords.shape[0]:
        keys = linearize_many(coords, grid)
        uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        sums = np.zeros((uniq.shape[0], c_img), np.float64)
        np.add.at(sums, inverse, feats)
        img_means = sums / counts[:, None]
        img_keys = uniq
    else:
        img_keys = np.empty(0, np.int64)
        img_means = np.empty((0, c_img), np.float64)

    vox_keys = linearize_many(vox.coords, grid) if vox.num_voxels else np.empty(0, np.int64)
    matched = np.isin(img_keys, vox_keys)
    new_keys = img_keys[~matched]

    all_keys = np.concatenate([vox_keys, new_keys])
    order = np.argsort(all_keys)
    n_out = all_keys.shape[0]
    out_feats = np.zeros((n_out, c_lidar + c_img), np.float64)
    out_feats[:vox.num_voxels, :c_lidar] = vox.feats
    if new_keys.shape[0]:
        out_feats[vox.num_voxels:, c_lidar:] = img_means[~matched]
    if np.count_nonzero(matched):
        vk_order = np.argsort(vox_keys)
        pos = np.searchsorted(vox_keys[vk_order], img_keys[matched])
        rows = vk_order[pos]
        out_feats[rows, c_lidar:] = img_means[matched]

    out_coords = delinearize_many(all_keys[order], grid)
    return SparseVoxelTensor(grid, out_coords, out_feats[order])


def save_pixel_grid(path, grid: PixelFeatureGrid) -> None:
    """Write the flat binary pixel-grid format (header + planes)."""
    header = struct.pack("<4i", PIXEL_FILE_MAGIC, grid.width, grid.height, grid.channels)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(grid.feats.astype("<f4").tobytes())
        fh.write(grid.depth.astype("<f4").tobytes())
        fh.write(grid.valid.astype(np.uint8).tobytes())


def load_pixel_grid(path) -> PixelFeatureGrid:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated pixel-grid header")
        magic, w, h, c = struct.unpack("<4i", header)
        if magic != PIXEL_FILE_MAGIC:
            raise ValueError(f"{path}: bad magic 0x{magic:08X}")
        n = h * w
        feats = np.frombuffer(fh.read(n * c * 4), dtype="<f4")
        depth = np.frombuffer(fh.read(n * 4), dtype="<f4")
        valid = np.frombuffer(fh.read(n), dtype=np.uint8)
    if feats.size != n * c or depth.size != n or valid.size != n:
        raise ValueError(f"{path}: truncated pixel-grid payload")
    return PixelFeatureGrid(w, h,
                            feats.astype(np.float64).reshape(h, w, c),
                            depth.astype(np.float64).reshape(h, w),
                            valid.reshape(h, w).astype(bool))
