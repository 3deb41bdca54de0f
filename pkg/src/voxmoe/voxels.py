"""Sparse voxel grid core: geometry, tensors, and point-cloud voxelization.

The central representation is :class:`SparseVoxelTensor`, an active-voxel
coordinate list plus a per-voxel feature matrix over a fixed
:class:`VoxelGridSpec`.  Voxelization bins raw LiDAR returns into cells and
aggregates a per-cell feature vector; the default recipe is 5 channels:
``[mean intensity, point count, mean offset x/y/z from the cell center]``.

Point-cloud files follow the common raw layout: little-endian float32
records of ``(x, y, z, intensity)`` with no header.
"""

from __future__ import annotations

import dataclasses
import functools
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np

from . import kernels
from .errors import InvalidGridError, ShapeError


@dataclasses.dataclass(frozen=True)
class Point:
    """Single LiDAR return in meters; intensity normalized to [0, 1]."""

    x: float
    y: float
    z: float
    intensity: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y) and np.isfinite(self.z)):
            raise ValueError("point coordinates must be finite")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity must be in [0, 1], got {self.intensity}")


@dataclasses.dataclass(frozen=True)
class VoxelGridSpec:
    """Regular 3D grid: metric origin, per-axis cell size, cells per axis."""

    origin: tuple[float, float, float]
    voxel_size: tuple[float, float, float]
    extents: tuple[int, int, int]

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        size = tuple(float(v) for v in self.voxel_size)
        extents = tuple(int(v) for v in self.extents)
        if len(origin) != 3 or len(size) != 3 or len(extents) != 3:
            raise InvalidGridError("origin, voxel_size and extents must be triples")
        if not all(np.isfinite(origin)):
            raise InvalidGridError(f"grid origin must be finite, got {origin}")
        if not all(np.isfinite(size)) or any(s <= 0 for s in size):
            raise InvalidGridError(f"voxel_size must be positive, got {size}")
        if any(e < 1 for e in extents):
            raise InvalidGridError(f"extents must be >= 1 per axis, got {extents}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", size)
        object.__setattr__(self, "extents", extents)

    @property
    def num_cells(self) -> int:
        ex, ey, ez = self.extents
        return ex * ey * ez

    def lower_bound(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    def upper_bound(self) -> np.ndarray:
        return self.lower_bound() + np.asarray(self.voxel_size) * np.asarray(self.extents)

    def cell_centers(self, coords: np.ndarray) -> np.ndarray:
        """Metric centers of the given integer cells, shape (N, 3)."""
        coords = np.asarray(coords, dtype=np.float64)
        return self.lower_bound() + (coords + 0.5) * np.asarray(self.voxel_size)

    def contains_coords(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords)
        ext = np.asarray(self.extents)
        return np.all((coords >= 0) & (coords < ext), axis=-1)


def linearize(coord: Sequence[int], grid: VoxelGridSpec) -> int:
    """Bijective row-major cell key: x slowest, z fastest.

    ``(x, y, z) -> (x * ey + y) * ez + z``; raises ``IndexError`` for
    coordinates outside the grid extents.
    """
    x, y, z = (int(v) for v in coord)
    ex, ey, ez = grid.extents
    if not (0 <= x < ex and 0 <= y < ey and 0 <= z < ez):
        raise IndexError(f"coordinate {(x, y, z)} outside grid extents {grid.extents}")
    return (x * ey + y) * ez + z


def delinearize(key: int, grid: VoxelGridSpec) -> tuple[int, int, int]:
    """Inverse of :func:`linearize`."""
    key = int(key)
    if not 0 <= key < grid.num_cells:
        raise IndexError(f"key {key} outside grid with {grid.num_cells} cells")
    _, ey, ez = grid.extents
    x, rest = divmod(key, ey * ez)
    y, z = divmod(rest, ez)
    return (x, y, z)


def linearize_many(coords: np.ndarray, grid: VoxelGridSpec) -> np.ndarray:
    """Vectorized :func:`linearize` without bounds checks (caller filters)."""
    coords = np.asarray(coords, dtype=np.int64)
    _, ey, ez = grid.extents
    return (coords[:, 0] * ey + coords[:, 1]) * ez + coords[:, 2]


def delinearize_many(keys: np.ndarray, grid: VoxelGridSpec) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    _, ey, ez = grid.extents
    x, rest = np.divmod(keys, ey * ez)
    y, z = np.divmod(rest, ez)
    return np.stack([x, y, z], axis=1)


@dataclasses.dataclass(frozen=True)
class SparseVoxelTensor:
    """Active-voxel coordinates plus an aligned N x C feature matrix.

    Coordinates are pairwise distinct and inside the grid extents; the row
    order is whatever the producer emitted (voxelize emits lexicographic
    coordinate order).
    """

    grid: VoxelGridSpec
    coords: np.ndarray
    feats: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.int64).reshape(-1, 3))
        feats = np.ascontiguousarray(np.asarray(self.feats, dtype=np.float64))
        if feats.ndim != 2:
            raise ShapeError(f"feats must be 2-D, got shape {feats.shape}")
        if feats.shape[0] != coords.shape[0]:
            raise ShapeError(
                f"{coords.shape[0]} coordinates but {feats.shape[0]} feature rows")
        if coords.shape[0]:
            if not bool(np.all(self.grid.contains_coords(coords))):
                raise InvalidGridError("voxel coordinate outside grid extents")
            keys = linearize_many(coords, self.grid)
            if np.unique(keys).shape[0] != keys.shape[0]:
                raise ValueError("duplicate voxel coordinates")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "feats", feats)

    @classmethod
    def empty(cls, grid: VoxelGridSpec, channels: int) -> "SparseVoxelTensor":
        return cls(grid, np.empty((0, 3), np.int64), np.empty((0, channels), np.float64))

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def num_channels(self) -> int:
        return self.feats.shape[1]

    def cell_centers(self) -> np.ndarray:
        return self.grid.cell_centers(self.coords)

    def with_feats(self, feats: np.ndarray) -> "SparseVoxelTensor":
        """Same active set, new feature matrix."""
        return SparseVoxelTensor(self.grid, self.coords, feats)

    @functools.cached_property
    def _key_index(self):
        keys = linearize_many(self.coords, self.grid)
        order = np.argsort(keys)
        return keys[order], order


def coord_lookup(tensor: SparseVoxelTensor, coord: Sequence[int]) -> Optional[int]:
    """Row index of ``coord`` in ``tensor``, or ``None`` when inactive."""
    coord = tuple(int(v) for v in coord)
    ex, ey, ez = tensor.grid.extents
    if not (0 <= coord[0] < ex and 0 <= coord[1] < ey and 0 <= coord[2] < ez):
        return None
    if tensor.num_voxels == 0:
        return None
    key = linearize(coord, tensor.grid)
    sorted_keys, order = tensor._key_index
    pos = int(np.searchsorted(sorted_keys, key))
    if pos < sorted_keys.shape[0] and sorted_keys[pos] == key:
        return int(order[pos])
    return None


# recipe(xyz (n,3), intensity (n,), cell_center (3,)) -> feature vector (C,)
FeatureRecipe = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

DEFAULT_FEATURE_CHANNELS = 5


class VoxelizeResult(NamedTuple):
    tensor: SparseVoxelTensor
    dropped: int


def _as_point_array(points: Union[np.ndarray, Sequence[Point]]) -> np.ndarray:
    if isinstance(points, np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            return np.empty((0, 4), np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ShapeError(f"point array must be (N, 4), got {pts.shape}")
        return pts
    rows = [(p.x, p.y, p.z, p.intensity) for p in points]
    if not rows:
        return np.empty((0, 4), np.float64)
    return np.asarray(rows, dtype=np.float64)


def voxelize(points, grid: VoxelGridSpec, recipe: Optional[FeatureRecipe] = None) -> VoxelizeResult:
    """Bin points into grid cells and aggregate one feature row per occupied cell.

    Points outside the grid's metric bounds are dropped and counted, never an
    error; rows come out in lexicographic coordinate order.  The default
    recipe produces ``[mean intensity, count, mean offset from cell center]``
    (5 channels) and is permutation-invariant over the input order because
    points are canonically re-sorted before accumulation.  A custom
    ``recipe`` is called once per occupied cell with the member points.
    """
    pts = _as_point_array(points)
    if pts.shape[0] and not np.all(np.isfinite(pts[:, :3])):
        raise ValueError("point coordinates must be finite")
    if pts.shape[0] and (np.any(pts[:, 3] < 0.0) or np.any(pts[:, 3] > 1.0)):
        raise ValueError("point intensity must be in [0, 1]")

    origin = grid.lower_bound()
    size = np.asarray(grid.voxel_size, np.float64)
    idx = np.floor((pts[:, :3] - origin) / size).astype(np.int64)
    inside = grid.contains_coords(idx) if pts.shape[0] else np.zeros(0, bool)
    dropped = int(pts.shape[0] - np.count_nonzero(inside))
    xyz = pts[inside, :3]
    intensity = pts[inside, 3]
    idx = idx[inside]

    if xyz.shape[0] == 0:
        channels = DEFAULT_FEATURE_CHANNELS if recipe is None else 0
        return VoxelizeResult(SparseVoxelTensor.empty(grid, channels), dropped)

    keys = linearize_many(idx, grid)
    # Canonical order: cell key, then point coordinates, then intensity.
    # Makes the per-cell accumulation order independent of the input order,
    # so voxelize is permutation-invariant bit for bit.
    order = np.lexsort((intensity, xyz[:, 2], xyz[:, 1], xyz[:, 0], keys))
    keys_s = keys[order]
    xyz_s = np.ascontiguousarray(xyz[order])
    intensity_s = np.ascontiguousarray(intensity[order])

    unique_keys, counts, i_sums, xyz_sums = kernels.accumulate_cells(
        keys_s, xyz_s, intensity_s)
    coords = delinearize_many(unique_keys, grid)
    centers = grid.cell_centers(coords)

    if recipe is None:
        cnt = counts.astype(np.float64)
        feats = np.empty((coords.shape[0], DEFAULT_FEATURE_CHANNELS), np.float64)
        feats[:, 0] = i_sums / cnt
        feats[:, 1] = cnt
        feats[:, 2:5] = xyz_sums / cnt[:, None] - centers
    else:
        starts = np.concatenate(([0], np.cumsum(counts)))
        rows = []
        for c in range(coords.shape[0]):
            s, e = int(starts[c]), int(starts[c + 1])
            vec = np.asarray(recipe(xyz_s[s:e], intensity_s[s:e], centers[c]),
                             dtype=np.float64).ravel()
            rows.append(vec)
        width = rows[0].shape[0]
        if any(r.shape[0] != width for r in rows):
            raise ShapeError("feature recipe returned vectors of differing length")
        feats = np.stack(rows)

    return VoxelizeResult(SparseVoxelTensor(grid, coords, feats), dropped)


def load_point_cloud(path) -> np.ndarray:
    """Read raw float32 (x, y, z, intensity) records; returns (N, 4) float64."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise ValueError(f"{path}: size not a multiple of 4-float records")
    return raw.reshape(-1, 4).astype(np.float64)


def save_point_cloud(path, points) -> None:
    _as_point_array(points).astype("<f4").tofile(path)
