"""Voxelized environments and signed distance fields.

The environment is rasterized onto a dense voxel grid, turned into an exact
signed Euclidean distance field with separable lower-envelope passes, and
then sampled with multilinear interpolation.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _core

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """Invalid grid or environment description."""


@dataclass(frozen=True)
class WorkspaceBounds:
    min_corner: tuple
    max_corner: tuple

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=float).ravel()
        hi = np.asarray(self.max_corner, dtype=float).ravel()
        if lo.size != hi.size or lo.size not in (2, 3):
            raise ConfigurationError("bounds need matching 2-D or 3-D corners")
        if not np.all(lo < hi):
            raise ConfigurationError("bounds need min_corner < max_corner componentwise")
        object.__setattr__(self, "min_corner", tuple(lo))
        object.__setattr__(self, "max_corner", tuple(hi))

    @property
    def dimension(self) -> int:
        return len(self.min_corner)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.min_corner)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.max_corner)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))


# ------------------------------------------------------------------ primitives


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ConfigurationError("sphere radius must be >= 0")

    def contains(self, pts):
        c = np.asarray(self.center, dtype=float)
        return np.sum((pts[:, : c.size] - c) ** 2, axis=1) <= self.radius**2

    def aabb(self):
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple

    def __post_init__(self):
        if np.any(np.asarray(self.half_extents, dtype=float) < 0):
            raise ConfigurationError("box half_extents must be >= 0")

    def contains(self, pts):
        c = np.asarray(self.center, dtype=float)
        h = np.asarray(self.half_extents, dtype=float)
        return np.all(np.abs(pts[:, : c.size] - c) <= h, axis=1)

    def aabb(self):
        c = np.asarray(self.center, dtype=float)
        h = np.asarray(self.half_extents, dtype=float)
        return c - h, c + h


@dataclass(frozen=True)
class Point:
    """Occupies exactly the voxel that contains ``center``."""

    center: tuple

    def aabb(self):
        c = np.asarray(self.center, dtype=float)
        return c, c


@dataclass(frozen=True)
class HalfSpace:
    """The region ``normal . x <= offset``; ``normal`` points out of it."""

    normal: tuple
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ConfigurationError("half-space normal must be unit length")

    def contains(self, pts):
        n = np.asarray(self.normal, dtype=float)
        return pts[:, : n.size] @ n <= self.offset

    def aabb(self):
        return None


@dataclass(frozen=True)
class Bitmap:
    """A planar occupancy mask.

    ``mask[i, j]`` covers the square ``origin + ([i, i+1) x [j, j+1)) * resolution``,
    i.e. the first index runs along x.
    """

    mask: np.ndarray = field(repr=False)
    origin: tuple
    resolution: float

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ConfigurationError("bitmap mask must be 2-D")
        if self.resolution <= 0:
            raise ConfigurationError("bitmap resolution must be positive")
        object.__setattr__(self, "mask", m)

    @classmethod
    def from_rows(cls, rows, origin, resolution, filled="#"):
        """Build from text rows listed top (max y) to bottom, x left to right."""
        grid = np.array([[ch == filled for ch in row] for row in rows], dtype=bool)
        return cls(grid[::-1].T.copy(), origin, resolution)

    def contains(self, pts):
        o = np.asarray(self.origin, dtype=float)
        ij = np.floor((pts[:, :2] - o) / self.resolution).astype(np.intp)
        nx, ny = self.mask.shape
        ok = (ij[:, 0] >= 0) & (ij[:, 0] < nx) & (ij[:, 1] >= 0) & (ij[:, 1] < ny)
        out = np.zeros(len(pts), dtype=bool)
        out[ok] = self.mask[ij[ok, 0], ij[ok, 1]]
        return out

    def aabb(self):
        o = np.asarray(self.origin, dtype=float)
        return o, o + np.array(self.mask.shape) * self.resolution


# ------------------------------------------------------------------ grids


def grid_shape(bounds: WorkspaceBounds, resolution: float) -> tuple:
    if not resolution > 0:
        raise ConfigurationError("resolution must be positive")
    extent = bounds.hi - bounds.lo
    return tuple(int(math.ceil(e / resolution - 1e-9)) for e in extent)


def voxel_centers(bounds: WorkspaceBounds, resolution: float) -> np.ndarray:
    """Centers of every voxel, shape (*grid_shape, dim)."""
    shape = grid_shape(bounds, resolution)
    axes = [bounds.lo[i] + (np.arange(n) + 0.5) * resolution for i, n in enumerate(shape)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    bounds: WorkspaceBounds
    resolution: float
    cells: np.ndarray

    def __post_init__(self):
        if not self.resolution > 0:
            raise ConfigurationError("resolution must be positive")
        if self.cells.shape != grid_shape(self.bounds, self.resolution):
            raise ConfigurationError("cell array does not match bounds/resolution")


def _overlaps(prim, bounds):
    box = prim.aabb()
    if box is None:
        return True
    lo, hi = (np.asarray(b, dtype=float)[: bounds.dimension] for b in box)
    return bool(np.all(hi >= bounds.lo) and np.all(lo <= bounds.hi))


def build_occupancy(primitives, bounds: WorkspaceBounds, resolution: float) -> OccupancyGrid:
    """Mark every voxel whose center lies inside some primitive."""
    shape = grid_shape(bounds, resolution)
    if any(n < 1 for n in shape):
        raise ConfigurationError("grid must have at least one voxel per axis")
    centers = voxel_centers(bounds, resolution).reshape(-1, bounds.dimension)
    cells = np.zeros(len(centers), dtype=bool)
    for prim in primitives:
        if not _overlaps(prim, bounds):
            log.warning("primitive %r lies outside the workspace bounds; ignored", prim)
            continue
        if isinstance(prim, Point):
            c = np.asarray(prim.center, dtype=float)[: bounds.dimension]
            idx = np.floor((c - bounds.lo) / resolution).astype(int)
            idx = np.minimum(idx, np.array(shape) - 1)
            cells[np.ravel_multi_index(tuple(idx), shape)] = True
        else:
            cells |= prim.contains(centers)
    return OccupancyGrid(bounds, resolution, cells.reshape(shape))


def squared_edt(sites: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance (voxel units) to the nearest True cell.

    Cells with no site anywhere in the grid get ``inf``.
    """
    f = np.where(np.asarray(sites, dtype=bool), 0.0, np.inf)
    k = _core.kernels
    for axis in range(f.ndim):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        flat = moved.reshape(-1, moved.shape[-1])
        k.sq_edt_lines(flat)
        f = np.moveaxis(flat.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(f)


@dataclass(frozen=True, eq=False)
class SdfGrid:
    """Signed distances (meters) at voxel centers; immutable after build."""

    bounds: WorkspaceBounds
    resolution: float
    values: np.ndarray
    build_seconds: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        v3 = v if v.ndim == 3 else v[..., None]
        v3 = np.ascontiguousarray(v3)
        v3.flags.writeable = False
        object.__setattr__(self, "_values3", v3)
        origin = np.zeros(3)
        origin[: self.dimension] = self.bounds.lo
        origin.flags.writeable = False
        object.__setattr__(self, "_origin3", origin)

    @property
    def dimension(self) -> int:
        return self.bounds.dimension

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def sentinel(self) -> float:
        return self.bounds.diagonal

    def kernel_args(self):
        """(values3, origin3, resolution, dim) as consumed by ``_core`` kernels."""
        return self._values3, self._origin3, float(self.resolution), self.dimension

    def _pad(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.dimension:
            raise ValueError(f"points must have {self.dimension} coordinates")
        out = np.zeros((len(pts), 3))
        out[:, : self.dimension] = pts
        return out

    def distance(self, points):
        """Interpolated distances and out-of-bounds flags for (N, dim) points."""
        vals, oob = _core.kernels.interp(*self.kernel_args(), self._pad(points))
        return vals, oob.astype(bool)

    def gradient(self, points):
        pts = self._pad(points)
        g = _core.kernels.gradient(*self.kernel_args(), pts)
        _, oob = _core.kernels.interp(*self.kernel_args(), pts)
        return g[:, : self.dimension], oob.astype(bool)

    def slice(self, axis: int, index: int) -> np.ndarray:
        """Axis-aligned slice of the stored values.

        For planar grids ``axis=2, index=0`` returns the whole grid.
        """
        if self.dimension == 2 and axis == 2:
            if index != 0:
                raise IndexError("planar grids only have slice index 0 along z")
            return self.values
        if not 0 <= axis < self.dimension:
            raise IndexError(f"axis {axis} out of range")
        if not 0 <= index < self.shape[axis]:
            raise IndexError(f"slice index {index} out of range 0..{self.shape[axis] - 1}")
        return np.take(self.values, index, axis=axis)


def distance_transform(occ: OccupancyGrid) -> SdfGrid:
    """Signed field: +distance to the nearest occupied center for free voxels,
    -distance to the nearest free center for occupied ones."""
    t0 = time.perf_counter()
    cells = occ.cells
    if cells.size == 0:
        raise ConfigurationError("grid is empty")
    sentinel = occ.bounds.diagonal
    outside = np.sqrt(squared_edt(cells)) * occ.resolution
    inside = np.sqrt(squared_edt(~cells)) * occ.resolution
    values = np.where(cells, -inside, outside)
    values = np.clip(values, -sentinel, sentinel)
    return SdfGrid(occ.bounds, occ.resolution, values, time.perf_counter() - t0)


def build_sdf(primitives, bounds: WorkspaceBounds, resolution: float) -> SdfGrid:
    return distance_transform(build_occupancy(primitives, bounds, resolution))


def sample_distance(sdf: SdfGrid, point):
    """Interpolated signed distance at one point: ``(value, out_of_bounds)``."""
    vals, oob = sdf.distance(np.asarray(point, dtype=float)[None])
    return float(vals[0]), bool(oob[0])


def sample_gradient(sdf: SdfGrid, point):
    """Central-difference gradient (step = one voxel): ``(vector, out_of_bounds)``."""
    g, oob = sdf.gradient(np.asarray(point, dtype=float)[None])
    return g[0], bool(oob[0])
