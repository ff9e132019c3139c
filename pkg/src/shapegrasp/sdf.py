"""Voxel signed distance fields of gripper preshapes and collision queries.

Sign convention: values are positive inside the gripper solid and negative
outside, so a scene point with a positive value is in collision.

Binary cache layout (little endian)::

    offset  size  field
    0       4     magic b"SDFG"
    4       4     uint32 version (1)
    8       24    float64[3] origin (position of node (0, 0, 0), meters)
    32      8     float64 voxel size (meters)
    40      12    uint32[3] dims (nx, ny, nz)
    52      4*N   float32 values, row-major (x slowest, z fastest)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import apply_transform, as_cloud, as_pose, inverse

_HEADER = struct.Struct("<4sI3dd3I")
_MAGIC = b"SDFG"
_VERSION = 1

DEFAULT_PADDING_VOXELS = 4


@dataclass(frozen=True)
class SdfGrid:
    origin: np.ndarray
    voxel: float
    values: np.ndarray
    _boundary_max: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 2:
            raise ValueError("SDF grid needs at least 2 nodes along every axis")
        if not self.voxel > 0:
            raise ValueError("voxel size must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel", float(self.voxel))
        object.__setattr__(self, "values", values)
        faces = [values[0], values[-1], values[:, 0], values[:, -1], values[:, :, 0], values[:, :, -1]]
        object.__setattr__(self, "_boundary_max", float(max(np.abs(f).max() for f in faces)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def lower(self) -> np.ndarray:
        return self.origin

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.voxel * (np.asarray(self.dims) - 1)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def shifted(self, offset) -> "SdfGrid":
        return SdfGrid(self.origin + np.asarray(offset, dtype=float), self.voxel, self.values)

    def query(self, points) -> np.ndarray:
        return query(self, points)


def _cloud_spacing(tree: cKDTree, pts: np.ndarray) -> float:
    dist, _ = tree.query(pts, k=2)
    return float(np.median(dist[:, 1]))


def build_sdf(full_gripper_cloud, voxel: float, padding: float | None = None) -> SdfGrid:
    """Signed distance grid of the solid bounded by a surface point cloud.

    Magnitudes are distances to the nearest cloud point. The sign comes from
    a flood fill: nodes within half a voxel diagonal plus half the sampling
    spacing of a cloud point form a wall, nodes reachable from the grid
    boundary without crossing it are outside, enclosed nodes are inside, and
    wall nodes take the side whose region is nearer.
    """
    pts = as_cloud(full_gripper_cloud, "gripper cloud")
    if not voxel > 0:
        raise ValueError("voxel size must be positive")
    if pts.shape[0] < 4:
        raise ValueError("need at least 4 points to build an SDF")
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[-1] <= 1e-9 * max(sv[0], 1e-300):
        raise ValueError("gripper cloud is degenerate (coplanar or collinear)")

    tree = cKDTree(pts)
    spacing = _cloud_spacing(tree, pts)
    wall_width = 0.5 * (math.sqrt(3.0) * voxel + spacing)
    if padding is None:
        padding = DEFAULT_PADDING_VOXELS * voxel
    padding = max(padding, wall_width + 2.0 * voxel)

    lo = pts.min(axis=0) - padding
    hi = pts.max(axis=0) + padding
    dims = np.ceil((hi - lo) / voxel).astype(int) + 1
    axes = [lo[i] + voxel * np.arange(dims[i]) for i in range(3)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    dist, _ = tree.query(nodes)
    dist = dist.reshape(dims)

    wall = dist <= wall_width
    filled = ndimage.binary_fill_holes(wall)
    inside = filled & ~wall
    outside = ~filled
    if not inside.any():
        raise ValueError(
            "gripper cloud encloses no interior at this voxel size; use a finer voxel or denser cloud"
        )
    d_in = ndimage.distance_transform_edt(~inside)
    d_out = ndimage.distance_transform_edt(~outside)
    positive = inside | (wall & (d_in < d_out))
    values = np.where(positive, dist, -dist)

    grid = SdfGrid(lo, voxel, values)
    far = grid.upper + grid.diagonal
    if query(grid, far)[0] >= 0 or values[0, 0, 0] >= 0:
        raise RuntimeError("SDF sign check failed: exterior queried non-negative")
    return grid


def query(sdf: SdfGrid, points) -> np.ndarray:
    """Trilinear SDF lookup.

    Points outside the grid return ``-(distance to grid box + largest
    boundary magnitude)``, which is always negative.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    dims = np.asarray(sdf.dims)
    f = (p - sdf.origin) / sdf.voxel
    snapped = np.round(f)
    f = np.where(np.abs(f - snapped) < 1e-9, snapped, f)
    inside = np.all((f >= 0) & (f <= dims - 1), axis=1)

    out = np.empty(p.shape[0])
    if np.any(~inside):
        q = p[~inside]
        gap = np.maximum(np.maximum(sdf.lower - q, q - sdf.upper), 0.0)
        out[~inside] = -(np.linalg.norm(gap, axis=1) + sdf._boundary_max)
    if np.any(inside):
        fi = f[inside]
        i0 = np.clip(np.floor(fi).astype(int), 0, dims - 2)
        t = fi - i0
        v = sdf.values
        x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
        tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
        c00 = v[x0, y0, z0] * (1 - tx) + v[x0 + 1, y0, z0] * tx
        c10 = v[x0, y0 + 1, z0] * (1 - tx) + v[x0 + 1, y0 + 1, z0] * tx
        c01 = v[x0, y0, z0 + 1] * (1 - tx) + v[x0 + 1, y0, z0 + 1] * tx
        c11 = v[x0, y0 + 1, z0 + 1] * (1 - tx) + v[x0 + 1, y0 + 1, z0 + 1] * tx
        c0 = c00 * (1 - ty) + c10 * ty
        c1 = c01 * (1 - ty) + c11 * ty
        out[inside] = c0 * (1 - tz) + c1 * tz
    return out


@dataclass(frozen=True)
class StackedSdf:
    """Preshape SDFs spread along one axis so they never overlap.

    ``grids`` holds the shifted copies; query a preshape by adding its
    offset to gripper-frame points.
    """

    grids: tuple
    offsets: np.ndarray
    epsilon: float
    axis: int = 0

    def query(self, points, preshape: int) -> np.ndarray:
        return query(self.grids[preshape], points)

    def __len__(self) -> int:
        return len(self.grids)


def stack_preshapes(sdfs, epsilon: float, axis: int = 0) -> StackedSdf:
    """Assign grid ``i`` the offset ``i * (max diagonal + epsilon)``."""
    sdfs = list(sdfs)
    if not sdfs:
        raise ValueError("need at least one SDF grid")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    spacing = max(g.diagonal for g in sdfs) + epsilon
    offsets = np.zeros((len(sdfs), 3))
    offsets[:, axis] = spacing * np.arange(len(sdfs))
    grids = tuple(g.shifted(off) for g, off in zip(sdfs, offsets))
    offsets.setflags(write=False)
    return StackedSdf(grids, offsets, float(epsilon), axis)


def collision_mask(stacked: StackedSdf, preshape: int, scene, theta, contact_tolerance: float = 0.0) -> np.ndarray:
    """Boolean mask of scene points inside the posed gripper.

    The scene is mapped into the gripper frame with the inverse pose and
    moved by the preshape offset; the SDF itself is never transformed.
    """
    local = apply_transform(inverse(as_pose(theta)), scene) + stacked.offsets[preshape]
    return stacked.query(local, preshape) > contact_tolerance


def colliding_points(
    stacked: StackedSdf, preshape: int, scene, theta, contact_tolerance: float = 0.0
) -> tuple[np.ndarray, int]:
    scene = as_cloud(scene, "scene")
    mask = collision_mask(stacked, preshape, scene, theta, contact_tolerance)
    return scene[mask], int(mask.sum())


def save_sdf(sdf: SdfGrid, path) -> None:
    header = _HEADER.pack(_MAGIC, _VERSION, *sdf.origin, sdf.voxel, *sdf.dims)
    payload = np.ascontiguousarray(sdf.values, dtype="<f4").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def load_sdf(path) -> SdfGrid:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated SDF header")
    magic, version, ox, oy, oz, voxel, nx, ny, nz = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not an SDF cache file (magic={magic!r}, version={version})")
    count = nx * ny * nz
    payload = data[_HEADER.size:]
    if len(payload) != 4 * count:
        raise ValueError(f"{path}: expected {count} values, found {len(payload) // 4}")
    values = np.frombuffer(payload, dtype="<f4").reshape(nx, ny, nz)
    return SdfGrid(np.array([ox, oy, oz]), voxel, values)
