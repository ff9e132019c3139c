"""Rigid-transform algebra on quaternion-parameterized poses.

A pose is a length-7 array ``(x, y, z, qw, qx, qy, qz)``: translation in
meters followed by a scalar-first unit quaternion. Point clouds are ``(n, 3)``
float arrays in meters.

The rotation matrix is the homogeneous quadratic form of the quaternion, so
``rotation_jacobian`` gives derivatives w.r.t. the raw (un-normalized) four
components. Optimizers renormalize after every step instead of projecting
onto the tangent space.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

IDENTITY_POSE = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])

UNIT_NORM_TOL = 1e-6

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0


def as_cloud(points, name: str = "cloud") -> np.ndarray:
    """Validate and return an ``(n, 3)`` float64 array."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def as_pose(theta) -> np.ndarray:
    arr = np.asarray(theta, dtype=float).reshape(-1)
    if arr.shape != (7,):
        raise ValueError(f"pose must have 7 components, got {arr.shape}")
    return arr


def make_pose(t=(0.0, 0.0, 0.0), q=(1.0, 0.0, 0.0, 0.0)) -> np.ndarray:
    return np.concatenate([np.asarray(t, dtype=float), np.asarray(q, dtype=float)])


def normalize_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("zero quaternion cannot be normalized")
    return q / norm


def renormalize(theta: np.ndarray) -> np.ndarray:
    """Return a copy of pose(s) with unit quaternion part(s)."""
    out = np.array(theta, dtype=float)
    out[..., 3:7] = normalize_quaternion(out[..., 3:7])
    return out


def _check_unit(q: np.ndarray) -> None:
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ValueError(f"quaternion is not unit length (norm={norm:.9g})")


def quaternion_matrix(q) -> np.ndarray:
    """Homogeneous rotation form of ``q`` without any norm check.

    Equals the rotation matrix for unit quaternions and scales by ``|q|^2``
    otherwise, which is what the raw-component Jacobian differentiates.
    """
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def rotation_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion ``(qw, qx, qy, qz)``."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape != (4,):
        raise ValueError("quaternion must have 4 components")
    _check_unit(q)
    return quaternion_matrix(q)


def rotation_jacobian(q, p) -> np.ndarray:
    """Derivative of ``R(q) @ p`` w.r.t. the raw quaternion components.

    ``p`` may be a single point ``(3,)`` giving a ``(3, 4)`` matrix, or a
    cloud ``(n, 3)`` giving ``(n, 3, 4)``.
    """
    q = np.asarray(q, dtype=float).reshape(-1)
    _check_unit(q)
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    w, v = q[0], q[1:]

    n = pts.shape[0]
    jac = np.empty((n, 3, 4))
    jac[:, :, 0] = 2.0 * (w * pts + np.cross(v, pts))
    vp = pts @ v
    # 2 * ((v.p) I + v p^T - p v^T - w [p]x)
    block = vp[:, None, None] * np.eye(3)
    block = block + v[None, :, None] * pts[:, None, :]
    block = block - pts[:, :, None] * v[None, None, :]
    px, py, pz = pts[:, 0], pts[:, 1], pts[:, 2]
    skew = np.zeros((n, 3, 3))
    skew[:, 0, 1], skew[:, 0, 2] = -pz, py
    skew[:, 1, 0], skew[:, 1, 2] = pz, -px
    skew[:, 2, 0], skew[:, 2, 1] = -py, px
    jac[:, :, 1:] = 2.0 * (block - w * skew)
    return jac[0] if single else jac


def quaternion_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (scalar first)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quaternion_from_matrix(rot) -> np.ndarray:
    """Unit quaternion (``qw >= 0``) of a proper rotation matrix."""
    m = np.asarray(rot, dtype=float)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0.0:
        s = 2.0 * math.sqrt(trace + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2.0)], math.sin(angle / 2.0) * axis])


def rotation_angle(q_a, q_b) -> float:
    """Geodesic angle (radians) between the rotations of two unit quaternions."""
    dot = abs(float(np.dot(normalize_quaternion(q_a), normalize_quaternion(q_b))))
    return 2.0 * math.acos(min(1.0, dot))


def apply_transform(theta, cloud) -> np.ndarray:
    """Map every point ``p`` to ``R(q) p + t``; order is preserved."""
    theta = as_pose(theta)
    pts = as_cloud(cloud)
    rot = rotation_matrix(theta[3:])
    return pts @ rot.T + theta[:3]


def compose(theta_a, theta_b) -> np.ndarray:
    """Pose of ``T_a ∘ T_b`` (apply ``b`` first)."""
    a, b = as_pose(theta_a), as_pose(theta_b)
    t = rotation_matrix(a[3:]) @ b[:3] + a[:3]
    q = quaternion_multiply(a[3:], b[3:])
    return np.concatenate([t, q / np.linalg.norm(q)])


def inverse(theta) -> np.ndarray:
    theta = as_pose(theta)
    q = theta[3:]
    _check_unit(q)
    q_inv = np.array([q[0], -q[1], -q[2], -q[3]])
    t_inv = -quaternion_matrix(q_inv) @ theta[:3]
    return np.concatenate([t_inv, q_inv])


def centroid(cloud) -> np.ndarray:
    pts = as_cloud(cloud)
    if pts.shape[0] == 0:
        raise ValueError("centroid of an empty cloud is undefined")
    return pts.mean(axis=0)


def tool_centre_point(contact_cloud) -> np.ndarray:
    """Centre of the gripper's inner contact surface, in the gripper frame."""
    return centroid(contact_cloud)


def voxel_downsample(cloud, voxel: float) -> np.ndarray:
    """Replace the points of every occupied voxel by their centroid.

    Bins are anchored at the world origin; output is sorted by bin index so
    the result is deterministic.
    """
    if not voxel > 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    pts = as_cloud(cloud)
    if pts.shape[0] == 0:
        return pts.copy()
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inverse_idx, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse_idx = inverse_idx.reshape(-1)
    sums = np.zeros((counts.size, 3))
    np.add.at(sums, inverse_idx, pts)
    return sums / counts[:, None]


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("direction must be non-zero")
    return v / norm


def look_at_quaternion(
    approach_world,
    closing_world,
    approach_local=(0.0, 0.0, -1.0),
    closing_local=(1.0, 0.0, 0.0),
) -> np.ndarray:
    """Quaternion rotating the gripper's local approach/closing axes onto
    the requested world directions.

    ``closing_world`` only needs to be non-parallel to ``approach_world``;
    it is orthogonalized against it.
    """

    def frame(a, c):
        a = _unit(a)
        c = np.asarray(c, dtype=float) - np.dot(c, a) * a
        c = _unit(c)
        return np.column_stack([c, np.cross(a, c), a])

    rot = frame(approach_world, closing_world) @ frame(approach_local, closing_local).T
    return quaternion_from_matrix(rot)


def _horizontal_closing(direction, up, fallback) -> np.ndarray:
    closing = np.cross(direction, up)
    if np.linalg.norm(closing) < 1e-9:
        closing = np.asarray(fallback, dtype=float)
    return _unit(closing)


def fibonacci_quarter_sphere(
    n: int,
    radius: float,
    center=(0.0, 0.0, 0.0),
    facing=(1.0, 0.0, 0.0),
    up=(0.0, 0.0, 1.0),
    approach_local=(0.0, 0.0, -1.0),
    closing_local=(1.0, 0.0, 0.0),
) -> np.ndarray:
    """``n`` poses on the quarter sphere ``{facing·u >= 0, up·u >= 0}``.

    Points follow a golden-ratio lattice in equal-area coordinates: the
    height along ``up × facing`` is stratified uniformly and the azimuth
    in the ``(facing, up)`` plane advances by the golden angle over the
    quarter turn. Each gripper looks at ``center`` with its closing axis
    kept horizontal.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=float)
    e1 = _unit(facing)
    e3 = np.asarray(up, dtype=float) - np.dot(up, e1) * e1
    e3 = _unit(e3)
    e2 = np.cross(e3, e1)

    i = np.arange(n)
    height = 1.0 - (2.0 * i + 1.0) / n
    ring = np.sqrt(np.clip(1.0 - height**2, 0.0, None))
    azimuth = 0.5 * math.pi * np.mod((i + 0.5) / GOLDEN_RATIO, 1.0)

    poses = np.empty((n, 7))
    for k in range(n):
        u = ring[k] * math.cos(azimuth[k]) * e1 + height[k] * e2 + ring[k] * math.sin(azimuth[k]) * e3
        direction = -u
        closing = _horizontal_closing(direction, e3, e2)
        poses[k, :3] = center + radius * u
        poses[k, 3:] = look_at_quaternion(direction, closing, approach_local, closing_local)
    return poses


def top_down_poses(
    n: int,
    radius: float,
    center=(0.0, 0.0, 0.0),
    facing=(1.0, 0.0, 0.0),
    up=(0.0, 0.0, 1.0),
    approach_local=(0.0, 0.0, -1.0),
    closing_local=(1.0, 0.0, 0.0),
) -> np.ndarray:
    """``n`` poses directly above ``center`` with evenly spaced yaw."""
    center = np.asarray(center, dtype=float)
    e3 = _unit(up)
    e1 = np.asarray(facing, dtype=float) - np.dot(facing, e3) * e3
    e1 = _unit(e1)
    e2 = np.cross(e3, e1)
    poses = np.empty((n, 7))
    for k in range(n):
        yaw = 2.0 * math.pi * k / n
        closing = math.cos(yaw) * e1 + math.sin(yaw) * e2
        poses[k, :3] = center + radius * e3
        poses[k, 3:] = look_at_quaternion(-e3, closing, approach_local, closing_local)
    return poses


def gaussian_mixture_init(
    means: Sequence,
    stddev,
    n: int,
    seed: int | None = None,
) -> np.ndarray:
    """Sample ``n`` poses round-robin from Gaussians centred on ``means``.

    ``stddev`` is a scalar or a length-7 per-axis vector; quaternions are
    renormalized after perturbation.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    if means.shape[0] < 1 or means.shape[1] != 7:
        raise ValueError("means must be a non-empty list of 7-vectors")
    if n < 1:
        raise ValueError("n must be >= 1")
    sigma = np.broadcast_to(np.asarray(stddev, dtype=float), (7,))
    rng = np.random.default_rng(seed)
    centres = means[np.arange(n) % means.shape[0]]
    samples = centres + rng.standard_normal((n, 7)) * sigma
    return renormalize(samples)
