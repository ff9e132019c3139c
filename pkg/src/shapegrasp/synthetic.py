"""Synthetic clouds: primitive surfaces, a two-finger gripper and the
bundled cylinder-on-table scenario."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import GOLDEN_RATIO


def sphere_surface(n: int, radius: float, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Fibonacci lattice on a sphere."""
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    ring = np.sqrt(1.0 - z * z)
    phi = 2.0 * math.pi * i / GOLDEN_RATIO
    return radius * np.column_stack([ring * np.cos(phi), ring * np.sin(phi), z]) + np.asarray(center)


def box_surface(half_extents, n: int, rng: np.random.Generator, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """``n`` points uniformly distributed over the surface of an axis-aligned box."""
    h = np.asarray(half_extents, dtype=float)
    areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
    face = rng.choice(6, size=n, p=np.repeat(areas, 2) / (2.0 * areas.sum()))
    pts = rng.uniform(-h, h, size=(n, 3))
    axis = face // 2
    pts[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0) * h[axis]
    return pts + np.asarray(center)


def box_grid_surface(lo, hi, spacing: float) -> np.ndarray:
    """Regularly spaced points on the six faces of the box ``[lo, hi]``."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    axes = [np.linspace(lo[i], hi[i], max(2, int(round((hi[i] - lo[i]) / spacing)) + 1)) for i in range(3)]
    faces = []
    for ax in range(3):
        u, v = [a for a in range(3) if a != ax]
        uu, vv = np.meshgrid(axes[u], axes[v], indexing="ij")
        for value in (lo[ax], hi[ax]):
            face = np.empty((uu.size, 3))
            face[:, ax] = value
            face[:, u] = uu.ravel()
            face[:, v] = vv.ravel()
            faces.append(face)
    return np.unique(np.vstack(faces).round(12), axis=0)


def cylinder_surface(radius: float, height: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Closed cylinder standing on ``z = 0``, points spread by area."""
    side_area = 2.0 * math.pi * radius * height
    cap_area = math.pi * radius**2
    counts = rng.multinomial(n, np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area))
    ang = rng.uniform(0.0, 2.0 * math.pi, counts[0])
    side = np.column_stack([radius * np.cos(ang), radius * np.sin(ang), rng.uniform(0.0, height, counts[0])])
    caps = []
    for count, z in zip(counts[1:], (0.0, height)):
        r = radius * np.sqrt(rng.uniform(0.0, 1.0, count))
        a = rng.uniform(0.0, 2.0 * math.pi, count)
        caps.append(np.column_stack([r * np.cos(a), r * np.sin(a), np.full(count, z)]))
    return np.vstack([side, *caps])


def table_plane(half_extent: float, spacing: float, z: float = 0.0, hole_radius: float = 0.0) -> np.ndarray:
    """Square grid on the plane ``z``, skipping points under a centred
    footprint of ``hole_radius``."""
    ticks = np.arange(-half_extent, half_extent + 1e-12, spacing)
    xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
    keep = np.hypot(xx, yy) > hole_radius
    return np.column_stack([xx[keep], yy[keep], np.full(keep.sum(), z)])


@dataclass(frozen=True)
class TwoFingerGeometry:
    """Parallel-jaw gripper in its own frame: approach along -z, fingers
    closing along x, tool centre point at the origin."""

    inner_half_gap: float = 0.035
    finger_thickness: float = 0.015
    finger_depth: float = 0.03
    pad_low: float = -0.03
    pad_high: float = 0.03
    palm_z: float = 0.04
    palm_thickness: float = 0.015

    def boxes(self) -> list[tuple[np.ndarray, np.ndarray]]:
        g, w, d = self.inner_half_gap, self.finger_thickness, self.finger_depth / 2
        outer = g + w
        top = self.palm_z + self.palm_thickness
        return [
            (np.array([g, -d, self.pad_low]), np.array([outer, d, self.palm_z])),
            (np.array([-outer, -d, self.pad_low]), np.array([-g, d, self.palm_z])),
            (np.array([-outer, -d, self.palm_z]), np.array([outer, d, top])),
        ]


def two_finger_gripper(geometry: TwoFingerGeometry | None = None, surface_spacing: float = 0.005,
                       full_spacing: float = 0.002) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(inner_surface, full_cloud)`` of a two-finger preshape.

    The inner surface is the pair of finger pads facing each other; the full
    cloud samples the outer surface of the union of palm and fingers.
    """
    geo = geometry or TwoFingerGeometry()
    d = geo.finger_depth / 2
    ys = np.linspace(-d, d, int(round(geo.finger_depth / surface_spacing)) + 1)
    zs = np.linspace(geo.pad_low, geo.pad_high, int(round((geo.pad_high - geo.pad_low) / surface_spacing)) + 1)
    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    pads = [np.column_stack([np.full(yy.size, sign * geo.inner_half_gap), yy.ravel(), zz.ravel()])
            for sign in (1.0, -1.0)]
    surface = np.vstack(pads)

    boxes = geo.boxes()
    pts = np.vstack([box_grid_surface(lo, hi, full_spacing) for lo, hi in boxes])
    strictly_inside = np.zeros(pts.shape[0], dtype=bool)
    for lo, hi in boxes:
        strictly_inside |= np.all((pts > lo + 1e-9) & (pts < hi - 1e-9), axis=1)
    full = np.unique(pts[~strictly_inside].round(12), axis=0)
    return surface, full


def cylinder_scenario(radius: float = 0.03, height: float = 0.12, n_object: int = 1500,
                      table_half_extent: float = 0.15, table_spacing: float = 0.01,
                      seed: int = 7) -> dict:
    """Cylinder standing on a table plus one two-finger preshape.

    Returns a dict with ``object``, ``scene`` (object + table),
    ``gripper_surface`` and ``gripper_full``.
    """
    rng = np.random.default_rng(seed)
    obj = cylinder_surface(radius, height, n_object, rng)
    table = table_plane(table_half_extent, table_spacing, 0.0, hole_radius=radius)
    surface, full = two_finger_gripper()
    return {
        "object": obj,
        "scene": np.vstack([obj, table]),
        "gripper_surface": surface,
        "gripper_full": full,
    }
