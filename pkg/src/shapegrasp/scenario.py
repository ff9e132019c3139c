"""Run a scenario file end to end: load clouds, build or reuse SDFs,
optimize, and write the report and trace."""

from __future__ import annotations

import hashlib
import logging
import time
from pathlib import Path

import numpy as np

from .cloudio import export_trace, load_cloud, load_poses, save_cloud, write_json
from .config import ScenarioConfig
from .geometry import apply_transform, centroid, gaussian_mixture_init, voxel_downsample
from .grasp import GraspConfig, Preshape, build_problem, default_initializations, optimize_grasp
from .optim import SgdConfig, SteinConfig
from .sdf import build_sdf, load_sdf, save_sdf
from .synthetic import cylinder_scenario

log = logging.getLogger(__name__)

REPORT_SCHEMA = "shapegrasp.report/1"


def sdf_cache_key(cloud: np.ndarray, voxel: float, padding: float | None) -> str:
    h = hashlib.sha256(np.ascontiguousarray(cloud, dtype="<f8").tobytes())
    h.update(f"|voxel={voxel!r}|padding={padding!r}".encode())
    return h.hexdigest()


def cached_sdf(cloud: np.ndarray, voxel: float, padding: float | None, cache_dir=None):
    """Build an SDF, reusing ``cache_dir/<key>.sdf`` when present.

    Returns ``(grid, hit)``.
    """
    if cache_dir is None:
        return build_sdf(cloud, voxel, padding), False
    cache_dir = Path(cache_dir)
    path = cache_dir / f"{sdf_cache_key(cloud, voxel, padding)[:32]}.sdf"
    if path.is_file():
        return load_sdf(path), True
    grid = build_sdf(cloud, voxel, padding)
    cache_dir.mkdir(parents=True, exist_ok=True)
    save_sdf(grid, path)
    return grid, False


def load_inputs(cfg: ScenarioConfig):
    """Clouds in meters, downsampled per the config: ``(object, scene, preshapes)``."""
    c = cfg.clouds
    obj = load_cloud(c.object, c.scale)
    if c.object_voxel > 0:
        obj = voxel_downsample(obj, c.object_voxel)
    scene = load_cloud(c.scene, c.scale)
    preshapes = []
    for entry in cfg.preshapes:
        surface = load_cloud(entry.surface, c.scale)
        if c.surface_voxel > 0:
            surface = voxel_downsample(surface, c.surface_voxel)
        preshapes.append(Preshape(entry.name, surface, load_cloud(entry.full, c.scale)))
    return obj, scene, preshapes


def initial_poses(cfg: ScenarioConfig, center, n_preshapes: int) -> list[np.ndarray]:
    i = cfg.init
    if i.mode == "fibonacci":
        poses = default_initializations(center, i.radius, i.n_total, i.n_top, i.n_groups, i.facing, i.up)
        return [poses.copy() for _ in range(n_preshapes)]
    if i.mode == "gaussian-mixture":
        return [gaussian_mixture_init(i.means, i.stddev, i.count, seed=cfg.run.seed + 7919 * p)
                for p in range(n_preshapes)]
    poses = load_poses(i.poses)
    poses[:, :3] *= cfg.clouds.scale
    return [poses.copy() for _ in range(n_preshapes)]


def grasp_config(cfg: ScenarioConfig, trace: bool = False) -> GraspConfig:
    o = cfg.optim
    return GraspConfig(
        k_stein=o.k_stein,
        k_max=o.k_max,
        sgd=SgdConfig(learning_rate=o.learning_rate, preconditioner=o.preconditioner,
                      max_iterations=o.k_max, convergence_threshold=o.convergence_threshold),
        stein=SteinConfig(annealing_cycles=o.annealing_cycles, annealing_exponent=o.annealing_exponent,
                          stein_iterations=o.k_stein, bandwidth=o.bandwidth, step_size=o.stein_step_size,
                          translation_std=o.prior_translation_std, kappa=o.prior_kappa),
        contact_weight=o.contact_weight,
        com_weight=o.com_weight,
        contact_tolerance=o.contact_tolerance,
        seed=cfg.run.seed,
        workers=cfg.run.workers,
        trace=trace,
    )


def _pose_dict(theta) -> dict:
    theta = np.asarray(theta, dtype=float)
    return {"translation": theta[:3].tolist(), "quaternion_wxyz": theta[3:].tolist()}


def _finite(x: float):
    return float(x) if np.isfinite(x) else None


def run_scenario(cfg: ScenarioConfig, report_path=None, trace_path=None) -> dict:
    """Run one scenario and return the report dict.

    The report and trace are written to ``report_path``/``trace_path`` when
    given, else to the config's output paths. Everything outside ``timing``
    depends only on the inputs and the seed.
    """
    t0 = time.perf_counter()
    obj, scene, preshapes = load_inputs(cfg)
    t_load = time.perf_counter()
    sdfs = [cached_sdf(p.full, cfg.sdf.voxel, cfg.sdf.padding, cfg.sdf.cache_dir)[0] for p in preshapes]
    t_sdf = time.perf_counter()

    trace_path = trace_path or cfg.output.trace
    com = centroid(obj)
    inits = initial_poses(cfg, com, len(preshapes))
    problem = build_problem(obj, scene, preshapes, inits, epsilon=cfg.sdf.epsilon,
                            config=grasp_config(cfg, trace=trace_path is not None), sdfs=sdfs)
    sol = optimize_grasp(problem)

    report = {
        "schema": REPORT_SCHEMA,
        "found": sol.found,
        "pose": _pose_dict(sol.theta) if sol.found else None,
        "preshape_id": sol.preshape_id,
        "preshape": sol.preshape_name,
        "loss": _finite(sol.loss),
        "converged": sol.converged,
        "iterations": sol.iterations,
        "tcp_com_distance": None,
        "object_points": int(obj.shape[0]),
        "scene_points": int(scene.shape[0]),
        "particles": [
            {"particle": p.particle, "preshape_id": p.preshape_id, "loss": _finite(p.loss),
             "collision_count": p.collision_count, "converged": p.converged, "pose": _pose_dict(p.theta)}
            for p in sol.particles
        ],
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "timing": {
            "load_s": t_load - t0,
            "sdf_s": t_sdf - t_load,
            "optimize_s": sol.elapsed,
            "wall_clock_s": time.perf_counter() - t0,
        },
    }
    if sol.found:
        tcp = apply_transform(sol.theta, preshapes[sol.preshape_id].tcp[None])[0]
        report["tcp_com_distance"] = float(np.linalg.norm(tcp - com))

    report_path = report_path or cfg.output.report
    if report_path is not None:
        write_json(report, report_path)
    if trace_path is not None:
        export_trace(sol.trace, trace_path)
    return report


DEMO_CONFIG = """\
# Cylinder (r = 0.03 m, h = 0.12 m) standing on a table, one two-finger preshape.
[clouds]
object = "object.ply"
scene = "scene.ply"
object_voxel = 0.0
surface_voxel = 0.0

[[preshapes]]
name = "two_finger"
surface = "gripper_surface.ply"
full = "gripper_full.ply"

[sdf]
cache_dir = "sdf_cache"

[output]
report = "report.json"
"""


def write_demo(directory) -> Path:
    """Write the bundled cylinder scenario and its config; returns the config path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = cylinder_scenario()
    save_cloud(directory / "object.ply", data["object"])
    save_cloud(directory / "scene.ply", data["scene"])
    save_cloud(directory / "gripper_surface.ply", data["gripper_surface"])
    save_cloud(directory / "gripper_full.ply", data["gripper_full"])
    path = directory / "scenario.toml"
    path.write_text(DEMO_CONFIG)
    return path
