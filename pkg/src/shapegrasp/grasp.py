"""Grasp losses, gradients and the parallel shape-matching orchestrator.

A grasp pose maps the gripper frame into the object frame. Each particle
matches the posed inner surface of its preshape against a mini-batch of the
object cloud, is pulled towards the object's centre of mass through the
tool centre point, and switches to a collision-escape gradient whenever a
scene point falls inside the gripper's SDF. The first ``k_stein``
iterations couple the particles of each preshape through annealed Stein
updates; the remaining iterations refine each particle with plain SGD-ICP.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    apply_transform,
    as_cloud,
    as_pose,
    centroid,
    fibonacci_quarter_sphere,
    renormalize,
    rotation_jacobian,
    rotation_matrix,
    tool_centre_point,
    top_down_poses,
)
from .optim import (
    Prior,
    SgdConfig,
    SteinConfig,
    annealing,
    match,
    prior_log_gradient,
    sgd_update,
    svgd_direction,
    svgd_update,
)
from .sdf import StackedSdf, build_sdf, collision_mask, stack_preshapes
from .spatial_index import NnIndex, minibatch_schedule, sample_minibatch

log = logging.getLogger(__name__)

PHASE_STEIN = "stein"
PHASE_SGD = "sgd"


def contact_loss(transformed, targets, m: int | None = None) -> float:
    """Sum of squared pair distances over ``m`` (default: the pair count)."""
    diff = np.asarray(transformed, dtype=float) - np.asarray(targets, dtype=float)
    m = diff.shape[0] if m is None else m
    if m < 1:
        raise ValueError("need at least one pair")
    return float(np.sum(diff * diff) / m)


def com_loss(theta, tcp, com) -> float:
    theta = as_pose(theta)
    r = rotation_matrix(theta[3:]) @ np.asarray(tcp, dtype=float) + theta[:3] - np.asarray(com, dtype=float)
    return float(r @ r)


def total_loss(contact: float, com: float, contact_weight: float = 1.0, com_weight: float = 1.0) -> float:
    return contact_weight * contact + com_weight * com


def grasp_gradients(source, targets, theta, tcp, com, m: int | None = None,
                    contact_weight: float = 1.0, com_weight: float = 1.0) -> np.ndarray:
    """Gradient of half the weighted grasp loss under frozen matching.

    The contact part averages ``residual · Jacobian`` over the ``m`` pairs;
    the centre-of-mass part is the single TCP residual with its Jacobian at
    the TCP, added at weight ``com_weight``.
    """
    theta = as_pose(theta)
    src = as_cloud(source, "source")
    m = src.shape[0] if m is None else m
    if m < 1:
        raise ValueError("m must be >= 1")
    q = theta[3:]
    rot = rotation_matrix(q)
    grad = np.zeros(7)
    if src.shape[0]:
        res = src @ rot.T + theta[:3] - targets
        grad[:3] = contact_weight * res.sum(axis=0) / m
        grad[3:] = contact_weight * np.einsum("ni,nij->j", res, rotation_jacobian(q, src)) / m
    tcp = np.asarray(tcp, dtype=float)
    com_res = rot @ tcp + theta[:3] - np.asarray(com, dtype=float)
    grad[:3] += com_weight * com_res
    grad[3:] += com_weight * com_res @ rotation_jacobian(q, tcp)
    return grad


def collision_loss_and_gradients(colliding, gripper_surface, theta) -> tuple[float, np.ndarray]:
    """Escape loss for scene points inside the gripper.

    Every colliding scene point is matched to its nearest point of the posed
    inner surface (the reverse of the contact matching). The loss is the mean
    squared distance; the gradient moves the matched surface points onto the
    colliding points, i.e. wraps the grasp region around them.
    """
    theta = as_pose(theta)
    col = as_cloud(colliding, "colliding points")
    if col.shape[0] == 0:
        raise ValueError("collision loss needs at least one colliding point")
    surface = as_cloud(gripper_surface, "gripper surface")
    posed = apply_transform(theta, surface)
    idx, dist = NnIndex(posed).query(col)
    src = surface[idx]
    res = posed[idx] - col
    grad = np.empty(7)
    grad[:3] = res.mean(axis=0)
    grad[3:] = np.einsum("ni,nij->j", res, rotation_jacobian(theta[3:], src)) / col.shape[0]
    return float(np.mean(dist**2)), grad


def convergence_check(loss: float, previous: float | None, threshold: float, in_collision: bool = False) -> bool:
    """Relative loss change within ``threshold`` and no collision."""
    if in_collision or previous is None:
        return False
    if previous <= 0.0:
        return loss == previous
    return abs(loss - previous) / previous <= threshold


@dataclass
class Preshape:
    name: str
    surface: np.ndarray
    full: np.ndarray
    sdf_index: int = 0
    tcp: np.ndarray = field(init=False)

    def __post_init__(self):
        self.surface = as_cloud(self.surface, f"{self.name} surface")
        self.full = as_cloud(self.full, f"{self.name} full cloud")
        if self.surface.shape[0] == 0 or self.full.shape[0] == 0:
            raise ValueError(f"preshape {self.name!r} has an empty cloud")
        self.tcp = tool_centre_point(self.surface)


@dataclass
class GraspConfig:
    """Run settings: 15 Stein then 25 SGD iterations, unit learning rate and cost weights."""

    k_stein: int = 15
    k_max: int = 40
    sgd: SgdConfig = field(default_factory=SgdConfig)
    stein: SteinConfig = field(default_factory=SteinConfig)
    contact_weight: float = 1.0
    com_weight: float = 1.0
    contact_tolerance: float = 0.0
    freeze_converged: bool = True
    seed: int = 0
    workers: int = 1
    trace: bool = False

    def __post_init__(self):
        if not 0 <= self.k_stein <= self.k_max:
            raise ValueError("need 0 <= k_stein <= k_max")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class GraspProblem:
    object_cloud: np.ndarray
    scene_cloud: np.ndarray
    preshapes: list
    initializations: list  # one (K_p, 7) array per preshape
    sdf: StackedSdf
    config: GraspConfig = field(default_factory=GraspConfig)
    com: np.ndarray | None = None

    def __post_init__(self):
        self.object_cloud = as_cloud(self.object_cloud, "object cloud")
        self.scene_cloud = as_cloud(self.scene_cloud, "scene cloud")
        if self.object_cloud.shape[0] == 0:
            raise ValueError("object cloud is empty")
        if len(self.initializations) != len(self.preshapes):
            raise ValueError("need one initialization array per preshape")
        if len(self.sdf) < len(self.preshapes):
            raise ValueError("stacked SDF has fewer grids than preshapes")
        if self.com is None:
            self.com = centroid(self.object_cloud)


@dataclass
class ParticleState:
    theta: np.ndarray
    preshape_id: int
    loss: float = float("nan")
    in_collision: bool = False
    collision_count: int = 0
    converged: bool = False
    phase: str = PHASE_STEIN
    active: bool = True
    previous_loss: float | None = None


@dataclass
class ParticleSummary:
    particle: int
    preshape_id: int
    theta: np.ndarray
    loss: float
    collision_count: int
    converged: bool


@dataclass
class GraspSolution:
    found: bool
    theta: np.ndarray | None
    preshape_id: int | None
    preshape_name: str | None
    loss: float
    converged: bool
    iterations: int
    particles: list
    trace: list
    elapsed: float

    @property
    def best_attempt(self) -> ParticleSummary:
        """Lowest-loss particle regardless of collisions (diagnostics)."""
        return min(self.particles, key=lambda p: (p.collision_count, p.loss))


def build_problem(object_cloud, scene_cloud, preshapes, initializations, sdf_voxel: float = 0.0025,
                  sdf_padding: float | None = None, epsilon: float = 0.05,
                  config: GraspConfig | None = None, sdfs=None) -> GraspProblem:
    """Assemble a problem, building the preshape SDFs unless given."""
    if sdfs is None:
        sdfs = [build_sdf(p.full, sdf_voxel, sdf_padding) for p in preshapes]
    for i, p in enumerate(preshapes):
        p.sdf_index = i
    return GraspProblem(object_cloud, scene_cloud, list(preshapes), [np.atleast_2d(x) for x in initializations],
                        stack_preshapes(sdfs, epsilon), config or GraspConfig())


class _Evaluator:
    """Per-particle work of one iteration: matching, losses, collision test."""

    def __init__(self, problem: GraspProblem):
        self.problem = problem
        self.cfg = problem.config
        self.reference = problem.object_cloud
        self.full_index = NnIndex(self.reference)

    def __call__(self, args):
        state, rng, m = args
        p = self.problem
        cfg = self.cfg
        preshape = p.preshapes[state.preshape_id]
        theta = state.theta
        posed = apply_transform(theta, preshape.surface)
        if m >= self.reference.shape[0]:
            index = self.full_index
        else:
            index = NnIndex(sample_minibatch(self.reference, m, rng))
        targets, _ = match(posed, index)
        loss = total_loss(contact_loss(posed, targets), com_loss(theta, preshape.tcp, p.com),
                          cfg.contact_weight, cfg.com_weight)
        grad = grasp_gradients(preshape.surface, targets, theta, preshape.tcp, p.com,
                               contact_weight=cfg.contact_weight, com_weight=cfg.com_weight)
        mask = collision_mask(p.sdf, preshape.sdf_index, p.scene_cloud, theta, cfg.contact_tolerance)
        count = int(mask.sum())
        if count:
            loss, grad = collision_loss_and_gradients(p.scene_cloud[mask], preshape.surface, theta)
        return loss, grad, count


def final_loss(problem: GraspProblem, preshape_id: int, theta) -> tuple[float, int]:
    """Loss against the full object cloud and colliding scene point count."""
    cfg = problem.config
    preshape = problem.preshapes[preshape_id]
    posed = apply_transform(theta, preshape.surface)
    targets, _ = match(posed, NnIndex(problem.object_cloud))
    loss = total_loss(contact_loss(posed, targets), com_loss(theta, preshape.tcp, problem.com),
                      cfg.contact_weight, cfg.com_weight)
    count = int(collision_mask(problem.sdf, preshape.sdf_index, problem.scene_cloud, theta,
                               cfg.contact_tolerance).sum())
    return loss, count


def optimize_grasp(problem: GraspProblem) -> GraspSolution:
    """Run annealed Stein ICP then SGD-ICP on every particle and return the
    lowest-loss collision-free pose.

    Results depend only on ``config.seed``: particle ``j`` samples its
    mini-batches from a stream seeded with ``seed + j`` and all cross-particle
    updates happen after the parallel evaluation barrier, so the worker count
    does not change the outcome.
    """
    cfg = problem.config
    start = time.perf_counter()
    states: list[ParticleState] = []
    for pid, inits in enumerate(problem.initializations):
        for theta in renormalize(np.asarray(inits, dtype=float).reshape(-1, 7)):
            states.append(ParticleState(theta=theta, preshape_id=pid))
    if not states:
        raise ValueError("no initial poses given")
    rngs = [np.random.default_rng(cfg.seed + j) for j in range(len(states))]
    priors = [Prior(s.theta[:3].copy(), cfg.stein.translation_std, s.theta[3:].copy(), cfg.stein.kappa)
              for s in states]
    groups = [np.array([j for j, s in enumerate(states) if s.preshape_id == pid], dtype=int)
              for pid in range(len(problem.preshapes))]
    n_ref = problem.object_cloud.shape[0]
    period_total = cfg.stein.annealing_period_total or cfg.k_max
    evaluate = _Evaluator(problem)
    trace: list[dict] = []

    iterations = 0
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        for k in range(cfg.k_max):
            phase = PHASE_STEIN if k < cfg.k_stein else PHASE_SGD
            active = [j for j, s in enumerate(states) if s.active]
            if not active:
                break
            iterations = k + 1
            m = minibatch_schedule(k, cfg.k_max, n_ref)
            results = list(pool.map(evaluate, [(states[j], rngs[j], m) for j in active]))
            grads = np.zeros((len(states), 7))
            for j, (loss, grad, count) in zip(active, results):
                s = states[j]
                s.in_collision = count > 0
                s.collision_count = count
                s.converged = convergence_check(loss, s.previous_loss, cfg.sgd.convergence_threshold,
                                                s.in_collision)
                s.previous_loss = s.loss = loss
                s.phase = phase
                grads[j] = grad
                if cfg.trace:
                    trace.append({
                        "iteration": k, "particle": j, "preshape": s.preshape_id, "phase": phase,
                        "loss": loss, "in_collision": s.in_collision, "collision_count": count,
                        "theta": s.theta.tolist(),
                    })

            if phase == PHASE_STEIN:
                gamma = annealing(k, period_total, cfg.stein.annealing_cycles, cfg.stein.annealing_exponent)
                for idx in groups:
                    if idx.size == 0:
                        continue
                    thetas = np.stack([states[j].theta for j in idx])
                    prior_grads = np.stack([prior_log_gradient(states[j].theta, priors[j]) for j in idx])
                    phi = svgd_direction(thetas, grads[idx], gamma, n_ref, prior_grads, cfg.stein.bandwidth)
                    step = cfg.stein.step_size
                    if step is None:
                        step = cfg.sgd.learning_rate / (n_ref * idx.size)
                    updated = svgd_update(thetas, phi, step)
                    for row, j in enumerate(idx):
                        states[j].theta = updated[row]
            else:
                for j in active:
                    s = states[j]
                    if s.converged and cfg.freeze_converged:
                        s.active = False
                        continue
                    s.theta = sgd_update(s.theta, grads[j], cfg.sgd)

    summaries = []
    for j, s in enumerate(states):
        loss, count = final_loss(problem, s.preshape_id, s.theta)
        summaries.append(ParticleSummary(j, s.preshape_id, s.theta.copy(), loss, count,
                                         s.converged and count == 0))
    elapsed = time.perf_counter() - start
    feasible = [p for p in summaries if p.collision_count == 0]
    if not feasible:
        log.warning("no collision-free particle among %d", len(summaries))
        return GraspSolution(False, None, None, None, float("inf"), False, iterations, summaries, trace, elapsed)
    best = min(feasible, key=lambda p: (p.loss, p.particle))
    return GraspSolution(True, best.theta, best.preshape_id, problem.preshapes[best.preshape_id].name,
                         best.loss, best.converged, iterations, summaries, trace, elapsed)


def particles_per_preshape(n_total: int = 100, n_top: int = 6, n_groups: int = 4) -> tuple[int, int]:
    """Split an initialization budget into (quarter-sphere, top-down) counts."""
    if n_total < n_top or n_groups < 1:
        raise ValueError("need n_total >= n_top and n_groups >= 1")
    return (n_total - n_top) // n_groups, n_top


def default_initializations(center, radius: float = 0.3, n_total: int = 100, n_top: int = 6,
                            n_groups: int = 4, facing=(1.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Quarter-sphere Fibonacci poses plus top-down poses around ``center``."""
    n_quarter, n_top = particles_per_preshape(n_total, n_top, n_groups)
    parts = []
    if n_quarter:
        parts.append(fibonacci_quarter_sphere(n_quarter, radius, center, facing, up))
    if n_top:
        parts.append(top_down_poses(n_top, radius, center, facing, up))
    return np.vstack(parts)
