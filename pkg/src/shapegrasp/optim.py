"""ICP optimizers: closed-form ICP, SGD-ICP and annealed Stein ICP.

All gradients are taken w.r.t. the 7 raw pose parameters and are the
gradients of *half* the mean squared residual, i.e. the mean of
``residual · Jacobian`` without the factor 2. Quaternions are renormalized
after every update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    apply_transform,
    as_cloud,
    as_pose,
    quaternion_from_matrix,
    renormalize,
    rotation_jacobian,
    rotation_matrix,
)
from .spatial_index import NnIndex, minibatch_schedule, sample_minibatch

BANDWIDTH_FLOOR = 1e-6


@dataclass
class SgdConfig:
    learning_rate: float = 1.0
    # None, a length-7 diagonal, or a full 7x7 matrix
    preconditioner: np.ndarray | None = None
    max_iterations: int = 40
    convergence_threshold: float = 0.0002

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.preconditioner is not None:
            a = np.asarray(self.preconditioner, dtype=float)
            if a.shape == (7,):
                if np.any(a <= 0):
                    raise ValueError("diagonal preconditioner must be positive")
            elif a.shape == (7, 7):
                if not np.allclose(a, a.T) or np.any(np.linalg.eigvalsh(a) <= 0):
                    raise ValueError("preconditioner must be symmetric positive definite")
            else:
                raise ValueError("preconditioner must be a 7-vector or 7x7 matrix")
            self.preconditioner = a

    def precondition(self, grad: np.ndarray) -> np.ndarray:
        a = self.preconditioner
        if a is None:
            return grad
        if a.ndim == 1:
            return grad * a
        return grad @ a.T


@dataclass
class Prior:
    """Gaussian prior on translation, per-component von Mises on rotation.

    ``kappa = 0`` makes the rotation prior uniform.
    """

    translation_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation_std: float | np.ndarray = 1.0
    rotation_mean: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    kappa: float = 0.0


@dataclass
class SteinConfig:
    # (T, C, p) of the annealing schedule; T=None uses the run's k_max
    annealing_cycles: int = 5
    annealing_exponent: float = 2.0
    annealing_period_total: int | None = None
    stein_iterations: int = 15
    bandwidth: float | None = None  # None -> median heuristic every step
    # None -> learning_rate / (n_ref * K)
    step_size: float | None = None
    translation_std: float = 1.0
    kappa: float = 0.0

    def __post_init__(self):
        if self.annealing_cycles < 1:
            raise ValueError("annealing_cycles must be >= 1")
        if not self.annealing_exponent > 0:
            raise ValueError("annealing_exponent must be positive")


def residuals(source, target, theta) -> np.ndarray:
    return apply_transform(theta, source) - target


def half_mean_squared(source, target, theta) -> float:
    """``0.5 * mean ||R s + t - r||^2``, the objective the ICP gradients descend."""
    r = residuals(source, target, theta)
    return 0.5 * float(np.mean(np.sum(r * r, axis=1)))


def sgd_icp_gradients(source, target, theta) -> np.ndarray:
    """Mean point-to-point gradient over matched pairs ``(s_i, r_i)``.

    ``source`` holds the untransformed points; the translation part is the
    mean residual and the rotation part the mean of ``residual · dR/dq s``.
    """
    theta = as_pose(theta)
    src = as_cloud(source, "source")
    if src.shape[0] < 1:
        raise ValueError("need at least one pair")
    res = residuals(src, target, theta)
    jac = rotation_jacobian(theta[3:], src)
    grad = np.empty(7)
    grad[:3] = res.mean(axis=0)
    grad[3:] = np.einsum("ni,nij->j", res, jac) / src.shape[0]
    return grad


def sgd_update(theta, grad, cfg: SgdConfig) -> np.ndarray:
    """``theta - lr * A @ grad`` with the quaternion renormalized.

    Works on a single pose or a stack of poses.
    """
    theta = np.asarray(theta, dtype=float)
    step = cfg.learning_rate * cfg.precondition(np.asarray(grad, dtype=float))
    return renormalize(theta - step)


def match(source_world, index: NnIndex) -> tuple[np.ndarray, np.ndarray]:
    """Nearest reference point for every transformed source point."""
    idx, dist = index.query(source_world)
    return index.points[idx], dist


def icp_closed_form_step(source, reference, theta, index: NnIndex | None = None) -> tuple[np.ndarray, bool]:
    """One matching + SVD (Kabsch) minimisation step.

    Returns ``(theta, ok)``. When the cross-covariance is degenerate the
    rotation is kept and only the translation is re-solved, with
    ``ok = False``.
    """
    theta = as_pose(theta)
    src = as_cloud(source, "source")
    if index is None:
        index = NnIndex(reference)
    matched, _ = match(apply_transform(theta, src), index)

    mu_s, mu_r = src.mean(axis=0), matched.mean(axis=0)
    cov = (matched - mu_r).T @ (src - mu_s)
    u, sv, vt = np.linalg.svd(cov)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        rot = rotation_matrix(theta[3:])
        t = mu_r - rot @ mu_s
        return np.concatenate([t, theta[3:]]), False
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    t = mu_r - rot @ mu_s
    return np.concatenate([t, quaternion_from_matrix(rot)]), True


def rbf_kernel(t1, t2, h: float) -> tuple[float, np.ndarray]:
    """``exp(-|t1 - t2|^2 / h)`` and its gradient w.r.t. ``t1``."""
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    diff = np.asarray(t1, dtype=float) - np.asarray(t2, dtype=float)
    value = math.exp(-float(diff @ diff) / h)
    return value, -2.0 / h * value * diff


def rotation_kernel(q1, q2) -> tuple[float, np.ndarray]:
    """``|q1 · q2|`` and its (sub)gradient ``sign(q1 · q2) q2`` w.r.t. ``q1``."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    dot = float(q1 @ q2)
    return abs(dot), np.sign(dot) * q2


def median_bandwidth(translations) -> float:
    """Median squared pairwise distance over ``log(K + 1)``, floored."""
    t = np.asarray(translations, dtype=float).reshape(-1, 3)
    k = t.shape[0]
    if k < 2:
        return 1.0
    sq = np.sum((t[:, None, :] - t[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(k, 1)
    h = float(np.median(sq[iu])) / math.log(k + 1.0)
    return max(h, BANDWIDTH_FLOOR)


def log_prior(theta, prior: Prior) -> float:
    """Unnormalized log density of the pose prior."""
    theta = as_pose(theta)
    sigma = np.broadcast_to(np.asarray(prior.translation_std, dtype=float), (3,))
    z = (theta[:3] - prior.translation_mean) / sigma
    rot = prior.kappa * np.sum(np.cos(theta[3:] - prior.rotation_mean))
    return float(-0.5 * z @ z + rot)


def prior_log_gradient(theta, prior: Prior) -> np.ndarray:
    theta = as_pose(theta)
    sigma = np.broadcast_to(np.asarray(prior.translation_std, dtype=float), (3,))
    grad = np.empty(7)
    grad[:3] = -(theta[:3] - prior.translation_mean) / sigma**2
    grad[3:] = -prior.kappa * np.sin(theta[3:] - prior.rotation_mean)
    return grad


def annealing(t: float, T: float, C: float, p: float) -> float:
    """Cyclic annealing factor ``(mod(t, T/C) / (T/C)) ** p`` in ``[0, 1)``."""
    if C < 1 or not T > 0:
        raise ValueError("annealing requires T > 0 and C >= 1")
    if not p > 0:
        raise ValueError("annealing exponent must be positive")
    period = T / C
    return (math.fmod(t, period) / period) ** p


def svgd_direction(
    thetas,
    likelihood_grads,
    gamma: float,
    n_ref: int,
    prior_grads=None,
    bandwidth: float | None = None,
) -> np.ndarray:
    """Annealed Stein update directions for a particle population.

    The driving term per particle is the gradient of the negative log
    posterior ``n_ref * g - grad log p``. Translation uses the RBF kernel,
    rotation the absolute dot-product kernel. The rotation repulsion is the
    negative gradient of the dot kernel w.r.t. the updated particle,
    projected onto the tangent of the unit sphere, so a particle exerts no
    force on itself.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    grads = np.atleast_2d(np.asarray(likelihood_grads, dtype=float))
    if thetas.shape != grads.shape or thetas.shape[1] != 7:
        raise ValueError("thetas and gradients must both be (K, 7)")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite likelihood gradient")
    drive = n_ref * grads
    if prior_grads is not None:
        drive = drive - np.asarray(prior_grads, dtype=float)

    t, q = thetas[:, :3], thetas[:, 3:]
    h = median_bandwidth(t) if bandwidth is None else bandwidth
    diff = t[:, None, :] - t[None, :, :]  # [i, j] = t_i - t_j
    k_t = np.exp(-np.sum(diff**2, axis=-1) / h)  # symmetric
    dots = q @ q.T  # [i, j] = q_i · q_j
    k_q = np.abs(dots)

    out = np.empty_like(thetas)
    out[:, :3] = -gamma * (k_t @ drive[:, :3]) + (2.0 / h) * np.einsum("ij,ijd->id", k_t, diff)
    sign = np.sign(dots)
    tangent = q[None, :, :] - dots[:, :, None] * q[:, None, :]  # [i, j] = q_j - (q_i·q_j) q_i
    repulse_q = -np.einsum("ij,ijd->id", sign, tangent)
    out[:, 3:] = -gamma * (k_q @ drive[:, 3:]) + repulse_q
    return out


def svgd_update(thetas, directions, step: float) -> np.ndarray:
    """``theta_j + step * phi(theta_j)`` with quaternions renormalized."""
    thetas = np.asarray(thetas, dtype=float)
    directions = np.asarray(directions, dtype=float)
    if thetas.shape != directions.shape:
        raise ValueError("particles and directions must have matching shapes")
    return renormalize(thetas + step * directions)


def rotation_preconditioner(source, translation_scale: float = 1.0) -> np.ndarray:
    """Diagonal preconditioner that scales quaternion steps by the inverse
    Gauss-Newton curvature of the source's largest principal moment.

    With it a unit learning rate takes near-Newton rotation steps instead of
    steps proportional to the squared cloud radius.
    """
    src = as_cloud(source, "source")
    inertia = np.mean(np.sum(src**2, axis=1)) * np.eye(3) - src.T @ src / src.shape[0]
    curvature = 4.0 * float(np.linalg.eigvalsh(inertia)[-1])
    diag = np.full(7, translation_scale)
    diag[3:] = 1.0 / max(curvature, 1e-12)
    return diag


@dataclass
class IcpResult:
    theta: np.ndarray
    iterations: int
    converged: bool
    losses: list


def sgd_icp(
    source,
    reference,
    theta0,
    cfg: SgdConfig | None = None,
    seed: int | None = 0,
    use_schedule: bool = True,
) -> IcpResult:
    """SGD-ICP registration of ``source`` onto ``reference``.

    Each iteration matches every transformed source point to its nearest
    neighbour in a mini-batch of the reference (ramped by
    :func:`minibatch_schedule`) and takes one preconditioned step. Stops
    after ``cfg.max_iterations`` or once the batch is full and the relative
    loss change drops below the threshold.
    """
    cfg = cfg or SgdConfig()
    src = as_cloud(source, "source")
    ref = as_cloud(reference, "reference")
    rng = np.random.default_rng(seed)
    theta = renormalize(as_pose(theta0))
    k_max = cfg.max_iterations
    full_index = NnIndex(ref)
    losses: list[float] = []
    prev = None
    converged = False
    k = 0
    for k in range(k_max):
        m = minibatch_schedule(k, k_max, ref.shape[0]) if use_schedule else ref.shape[0]
        index = full_index if m == ref.shape[0] else NnIndex(sample_minibatch(ref, m, rng))
        target, _ = match(apply_transform(theta, src), index)
        loss = half_mean_squared(src, target, theta)
        losses.append(loss)
        if m == ref.shape[0] and (loss == 0.0 or (prev and abs(loss - prev) / prev <= cfg.convergence_threshold)):
            converged = True
            break
        prev = loss
        theta = sgd_update(theta, sgd_icp_gradients(src, target, theta), cfg)
    return IcpResult(theta, k + 1, converged, losses)


@dataclass
class SteinRun:
    particles: np.ndarray
    trajectory: np.ndarray  # (iterations + 1, K, 7)
    gammas: list


def annealed_stein_icp(
    source,
    reference,
    particles0,
    k_max: int,
    k_stein: int | None = None,
    stein: SteinConfig | None = None,
    sgd: SgdConfig | None = None,
    priors: list | None = None,
    seed: int = 0,
    use_schedule: bool = True,
) -> SteinRun:
    """Annealed Stein ICP for ``k_stein`` iterations, then independent
    SGD-ICP refinement up to ``k_max``.

    Particle ``j`` draws its mini-batches from its own stream seeded with
    ``seed + j``.
    """
    stein = stein or SteinConfig()
    sgd = sgd or SgdConfig()
    k_stein = stein.stein_iterations if k_stein is None else k_stein
    src = as_cloud(source, "source")
    ref = as_cloud(reference, "reference")
    n_ref = ref.shape[0]
    thetas = renormalize(np.atleast_2d(np.asarray(particles0, dtype=float)))
    n_particles = thetas.shape[0]
    rngs = [np.random.default_rng(seed + j) for j in range(n_particles)]
    if priors is None:
        priors = [Prior(thetas[j, :3].copy(), stein.translation_std, thetas[j, 3:].copy(), stein.kappa)
                  for j in range(n_particles)]
    step = stein.step_size
    if step is None:
        step = sgd.learning_rate / (n_ref * n_particles)
    period_total = stein.annealing_period_total or k_max
    full_index = NnIndex(ref)

    trajectory = [thetas.copy()]
    gammas = []
    for k in range(k_max):
        m = minibatch_schedule(k, k_max, n_ref) if use_schedule else n_ref
        grads = np.empty_like(thetas)
        for j in range(n_particles):
            index = full_index if m == n_ref else NnIndex(sample_minibatch(ref, m, rngs[j]))
            target, _ = match(apply_transform(thetas[j], src), index)
            grads[j] = sgd_icp_gradients(src, target, thetas[j])
        if k < k_stein:
            gamma = annealing(k, period_total, stein.annealing_cycles, stein.annealing_exponent)
            gammas.append(gamma)
            prior_grads = np.stack([prior_log_gradient(thetas[j], priors[j]) for j in range(n_particles)])
            phi = svgd_direction(thetas, grads, gamma, n_ref, prior_grads, stein.bandwidth)
            thetas = svgd_update(thetas, phi, step)
        else:
            thetas = sgd_update(thetas, grads, sgd)
        trajectory.append(thetas.copy())
    return SteinRun(thetas, np.stack(trajectory), gammas)

