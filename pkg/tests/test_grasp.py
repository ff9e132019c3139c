import math

import numpy as np
import pytest

from shapegrasp.geometry import (
    IDENTITY_POSE,
    apply_transform,
    centroid,
    look_at_quaternion,
    make_pose,
    quaternion_from_axis_angle,
    quaternion_matrix,
    rotation_angle,
)
from shapegrasp.grasp import (
    GraspConfig,
    Preshape,
    build_problem,
    collision_loss_and_gradients,
    com_loss,
    contact_loss,
    convergence_check,
    default_initializations,
    grasp_gradients,
    optimize_grasp,
    particles_per_preshape,
    total_loss,
)
from shapegrasp.optim import SgdConfig, rotation_preconditioner
from shapegrasp.sdf import colliding_points
from shapegrasp.synthetic import box_grid_surface, cylinder_scenario

from conftest import central_difference, random_pose, rel_err


def raw_grasp_objective(source, targets, tcp, com):
    """Half of contact + CoM loss over raw pose components, matching frozen."""
    def f(theta):
        rot = quaternion_matrix(theta[3:])
        r = source @ rot.T + theta[:3] - targets
        c = rot @ tcp + theta[:3] - com
        return 0.5 * (np.mean(np.sum(r * r, axis=1)) + c @ c)
    return f


class TestLosses:
    def test_contact_examples(self, rng):
        pts = rng.standard_normal((5, 3))
        assert contact_loss(pts, pts) == 0.0
        assert contact_loss([[0.1, 0, 0]], [[0, 0, 0]]) == pytest.approx(0.01)
        a, b = rng.standard_normal((40, 3)), rng.standard_normal((40, 3))
        assert contact_loss(a, b) == pytest.approx(np.mean([np.sum((x - y) ** 2) for x, y in zip(a, b)]))

    def test_com_examples(self, rng):
        assert com_loss(IDENTITY_POSE, [0, 0, 0], [0, 0, 0.1]) == pytest.approx(0.01)
        theta = random_pose(rng)
        tcp = rng.standard_normal(3)
        com = apply_transform(theta, tcp)[0]
        assert com_loss(theta, tcp, com) == pytest.approx(0.0, abs=1e-28)
        com = rng.standard_normal(3)
        expected = np.sum((quaternion_matrix(theta[3:]) @ tcp + theta[:3] - com) ** 2)
        assert com_loss(theta, tcp, com) == pytest.approx(expected)

    def test_total(self):
        assert total_loss(0.0, 0.0) == 0.0
        assert total_loss(0.01, 0.04) == pytest.approx(0.05)
        assert total_loss(0.02, 0.04) > total_loss(0.01, 0.04)
        assert total_loss(0.01, 0.05) > total_loss(0.01, 0.04)


class TestGraspGradients:
    def test_zero_when_aligned(self, rng):
        theta = random_pose(rng)
        src = rng.standard_normal((10, 3))
        tcp = centroid(src)
        grad = grasp_gradients(src, apply_transform(theta, src), theta, tcp, apply_transform(theta, tcp)[0])
        np.testing.assert_allclose(grad, 0.0, atol=1e-14)

    def test_com_term_only(self, rng):
        for _ in range(100):
            theta, tcp, com = random_pose(rng), rng.standard_normal(3) * 0.1, rng.standard_normal(3) * 0.1
            grad = grasp_gradients(np.empty((0, 3)), np.empty((0, 3)), theta, tcp, com, m=1)

            def f(x):
                c = quaternion_matrix(x[3:]) @ tcp + x[:3] - com
                return 0.5 * c @ c
            assert rel_err(grad, central_difference(f, theta)) <= 1e-4

    def test_full_finite_differences(self, rng):
        worst = 0.0
        for _ in range(100):
            src = rng.standard_normal((12, 3)) * 0.05
            tgt = rng.standard_normal((12, 3)) * 0.05
            theta, com = random_pose(rng), rng.standard_normal(3) * 0.05
            tcp = centroid(src)
            fd = central_difference(raw_grasp_objective(src, tgt, tcp, com), theta)
            worst = max(worst, rel_err(grasp_gradients(src, tgt, theta, tcp, com), fd))
        assert worst <= 1e-4

    def test_weights(self, rng):
        src, tgt = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        theta, tcp, com = random_pose(rng), rng.standard_normal(3), rng.standard_normal(3)
        base = grasp_gradients(src, tgt, theta, tcp, com, contact_weight=1.0, com_weight=0.0)
        com_only = grasp_gradients(src, tgt, theta, tcp, com, contact_weight=0.0, com_weight=1.0)
        both = grasp_gradients(src, tgt, theta, tcp, com, contact_weight=2.0, com_weight=3.0)
        np.testing.assert_allclose(both, 2 * base + 3 * com_only, atol=1e-14)


class TestCollisionLoss:
    def test_examples(self):
        surface = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        loss, _ = collision_loss_and_gradients([[1.0, 0, 0]], surface, IDENTITY_POSE)
        assert loss == 0.0
        loss, _ = collision_loss_and_gradients([[1.0, 0.02, 0]], surface, IDENTITY_POSE)
        assert loss == pytest.approx(4e-4)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            collision_loss_and_gradients(np.empty((0, 3)), [[0, 0, 0]], IDENTITY_POSE)

    def test_finite_differences(self, rng):
        worst = 0.0
        for _ in range(100):
            surface = rng.standard_normal((30, 3)) * 0.05
            theta = random_pose(rng, 0.05)
            colliding = apply_transform(theta, surface[:10]) + rng.standard_normal((10, 3)) * 0.01
            _, grad = collision_loss_and_gradients(colliding, surface, theta)
            # freeze the colliding -> surface matching at theta
            posed = apply_transform(theta, surface)
            idx = np.argmin(np.linalg.norm(colliding[:, None] - posed[None], axis=-1), axis=1)
            src = surface[idx]

            def f(x):
                r = src @ quaternion_matrix(x[3:]).T + x[:3] - colliding
                return 0.5 * np.mean(np.sum(r * r, axis=1))
            worst = max(worst, rel_err(grad, central_difference(f, theta)))
        assert worst <= 1e-4

    def test_descent_moves_surface_to_points(self, rng):
        surface = rng.standard_normal((30, 3)) * 0.05
        colliding = rng.standard_normal((5, 3)) * 0.05 + [0.02, 0, 0]
        loss0, grad = collision_loss_and_gradients(colliding, surface, IDENTITY_POSE)
        loss1, _ = collision_loss_and_gradients(colliding, surface, np.r_[-1e-3 * grad[:3], 1, 0, 0, 0])
        assert loss1 < loss0


class TestConvergence:
    def test_examples(self):
        assert convergence_check(1.0, 1.0, 0.0002)
        assert not convergence_check(1.0, 1.0, 0.0002, in_collision=True)
        assert not convergence_check(1.01, 1.0, 0.0002)
        assert not convergence_check(1.0, None, 0.0002)


def test_particle_budget():
    assert particles_per_preshape(100, 6, 4) == (23, 6)
    poses = default_initializations([0, 0, 0.06])
    assert poses.shape == (29, 7)


@pytest.fixture(scope="module")
def cylinder():
    return cylinder_scenario()


def cylinder_problem(data, inits, **cfg):
    preshape = Preshape("two_finger", data["gripper_surface"], data["gripper_full"])
    return build_problem(data["object"], data["scene"], [preshape], [inits], config=GraspConfig(**cfg))


class TestOptimize:
    def test_self_matching(self):
        surface = box_grid_surface([-0.03, -0.02, -0.01], [0.03, 0.02, 0.01], 0.004)
        full = box_grid_surface([-0.03, -0.02, -0.01], [0.03, 0.02, 0.01], 0.002)
        start = make_pose([0.004, -0.003, 0.002], quaternion_from_axis_angle([1, 2, 0.5], math.radians(4)))
        cfg = GraspConfig(k_stein=0, k_max=60, sgd=SgdConfig(preconditioner=rotation_preconditioner(surface)))
        problem = build_problem(surface, [[5.0, 5.0, 5.0]], [Preshape("box", surface, full)], [start[None]],
                                config=cfg)
        sol = optimize_grasp(problem)
        assert sol.found and sol.loss < 1e-4
        assert np.linalg.norm(sol.theta[:3]) < 1e-3
        assert math.degrees(rotation_angle(sol.theta[3:], [1, 0, 0, 0])) < 1.0

    def test_start_in_collision(self, cylinder):
        q = look_at_quaternion([-1, 0, -0.2], [0, 1, 0])
        start = np.r_[0.0, 0.02, 0.06, q]
        problem = cylinder_problem(cylinder, start[None], trace=True)
        sol = optimize_grasp(problem)
        first = sol.trace[0]
        assert first["in_collision"] and first["collision_count"] > 0
        # the first step uses the collision loss, not the grasp loss
        colliding, _ = colliding_points(problem.sdf, 0, cylinder["scene"], start)
        expected, _ = collision_loss_and_gradients(colliding, problem.preshapes[0].surface, start)
        assert first["loss"] == pytest.approx(expected, rel=1e-12)
        assert sol.found and sol.particles[0].collision_count == 0

    def test_trace_counts(self, cylinder):
        inits = default_initializations(centroid(cylinder["object"]), n_total=10, n_top=2, n_groups=4)
        problem = cylinder_problem(cylinder, inits, k_stein=2, k_max=3, trace=True, freeze_converged=False)
        sol = optimize_grasp(problem)
        assert len(sol.trace) == 3 * inits.shape[0]
        assert {r["phase"] for r in sol.trace} == {"stein", "sgd"}

    def test_no_grasp(self, cylinder):
        # scene cloud that fills the whole workspace: every pose collides
        ticks = np.arange(-0.2, 0.2, 0.01)
        cube = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), -1).reshape(-1, 3)
        preshape = Preshape("two_finger", cylinder["gripper_surface"], cylinder["gripper_full"])
        inits = default_initializations(centroid(cylinder["object"]), radius=0.1, n_total=6, n_top=2, n_groups=4)
        problem = build_problem(cylinder["object"], cube, [preshape], [inits],
                                config=GraspConfig(k_stein=2, k_max=4))
        sol = optimize_grasp(problem)
        assert not sol.found and sol.theta is None
        assert sol.best_attempt.collision_count > 0

    def test_collision_free_and_near_com(self, cylinder):
        com = centroid(cylinder["object"])
        problem = cylinder_problem(cylinder, default_initializations(com), seed=3)
        sol = optimize_grasp(problem)
        assert sol.found
        assert colliding_points(problem.sdf, 0, cylinder["scene"], sol.theta)[1] == 0
        tcp = apply_transform(sol.theta, problem.preshapes[0].tcp[None])[0]
        assert np.linalg.norm(tcp - com) <= 0.02

    def test_invalid_problem(self, cylinder):
        preshape = Preshape("two_finger", cylinder["gripper_surface"], cylinder["gripper_full"])
        with pytest.raises(ValueError):
            build_problem(cylinder["object"], cylinder["scene"], [preshape], [], config=GraspConfig())
        with pytest.raises(ValueError):
            GraspConfig(k_stein=50, k_max=40)
        with pytest.raises(ValueError):
            GraspConfig(workers=0)
