import numpy as np
import pytest

from stealthsim.attacks import ModelOneAttack
from stealthsim.dynamics import NoiseStream, run_paired
from stealthsim.errors import ModelBuildError
from stealthsim.estimation import linearize
from stealthsim.models import (CartPoleParams, cartpole_accelerations, cartpole_plant, closed_loop_radius,
                               hover_state, lqg_build, lqr_gain, quadrotor_controller, quadrotor_plant)


def test_cartpole_upright_equilibrium():
    plant = cartpole_plant()
    x = np.zeros(4)
    for _ in range(100):
        x = plant.transition(x, np.zeros(1))
    assert np.array_equal(x, np.zeros(4))


def test_cartpole_falls_away_from_upright():
    p = CartPoleParams()
    _, theta_acc = cartpole_accelerations(p, np.array([0.0, 0.0, 0.1, 0.0]), 0.0)
    total = p.cart_mass + p.pole_mass
    hand = p.gravity * np.sin(0.1) / (p.half_length * (4 / 3 - p.pole_mass * np.cos(0.1) ** 2 / total))
    assert theta_acc > 0 and theta_acc == pytest.approx(hand, rel=1e-12)


def test_cartpole_open_loop_unstable_and_closed_loop_stable(cartpole):
    plant, ctrl = cartpole
    A, B, C = linearize(plant)
    assert np.max(np.abs(np.linalg.eigvals(A))) > 1
    assert ctrl.params["closed_loop_radius"] < 1


def test_cartpole_euler_consistency():
    x0, u = np.array([0.1, -0.2, 0.15, 0.3]), np.array([0.5])

    def gap(dt):
        coarse = cartpole_plant(sample_time=dt).transition(x0, u)
        fine_plant = cartpole_plant(sample_time=dt / 2)
        fine = fine_plant.transition(fine_plant.transition(x0, u), u)
        return np.linalg.norm(coarse - fine)

    ratio = gap(0.02) / gap(0.01)
    assert ratio == pytest.approx(4.0, rel=0.05)


def test_quadrotor_hover_equilibrium():
    plant = quadrotor_plant()
    m, g = plant.params["mass"], plant.params["gravity"]
    x = hover_state()
    for _ in range(200):
        x = plant.transition(x, np.array([m * g, 0.0, 0.0, 0.0]))
    assert np.allclose(x, hover_state(), atol=1e-12)


def test_quadrotor_pitch_attack_sign():
    plant = quadrotor_plant()
    ctrl = quadrotor_controller(plant)
    drift = []
    for sign in (1.0, -1.0):
        s0 = np.zeros(12)
        s0[6] = sign * 1e-3
        pair = run_paired(plant, ctrl, ModelOneAttack(s0), 1000, 50, [NoiseStream(0, i) for i in range(3)],
                          x_init=hover_state())
        dy = (pair.attacked.states - pair.free.states)[:, pair.t0_index:, 1].mean(axis=0)
        drift.append(dy[-1])
    assert drift[0] < 0 < drift[1]


def test_scalar_lqg_hand_oracle(scalar_lqg):
    golden = (1 + np.sqrt(5)) / 2
    assert scalar_lqg.K[0, 0] == pytest.approx(-golden, rel=1e-12)
    assert scalar_lqg.L[0, 0] == pytest.approx(golden / 2, rel=1e-12)
    assert scalar_lqg.system.closed_loop_radius < 1


def test_lqg_deadbeat_plant():
    design = lqg_build(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    assert abs(design.K[0, 0]) < 1e-12
    assert design.system.closed_loop_radius < 1


def test_lqg_rank_failures_named():
    with pytest.raises(ModelBuildError, match="controllability"):
        lqg_build(2.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    with pytest.raises(ModelBuildError, match="observability"):
        lqg_build(2.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0)


def test_closed_loop_radius_matches_simulation():
    rng = np.random.default_rng(0)
    A = np.array([[1.2, 0.3], [0.0, 0.9]])
    B = np.array([[0.0], [1.0]])
    C = np.array([[1.0, 0.0]])
    design = lqg_build(A, B, C, np.eye(2), np.eye(1), np.eye(2), np.eye(1))
    K = lqr_gain(A, B, np.eye(2), np.eye(1))
    assert np.allclose(design.K, K)
    x, xh = rng.standard_normal(2), np.zeros(2)
    norms = []
    for _ in range(200):
        pred = (A + B @ K) @ xh
        xh = pred + design.L @ (C @ x - C @ pred)
        x = A @ x + B @ (K @ xh)
        norms.append(np.linalg.norm(np.r_[x, xh]))
    rate = (norms[-1] / norms[99]) ** (1 / 100)
    assert rate == pytest.approx(closed_loop_radius(A, B, C, K, design.L), abs=0.01)
