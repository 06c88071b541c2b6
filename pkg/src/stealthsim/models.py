"""Ready-made plants and controllers: cart-pole, quadrotor, LTI/LQG and scalar examples."""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_are

from .dynamics import ControllerModel, PlantModel, matvec
from .errors import ContractError, ModelBuildError
from .estimation import ekf_controller, linearize, numeric_jacobian, steady_state_gain

# ---------------------------------------------------------------- LTI / LQG


def lti_plant(A, B, C, process_cov, measurement_cov, name="lti"):
    A, B, C = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C))
    return PlantModel(
        state_dim=A.shape[0], input_dim=B.shape[1], output_dim=C.shape[0],
        transition=lambda x, u: matvec(A, x) + matvec(B, u),
        observation=lambda x: matvec(C, x),
        process_cov=process_cov, measurement_cov=measurement_cov,
        lipschitz_h=float(np.linalg.norm(C, 2)), lipschitz_f=float(np.linalg.norm(np.hstack([A, B]), 2)),
        drift=lambda x: matvec(A, x), input_matrix=B, name=name,
        params={"A": A.tolist(), "B": B.tolist(), "C": C.tolist()},
    )


def lqr_gain(A, B, Q, R):
    """Feedback matrix ``K`` for ``u = K x`` minimizing the discrete LQR cost."""
    P = solve_discrete_are(A, B, Q, R)
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def _rank_check(M, n, what):
    if np.linalg.matrix_rank(M) < n:
        raise ModelBuildError(f"{what} rank test failed")


@dataclass
class LtiSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    K: np.ndarray = None
    L: np.ndarray = None
    innovation_cov: np.ndarray = None
    closed_loop_radius: float = None


@dataclass
class LqgDesign:
    controller: ControllerModel
    plant: PlantModel
    system: LtiSystem

    @property
    def K(self):
        return self.system.K

    @property
    def L(self):
        return self.system.L


def lqg_build(A, B, C, Q_lqr, R_lqr, R_w, R_v, initial_state=None):
    """LQG controller ``u = K x_hat`` with a steady-state Kalman filter."""
    A, B, C = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C))
    Q_lqr, R_lqr, R_w, R_v = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (Q_lqr, R_lqr, R_w, R_v))
    n = A.shape[0]
    _rank_check(np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)]), n, "controllability")
    _rank_check(np.vstack([C @ np.linalg.matrix_power(A, k) for k in range(n)]), n, "observability")
    K = lqr_gain(A, B, Q_lqr, R_lqr)
    L, _, S = steady_state_gain(A, C, R_w, R_v)
    radius = closed_loop_radius(A, B, C, K, L)
    if not radius < 1:
        raise ModelBuildError(f"LQG closed loop is not stable (spectral radius {radius:.6f})")
    plant = lti_plant(A, B, C, R_w, R_v)
    ctrl = ekf_controller(plant, K, L, innovation_cov=S, initial_state=initial_state, name="lqg")
    return LqgDesign(ctrl, plant, LtiSystem(A, B, C, K, L, S, radius))


def closed_loop_radius(A, B, C, K, L):
    """Spectral radius of plant plus predict-correct observer under ``u = K x_hat``."""
    n = A.shape[0]
    # Joint state (x_t, x_hat_{t-1}); x_hat_t = (I - L C) A_K x_hat_{t-1} + L C x_t.
    A_K = A + B @ K
    top = np.hstack([A + B @ K @ L @ C, B @ K @ (np.eye(n) - L @ C) @ A_K])
    bottom = np.hstack([L @ C, (np.eye(n) - L @ C) @ A_K])
    return float(np.max(np.abs(np.linalg.eigvals(np.vstack([top, bottom])))))


# ---------------------------------------------------------------- cart-pole


@dataclass(frozen=True)
class CartPoleParams:
    gravity: float = 9.81
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    sample_time: float = 0.05

    def __post_init__(self):
        if min(asdict(self).values()) <= 0:
            raise ContractError("cart-pole parameters must be positive")


def cartpole_accelerations(params, state, force):
    g, mc, mp, l = params.gravity, params.cart_mass, params.pole_mass, params.half_length
    total = mc + mp
    theta, theta_dot = state[..., 2], state[..., 3]
    sin, cos = np.sin(theta), np.cos(theta)
    denom = l * (4.0 / 3.0 - mp * cos ** 2 / total)
    theta_acc = (g * sin + cos * (-force - mp * l * theta_dot ** 2 * sin) / total) / denom
    x_acc = (force + mp * l * (theta_dot ** 2 * sin - theta_acc * cos)) / total
    return x_acc, theta_acc


def cartpole_plant(params=None, sample_time=None, noise_var=1e-3):
    """Euler-discretized cart-pole; state ``[x, x_dot, theta, theta_dot]``, outputs ``[x, theta]``."""
    params = params or CartPoleParams()
    if sample_time is not None:
        params = CartPoleParams(params.gravity, params.cart_mass, params.pole_mass, params.half_length, sample_time)
    if 4.0 / 3.0 - params.pole_mass / (params.cart_mass + params.pole_mass) <= 0:
        raise ContractError("cart-pole parameters give a non-positive inertia term")
    dt = params.sample_time

    def transition(x, u):
        x_acc, theta_acc = cartpole_accelerations(params, x, u[..., 0])
        rate = np.stack([x[..., 1], x_acc, x[..., 3], theta_acc], axis=-1)
        return x + dt * rate

    def observation(x):
        return np.stack([x[..., 0], x[..., 2]], axis=-1)

    return PlantModel(4, 1, 2, transition, observation, noise_var * np.eye(4), noise_var * np.eye(2),
                      lipschitz_h=1.0, name="cartpole", params={**asdict(params), "noise_var": noise_var})


CARTPOLE_Q = (1.0, 1.0, 1000.0, 10.0)
CARTPOLE_R = 0.01


def cartpole_controller(plant, state_weights=CARTPOLE_Q, input_weight=CARTPOLE_R):
    """LQR on the upright linearization fed by a steady-state EKF."""
    A, B, C = linearize(plant)
    K = lqr_gain(A, B, np.diag(state_weights), np.atleast_2d(input_weight))
    L, _, S = steady_state_gain(A, C, plant.process_cov, plant.measurement_cov)
    radius = closed_loop_radius(A, B, C, K, L)
    if not radius < 1:
        raise ModelBuildError("cart-pole LQR/EKF design is not stabilizing")
    ctrl = ekf_controller(plant, K, L, innovation_cov=S, name="cartpole_lqr_ekf")
    object.__setattr__(ctrl, "params", {**ctrl.params, "K": K.tolist(), "closed_loop_radius": radius,
                                        "state_weights": list(state_weights), "input_weight": input_weight})
    return ctrl


# ---------------------------------------------------------------- quadrotor


@dataclass(frozen=True)
class QuadrotorParams:
    """Rigid-body constants of a small quadrotor (a common textbook set)."""

    mass: float = 0.468
    inertia_x: float = 4.856e-3
    inertia_y: float = 4.856e-3
    inertia_z: float = 8.801e-3
    arm_length: float = 0.225
    gravity: float = 9.81


QUAD_STATES = ("x", "y", "z", "vx", "vy", "vz", "phi", "theta", "psi", "p", "q", "r")
QUAD_MEASURED = (0, 1, 2, 6, 7, 8, 9, 10, 11)


def quadrotor_plant(sample_time=0.01, params=None, noise_var=1e-3):
    """12-state quadrotor; inputs are total thrust and the three body torques."""
    P = params or QuadrotorParams()
    m, Ix, Iy, Iz, g, dt = P.mass, P.inertia_x, P.inertia_y, P.inertia_z, P.gravity, sample_time
    measured = np.array(QUAD_MEASURED)

    def transition(x, u):
        phi, theta, psi = x[..., 6], x[..., 7], x[..., 8]
        p, q, r = x[..., 9], x[..., 10], x[..., 11]
        thrust = u[..., 0] / m
        cphi, sphi = np.cos(phi), np.sin(phi)
        cth, sth = np.cos(theta), np.sin(theta)
        cpsi, spsi = np.cos(psi), np.sin(psi)
        rate = np.stack([
            x[..., 3], x[..., 4], x[..., 5],
            (cphi * sth * cpsi + sphi * spsi) * thrust,
            (cphi * sth * spsi - sphi * cpsi) * thrust,
            cphi * cth * thrust - g,
            p, q, r,
            q * r * (Iy - Iz) / Ix + u[..., 1] / Ix,
            p * r * (Iz - Ix) / Iy + u[..., 2] / Iy,
            p * q * (Ix - Iy) / Iz + u[..., 3] / Iz,
        ], axis=-1)
        return x + dt * rate

    def observation(x):
        return x[..., measured]

    return PlantModel(12, 4, 9, transition, observation, noise_var * np.eye(12), noise_var * np.eye(9),
                      lipschitz_h=1.0, name="quadrotor",
                      params={**asdict(P), "sample_time": sample_time, "noise_var": noise_var})


@dataclass(frozen=True)
class PidGains:
    pos_p: float = 0.8
    pos_i: float = 0.05
    pos_d: float = 1.4
    alt_p: float = 4.0
    alt_i: float = 0.5
    alt_d: float = 3.0
    att_p: float = 60.0
    att_d: float = 12.0
    yaw_p: float = 20.0
    yaw_d: float = 6.0
    max_tilt: float = 0.35


def hover_state(position=(0.0, 0.0, 10.0)):
    x = np.zeros(12)
    x[:3] = position
    return x


def quadrotor_controller(plant, target=(0.0, 0.0, 10.0), gains=None):
    """Cascaded position/attitude PID on steady-state EKF estimates.

    Controller state is ``[x_hat (12), position-error integrals (3)]``.
    """
    G = gains or PidGains()
    P = QuadrotorParams(**{k: plant.params[k] for k in QuadrotorParams.__dataclass_fields__})
    m, g, dt = P.mass, P.gravity, plant.params["sample_time"]
    target = np.asarray(target, dtype=float)
    hover_u = np.array([m * g, 0.0, 0.0, 0.0])
    x_op = hover_state(target)
    A, _, C = linearize(plant, x_op, hover_u)
    L, _, S = steady_state_gain(A, C, plant.process_cov, plant.measurement_cov)
    kp = np.array([G.pos_p, G.pos_p, G.alt_p])
    ki = np.array([G.pos_i, G.pos_i, G.alt_i])
    kd = np.array([G.pos_d, G.pos_d, G.alt_d])

    def law(X):
        xh, integ = X[..., :12], X[..., 12:]
        err = target - xh[..., :3]
        acc = kp * err + ki * integ - kd * xh[..., 3:6]
        phi, theta, psi = xh[..., 6], xh[..., 7], xh[..., 8]
        cpsi, spsi = np.cos(psi), np.sin(psi)
        theta_d = np.clip((acc[..., 0] * cpsi + acc[..., 1] * spsi) / g, -G.max_tilt, G.max_tilt)
        phi_d = np.clip((acc[..., 0] * spsi - acc[..., 1] * cpsi) / g, -G.max_tilt, G.max_tilt)
        thrust = m * (g + acc[..., 2]) / (np.cos(phi) * np.cos(theta))
        tau_phi = P.inertia_x * (G.att_p * (phi_d - phi) - G.att_d * xh[..., 9])
        tau_theta = P.inertia_y * (G.att_p * (theta_d - theta) - G.att_d * xh[..., 10])
        tau_psi = P.inertia_z * (G.yaw_p * (0.0 - psi) - G.yaw_d * xh[..., 11])
        return np.stack([thrust, tau_phi, tau_theta, tau_psi], axis=-1)

    def predict(X_prev):
        return plant.transition(X_prev[..., :12], law(X_prev))

    def update(X_prev, y_c):
        pred = predict(X_prev)
        xh = pred + matvec(L, y_c - plant.observation(pred))
        integ = X_prev[..., 12:] + dt * (target - xh[..., :3])
        return np.concatenate([xh, integ], axis=-1)

    def output(X, y_c):
        return law(X)

    return ControllerModel(
        internal_dim=15, update=update, output=output,
        initial_state=np.concatenate([x_op, np.zeros(3)]),
        lipschitz_fc=float(np.linalg.norm(L, 2)),
        expected_output=lambda X_prev: plant.observation(predict(X_prev)),
        innovation_cov=S, name="quadrotor_pid_ekf",
        params={"gains": asdict(G), "target": target.tolist()},
    )


# ---------------------------------------------------------------- scalar examples


def _scalar_plant(f, noise_var, name, drift=None, B=None):
    return PlantModel(1, 1, 1, f, lambda x: x.copy(), noise_var * np.eye(1), noise_var * np.eye(1),
                      lipschitz_h=1.0, drift=drift, input_matrix=B, name=name)


def zero_controller():
    return ControllerModel(0, lambda X, y: X[..., :0], lambda X, y: np.zeros(y.shape[:-1] + (1,)),
                           np.zeros(0), lipschitz_fc=0.0, lipschitz_hc=0.0, name="zero")


def scalar_examples(noise_var=1e-2, cubic_coeff=1.0, input_coeff=1.0):
    """Plant/controller pairs: a contracting loop, an expanding cubic, and a cancelled cubic."""
    a, b = cubic_coeff, input_coeff
    contracting = _scalar_plant(lambda x, u: 0.5 * x, noise_var, "example1",
                                drift=lambda x: 0.5 * x, B=np.zeros((1, 1)))
    cubic = _scalar_plant(lambda x, u: x + a * x ** 3 + b * u, noise_var, "example2",
                          drift=lambda x: x + a * x ** 3, B=np.full((1, 1), b))
    cancel = ControllerModel(0, lambda X, y: X[..., :0], lambda X, y: -(a / b) * y ** 3 - y / (2 * b),
                             np.zeros(0), name="cubic_cancelling")
    return {
        "example1": (contracting, zero_controller()),
        "example2": (cubic, zero_controller()),
        "cubic_cancelled": (cubic, cancel),
    }


def resilience_example(noise_var=1e-2):
    """Stable scalar plant and controller with known gains for the deviation bound.

    ``x' = 0.5 x + 0.5 u``; ``X = 0.5 X_prev + y``; ``u = -0.5 X - 0.5 y``.
    Gains: ``gamma(s) = s``, ``gamma_c(s) = 2 s``, ``L_hc = 1``.
    """
    plant = _scalar_plant(lambda x, u: 0.5 * x + 0.5 * u, noise_var, "resilience_scalar",
                          drift=lambda x: 0.5 * x, B=np.full((1, 1), 0.5))
    ctrl = ControllerModel(1, lambda X, y: 0.5 * X + y, lambda X, y: -0.5 * X - 0.5 * y, np.zeros(1),
                           lipschitz_fc=1.0, lipschitz_hc=1.0, name="resilience_scalar")
    gains = {"gamma": lambda s: s, "gamma_c": lambda s: 2.0 * s, "L_hc": 1.0}
    return plant, ctrl, gains
