"""Extended Kalman filtering for the system controller and for attackers.

The system-side filter is wrapped as a :class:`ControllerModel` whose internal
state is the estimate itself.  Attacker-side estimators come in three kinds:

``case1``
    a clone of the system filter run on the plant's own (pre-injection)
    measurements, one step behind;
``case2``
    a filter on the attacker's private sensors ``y' = h'(x) + v'``;
``bounded_error``
    the true state plus a random error of norm at most ``error_bound``, used to
    sweep the estimation error directly.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_discrete_are

from .dynamics import ControllerModel, matvec
from .errors import ContractError, EstimationError, NotReadyError, NumericalBlowup

DEFAULT_JACOBIAN_STEP = 1e-5


def numeric_jacobian(func, point, eps=DEFAULT_JACOBIAN_STEP):
    """Central-difference Jacobian of ``func`` at ``point`` (one batched call)."""
    if not eps > 0:
        raise ContractError("finite-difference step must be positive")
    point = np.asarray(point, dtype=float).reshape(-1)
    k = point.size
    shifts = np.eye(k) * eps
    probes = np.concatenate([point + shifts, point - shifts])
    try:
        values = np.asarray(func(probes), dtype=float)
        batched = values.ndim >= 1 and values.shape[0] == 2 * k and values.size % (2 * k) == 0
    except (ValueError, TypeError, IndexError):
        batched = False
    if not batched:
        # Map does not broadcast over a leading axis; evaluate probe by probe.
        values = np.stack([np.atleast_1d(np.asarray(func(p), dtype=float)) for p in probes])
    values = values.reshape(2 * k, -1)
    jac = ((values[:k] - values[k:]) / (2 * eps)).T
    if not np.all(np.isfinite(jac)):
        raise NumericalBlowup("non-finite Jacobian entry", where="jacobian")
    return jac


def linearize(plant, x_op=None, u_op=None, eps=DEFAULT_JACOBIAN_STEP):
    """Numeric ``(A, B, C)`` of a plant around an operating point (default origin)."""
    x_op = np.zeros(plant.state_dim) if x_op is None else np.asarray(x_op, dtype=float)
    u_op = np.zeros(plant.input_dim) if u_op is None else np.asarray(u_op, dtype=float)
    n = plant.state_dim

    def f_x(xs):
        return plant.transition(xs, np.broadcast_to(u_op, xs.shape[:-1] + u_op.shape))

    def f_u(us):
        return plant.transition(np.broadcast_to(x_op, us.shape[:-1] + (n,)), us)

    return (numeric_jacobian(f_x, x_op, eps), numeric_jacobian(f_u, u_op, eps),
            numeric_jacobian(plant.observation, x_op, eps))


def steady_state_gain(A, C, process_cov, measurement_cov):
    """Steady-state filter gain from the filtering Riccati equation.

    Returns ``(L, P, S)`` where ``P`` is the prior (predicted) covariance and
    ``S = C P C^T + R_v`` the innovation covariance.
    """
    A, C = np.atleast_2d(A), np.atleast_2d(C)
    P = solve_discrete_are(A.T, C.T, np.atleast_2d(process_cov), np.atleast_2d(measurement_cov))
    P = 0.5 * (P + P.T)
    S = C @ P @ C.T + measurement_cov
    L = np.linalg.solve(S, C @ P).T
    return L, P, S


@dataclass(frozen=True, eq=False)
class EkfConfig:
    """Gain and Jacobian settings for :func:`ekf_step`.

    ``gain_mode`` is ``"steady_state"`` (fixed ``gain``) or ``"time_varying"``
    (Riccati recursion started from ``initial_cov``).  With
    ``jacobian_mode="analytic"`` the maps ``jac_f(x, u)`` and ``jac_h(x)`` are
    used; otherwise central differences with step ``jacobian_step``.
    """

    gain_mode: str = "steady_state"
    gain: Optional[np.ndarray] = None
    initial_cov: Optional[np.ndarray] = None
    jacobian_mode: str = "finite_difference"
    jacobian_step: float = DEFAULT_JACOBIAN_STEP
    jac_f: Optional[Callable] = None
    jac_h: Optional[Callable] = None

    def __post_init__(self):
        if self.gain_mode not in ("steady_state", "time_varying"):
            raise ContractError(f"unknown gain_mode {self.gain_mode!r}")
        if self.jacobian_mode not in ("analytic", "finite_difference"):
            raise ContractError(f"unknown jacobian_mode {self.jacobian_mode!r}")
        if self.gain_mode == "steady_state" and self.gain is None:
            raise ContractError("steady_state mode needs a gain")
        if self.jacobian_mode == "analytic" and (self.jac_f is None or self.jac_h is None):
            raise ContractError("analytic mode needs jac_f and jac_h")

    def jacobians(self, plant, x, u, x_pred):
        if self.jacobian_mode == "analytic":
            return np.atleast_2d(self.jac_f(x, u)), np.atleast_2d(self.jac_h(x_pred))
        F = numeric_jacobian(lambda xs: plant.transition(xs, np.broadcast_to(u, xs.shape[:-1] + u.shape)),
                             x, self.jacobian_step)
        H = numeric_jacobian(plant.observation, x_pred, self.jacobian_step)
        return F, H


def ekf_step(plant, cfg, x_prev, u_prev, y_c, P_prev=None):
    """One predict-correct step, returning ``(x_hat, P)``.

    ``P`` is the posterior covariance in time-varying mode and ``None`` in
    steady-state mode.  Steady-state mode accepts batches along the leading
    axis; time-varying mode works on a single run.
    """
    x_pred = plant.transition(x_prev, u_prev)
    innovation = y_c - plant.observation(x_pred)
    if cfg.gain_mode == "steady_state":
        return x_pred + matvec(cfg.gain, innovation), None

    P_prev = cfg.initial_cov if P_prev is None else P_prev
    if P_prev is None:
        raise ContractError("time_varying mode needs a covariance")
    x_prev, u_prev = np.asarray(x_prev, float), np.asarray(u_prev, float)
    F, H = cfg.jacobians(plant, x_prev, u_prev, x_pred)
    P_pred = F @ P_prev @ F.T + plant.process_cov
    S = H @ P_pred @ H.T + plant.measurement_cov
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise EstimationError("innovation covariance is singular") from None
    L = np.linalg.solve(S, H @ P_pred).T
    I_LH = np.eye(plant.state_dim) - L @ H
    P = I_LH @ P_pred @ I_LH.T + L @ plant.measurement_cov @ L.T
    return x_pred + L @ innovation, 0.5 * (P + P.T)


def _feedback(gain):
    if callable(gain):
        return gain
    K = np.atleast_2d(np.asarray(gain, dtype=float))
    return lambda x: matvec(K, x)


def ekf_controller(plant, feedback, gain, innovation_cov=None, initial_state=None,
                   lipschitz_hc=None, name="ekf"):
    """Controller whose state is the EKF estimate and whose law is ``u = K(x_hat)``.

    ``feedback`` is a gain matrix or a map ``x_hat -> u``; ``gain`` is the
    steady-state filter gain.
    """
    law = _feedback(feedback)
    cfg = EkfConfig(gain=np.atleast_2d(gain))
    n = plant.state_dim

    def update(X_prev, y_c):
        return ekf_step(plant, cfg, X_prev, law(X_prev), y_c)[0]

    def output(X, y_c):
        return law(X)

    def expected_output(X_prev):
        return plant.observation(plant.transition(X_prev, law(X_prev)))

    if lipschitz_hc is None and not callable(feedback):
        lipschitz_hc = float(np.linalg.norm(np.atleast_2d(feedback), 2))
    return ControllerModel(
        internal_dim=n, update=update, output=output,
        initial_state=np.zeros(n) if initial_state is None else initial_state,
        lipschitz_fc=float(np.linalg.norm(cfg.gain, 2)), lipschitz_hc=lipschitz_hc,
        expected_output=expected_output,
        innovation_cov=None if innovation_cov is None else np.atleast_2d(innovation_cov),
        name=name, params={"filter_gain": cfg.gain.tolist()},
    )


@dataclass(frozen=True, eq=False)
class AttackerEstimator:
    """Attacker's state estimator; see the module docstring for the kinds.

    ``window`` is the number of warmup steps the attacker listens to before the
    attack (``None``: the whole warmup).  ``error_bound`` is the declared
    ``b_zeta``; for ``case1`` and ``case2`` it is measured by
    :func:`measure_error_bound` rather than assumed.
    """

    kind: str
    gain: Optional[np.ndarray] = None
    error_bound: float = 0.0
    window: Optional[int] = None
    sensor_map: Optional[Callable] = None
    sensor_cov: Optional[np.ndarray] = None
    initial_estimate: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("case1", "case2", "bounded_error"):
            raise ContractError(f"unknown estimator kind {self.kind!r}")
        if self.error_bound < 0:
            raise ContractError("error_bound must be nonnegative")
        if self.kind in ("case1", "case2") and self.gain is None and not self.perfect:
            raise ContractError(f"{self.kind} estimator needs a filter gain")

    @property
    def perfect(self):
        """Identity side channel without noise: the attacker reads the state."""
        return (self.kind == "case2" and self.sensor_map is None
                and (self.sensor_cov is None or not np.any(self.sensor_cov)))

    def sensor(self, x):
        return x if self.sensor_map is None else self.sensor_map(x)

    def describe(self):
        return {"estimator": self.kind, "error_bound": float(self.error_bound), "window": self.window}


def case1_estimator(plant, window=None, x_op=None, u_op=None):
    """Attacker clone of the system EKF built from the plant's linearization."""
    A, _, C = linearize(plant, x_op, u_op)
    L, _, _ = steady_state_gain(A, C, plant.process_cov, plant.measurement_cov)
    return AttackerEstimator("case1", gain=L, window=window)


def case2_estimator(plant, sensor_map=None, sensor_cov=None, x_op=None, u_op=None):
    """Filter on private sensors; perfect channel when ``sensor_cov`` is zero and the map is identity."""
    est = AttackerEstimator("case2", sensor_map=sensor_map, sensor_cov=sensor_cov)
    if est.perfect:
        return est
    A, _, _ = linearize(plant, x_op, u_op)
    x0 = np.zeros(plant.state_dim) if x_op is None else x_op
    H = numeric_jacobian(est.sensor, x0)
    L, _, _ = steady_state_gain(A, H, plant.process_cov, np.atleast_2d(sensor_cov))
    return AttackerEstimator("case2", gain=L, sensor_map=sensor_map, sensor_cov=np.atleast_2d(sensor_cov))


class EstimatorRun:
    """Per-batch running state of an :class:`AttackerEstimator`.

    The owner calls :meth:`predict` at the start of each attacked step to get
    the estimate of the current state and :meth:`correct` once that step's
    measurement and the shadow input are known.
    """

    def __init__(self, est, plant, n_runs, rng=None):
        self.est, self.plant = est, plant
        self.n_runs = n_runs
        self.rng = rng
        self.filtered = None
        self.u_prev = None
        self.current = None
        if est.kind == "case2" and not est.perfect:
            self.sensor_chol = np.linalg.cholesky(np.atleast_2d(est.sensor_cov))

    @property
    def ready(self):
        return self.filtered is not None or self.est.kind == "bounded_error"

    def _correct(self, prior, measurement):
        est = self.est
        if est.kind == "case1":
            return prior + matvec(est.gain, measurement - self.plant.observation(prior))
        if est.perfect:
            return np.array(measurement, dtype=float)
        return prior + matvec(est.gain, measurement - est.sensor(prior))

    def own_measurement(self, x):
        """Attacker sensor reading ``h'(x) + v'`` (case 2 only)."""
        y = self.est.sensor(x)
        if self.est.perfect:
            return np.array(y, dtype=float)
        v = self.rng.standard_normal((self.n_runs, self.sensor_chol.shape[0]))
        return y + matvec(self.sensor_chol, v)

    def warm_start(self, measurements, inputs):
        """Consume the listening window; ``measurements`` is (n_runs, W, dim)."""
        if self.est.kind == "bounded_error":
            return
        W = measurements.shape[1]
        if W == 0:
            return
        guess = self.est.initial_estimate
        prior = np.zeros((self.n_runs, self.plant.state_dim)) if guess is None else \
            np.broadcast_to(np.asarray(guess, float), (self.n_runs, self.plant.state_dim)).copy()
        for k in range(W):
            if k > 0:
                prior = self.plant.transition(self.filtered, inputs[:, k - 1])
            self.filtered = self._correct(prior, measurements[:, k])
        self.u_prev = inputs[:, W - 1] if inputs.shape[1] >= W else None

    def predict(self, x_true=None):
        if self.est.kind == "bounded_error":
            self.current = x_true + self.rng_ball()
            return self.current
        if self.filtered is None:
            raise NotReadyError("attacker estimator has no measurements yet")
        self.current = self.plant.transition(self.filtered, self.u_prev)
        return self.current

    def correct(self, measurement, u_shadow):
        if self.est.kind != "bounded_error":
            self.filtered = self._correct(self.current, measurement)
        self.u_prev = u_shadow
        return self.filtered

    def rng_ball(self):
        n = self.plant.state_dim
        dirs = self.rng.standard_normal((self.n_runs, n))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        radius = self.est.error_bound * self.rng.random(self.n_runs) ** (1.0 / n)
        return dirs * radius[:, None]


def attacker_estimate(est, plant, measurements, inputs, rng=None):
    """Estimate from a measurement/input history of one run or a batch.

    ``measurements`` has shape (K, dim) or (n_runs, K, dim); ``inputs`` matches.
    For ``case1`` (system measurements) the result is the one-step-lagged
    estimate of the state at time K.  For ``case2`` (own sensors) it is the
    estimate of the state at time K - 1, which may use that step's reading.
    """
    if est.kind == "bounded_error":
        raise ContractError("bounded_error estimates need the true state, not a history")
    measurements = np.asarray(measurements, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    single = measurements.ndim == 2
    if single:
        measurements, inputs = measurements[None], inputs[None]
    if measurements.shape[1] == 0:
        raise NotReadyError("estimator history is empty")
    run = EstimatorRun(est, plant, measurements.shape[0], rng)
    run.warm_start(measurements, inputs)
    out = run.predict() if est.kind == "case1" else run.filtered
    return out[0] if single else out


def measure_error_bound(errors, quantile=0.999):
    """Empirical bound on estimation error norms (any shape ending in the state axis)."""
    norms = np.linalg.norm(np.asarray(errors, dtype=float), axis=-1).ravel()
    norms = norms[np.isfinite(norms)]
    if norms.size == 0:
        raise EstimationError("no finite estimation errors to measure")
    return float(np.quantile(norms, quantile))


def bound_coverage(errors, bound):
    """Fraction of steps whose estimation error norm is within ``bound``."""
    norms = np.linalg.norm(np.asarray(errors, dtype=float), axis=-1).ravel()
    norms = norms[np.isfinite(norms)]
    return float(np.mean(norms <= bound))
