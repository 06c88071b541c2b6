"""Plant and controller abstractions, seeded noise, and paired closed-loop rollouts.

All model maps act on the last axis so a whole batch of runs advances in one
call: a state batch has shape ``(n_runs, n)``.  Matrix products inside the
models use ``einsum`` rather than BLAS so a run's numbers never depend on how
many other runs share its batch.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, NumericalBlowup

BLOWUP_LIMIT = 1e12
PRNG_ALGORITHM = "PCG64"


def matvec(M, x):
    """Apply matrix ``M`` to every vector along the last axis of ``x``."""
    return np.einsum("ij,...j->...i", M, x)


def _spd_factor(cov, name):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
        raise ContractError(f"{name} must be a symmetric square matrix")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ContractError(f"{name} is not positive definite") from None


@dataclass(frozen=True, eq=False)
class PlantModel:
    """Discrete plant ``x' = f(x, u) + w``, ``y = h(x) + v``.

    ``drift`` and ``input_matrix`` are set when the plant is input affine,
    i.e. ``f(x, u) = drift(x) + B u``.
    """

    state_dim: int
    input_dim: int
    output_dim: int
    transition: Callable
    observation: Callable
    process_cov: np.ndarray
    measurement_cov: np.ndarray
    lipschitz_h: Optional[float] = None
    lipschitz_f: Optional[float] = None
    drift: Optional[Callable] = None
    input_matrix: Optional[np.ndarray] = None
    name: str = "plant"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for dim in (self.state_dim, self.input_dim, self.output_dim):
            if int(dim) < 1:
                raise ContractError("plant dimensions must be positive")
        pc = np.atleast_2d(np.asarray(self.process_cov, dtype=float))
        mc = np.atleast_2d(np.asarray(self.measurement_cov, dtype=float))
        if pc.shape != (self.state_dim, self.state_dim):
            raise ContractError("process_cov shape does not match state_dim")
        if mc.shape != (self.output_dim, self.output_dim):
            raise ContractError("measurement_cov shape does not match output_dim")
        object.__setattr__(self, "process_cov", pc)
        object.__setattr__(self, "measurement_cov", mc)
        object.__setattr__(self, "process_chol", _spd_factor(pc, "process_cov"))
        object.__setattr__(self, "measurement_chol", _spd_factor(mc, "measurement_cov"))

    @property
    def is_input_affine(self):
        return self.drift is not None and self.input_matrix is not None

    def with_noise(self, process_cov=None, measurement_cov=None):
        """Copy of the plant with replaced noise covariances."""
        kwargs = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if process_cov is not None:
            kwargs["process_cov"] = process_cov
        if measurement_cov is not None:
            kwargs["measurement_cov"] = measurement_cov
        return PlantModel(**kwargs)


@dataclass(frozen=True, eq=False)
class ControllerModel:
    """Dynamic output-feedback controller ``X = f_c(X_prev, y)``, ``u = h_c(X, y)``.

    ``expected_output(X_prev)`` and ``innovation_cov`` are optional hooks used
    by residual detectors: the controller's own prediction of the next
    measurement and the covariance of its error.
    """

    internal_dim: int
    update: Callable
    output: Callable
    initial_state: np.ndarray
    lipschitz_fc: Optional[float] = None
    lipschitz_hc: Optional[float] = None
    expected_output: Optional[Callable] = None
    innovation_cov: Optional[np.ndarray] = None
    name: str = "controller"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.internal_dim) < 0:
            raise ContractError("internal_dim must be nonnegative")
        x0 = np.asarray(self.initial_state, dtype=float).reshape(-1)
        if x0.shape != (self.internal_dim,):
            raise ContractError("initial_state length does not match internal_dim")
        object.__setattr__(self, "initial_state", x0)


def _check_finite(value, what, step=None):
    if not np.all(np.isfinite(value)):
        raise NumericalBlowup(f"non-finite {what}", step=step, where=what)
    return value


def step_plant(plant, x, u, w, step=None):
    x = np.asarray(x, dtype=float)
    return _check_finite(plant.transition(x, np.asarray(u, dtype=float)) + w, "state", step)


def measure(plant, x, v, step=None):
    return _check_finite(plant.observation(np.asarray(x, dtype=float)) + v, "output", step)


def step_controller(ctrl, X_prev, y_c, step=None):
    X = _check_finite(ctrl.update(np.asarray(X_prev, dtype=float), y_c), "controller state", step)
    u = _check_finite(ctrl.output(X, y_c), "input", step)
    return X, u


@dataclass(frozen=True)
class NoiseStream:
    """Seeded source of process and measurement noise for one run.

    Each run draws, in order, the initial measurement noise ``v`` and then the
    pair ``(w_t, v_{t+1})`` for every step.  Auxiliary streams (attacker
    sensors, injected estimation error, random attack batteries) come from
    ``child(k)`` and never disturb the main sequence.
    """

    master_seed: int
    stream_id: int
    algorithm: str = PRNG_ALGORITHM

    def generator(self, sub=0):
        seq = np.random.SeedSequence(int(self.master_seed), spawn_key=(int(self.stream_id), int(sub)))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, k):
        return self.generator(int(k) + 1)

    def draw(self, plant, n_steps):
        """Return ``w`` of shape (n_steps, n) and ``v`` of shape (n_steps + 1, p)."""
        n, p = plant.state_dim, plant.output_dim
        z = self.generator(0).standard_normal(p + n_steps * (n + p))
        v_first = z[:p]
        block = z[p:].reshape(n_steps, n + p)
        w = matvec(plant.process_chol, block[:, :n])
        v = np.concatenate([v_first[None, :], block[:, n:]], axis=0)
        return w, matvec(plant.measurement_chol, v)


def as_streams(noise):
    if isinstance(noise, NoiseStream):
        return [noise]
    streams = list(noise)
    if not streams:
        raise ContractError("at least one noise stream is required")
    return streams


@dataclass
class Trajectory:
    """Batched rollout record; every series has shape (n_runs, len(times), dim).

    ``valid_until[i]`` is the last time index of run ``i`` holding finite
    values; entries after it are NaN when ``blown_up[i]`` is set.
    """

    times: np.ndarray
    states: np.ndarray
    controller_states: np.ndarray
    inputs: np.ndarray
    true_outputs: np.ndarray
    received_outputs: np.ndarray
    attacks: np.ndarray
    expected_outputs: Optional[np.ndarray]
    valid_until: np.ndarray
    blown_up: np.ndarray

    @property
    def n_runs(self):
        return self.states.shape[0]

    def index(self, t):
        return int(t - self.times[0])

    def tail(self, start_index):
        """Trajectory restricted to time indices ``start_index`` onward."""
        sl = slice(start_index, None)
        exp = None if self.expected_outputs is None else self.expected_outputs[:, sl]
        return Trajectory(self.times[sl], self.states[:, sl], self.controller_states[:, sl],
                          self.inputs[:, sl], self.true_outputs[:, sl], self.received_outputs[:, sl],
                          self.attacks[:, sl], exp, self.valid_until - start_index, self.blown_up.copy())

    def copy(self):
        exp = None if self.expected_outputs is None else self.expected_outputs.copy()
        return Trajectory(self.times.copy(), self.states.copy(), self.controller_states.copy(),
                          self.inputs.copy(), self.true_outputs.copy(), self.received_outputs.copy(),
                          self.attacks.copy(), exp, self.valid_until.copy(), self.blown_up.copy())


@dataclass
class TrajectoryPair:
    free: Trajectory
    attacked: Trajectory
    fake_states: Optional[np.ndarray]
    attack_states: Optional[np.ndarray]
    t0_index: int
    streams: list
    metadata: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.free.times

    def deviation(self, component=None):
        """Per-run series of ``|x^a - x|`` (Euclidean, or a single component)."""
        diff = self.attacked.states - self.free.states
        if component is not None:
            return np.abs(diff[..., component])
        return np.linalg.norm(diff, axis=-1)

    def fake_gap(self):
        if self.fake_states is None:
            raise ContractError("attack does not expose a fake state")
        return np.linalg.norm(self.fake_states - self.free.states, axis=-1)


class _Recorder:
    def __init__(self, n_runs, n_steps, plant, ctrl, with_expected):
        shape = lambda d: np.full((n_runs, n_steps, d), np.nan)
        self.x = shape(plant.state_dim)
        self.X = shape(ctrl.internal_dim)
        self.u = shape(plant.input_dim)
        self.y = shape(plant.output_dim)
        self.yc = shape(plant.output_dim)
        self.a = shape(plant.output_dim)
        self.yhat = shape(plant.output_dim) if with_expected else None
        self.s = None
        self.valid_until = np.full(n_runs, n_steps - 1)
        self.blown_up = np.zeros(n_runs, dtype=bool)

    def trajectory(self, times):
        return Trajectory(times, self.x, self.X, self.u, self.y, self.yc, self.a, self.yhat,
                          self.valid_until, self.blown_up)


def _bad_rows(*arrays):
    bad = None
    for arr in arrays:
        if arr.shape[-1] == 0:
            continue
        rows = ~np.all(np.isfinite(arr), axis=-1) | np.any(np.abs(arr) > BLOWUP_LIMIT, axis=-1)
        bad = rows if bad is None else bad | rows
    return bad


def simulate(plant, ctrl, x_init, X_init, w, v, attack_run=None, t_start=0, rec=None, offset=0):
    """Advance a batch of closed loops over the supplied noise.

    ``w`` has shape (n_runs, K, n) and ``v`` (n_runs, K, p); the loop records
    ``K`` steps into ``rec`` starting at row ``offset`` and returns the state
    pair after the last step.  When ``attack_run`` is given it is asked for the
    injection before every controller update and advanced afterwards.
    """
    n_runs, n_steps = w.shape[0], w.shape[1]
    if rec is None:
        rec = _Recorder(n_runs, n_steps, plant, ctrl, ctrl.expected_output is not None)
    x = np.array(x_init, dtype=float)
    X_prev = np.array(X_init, dtype=float)
    alive = ~rec.blown_up
    zero_attack = np.zeros((n_runs, plant.output_dim))
    with np.errstate(all="ignore"):
        for k in range(n_steps):
            t = t_start + k
            row = offset + k
            y = plant.observation(x) + v[:, k]
            if attack_run is not None:
                if rec.s is not None:
                    rec.s[:, row] = attack_run.s if attack_run.s is not None else 0.0
                a = attack_run.inject(t, x, y)
            else:
                a = zero_attack
            y_c = y + a
            if rec.yhat is not None:
                rec.yhat[:, row] = ctrl.expected_output(X_prev)
            X = ctrl.update(X_prev, y_c)
            u = ctrl.output(X, y_c)
            if attack_run is not None:
                attack_run.advance(t, x, u, y_c)
            rec.x[:, row], rec.X[:, row], rec.u[:, row] = x, X, u
            rec.y[:, row], rec.yc[:, row], rec.a[:, row] = y, y_c, a
            x_next = plant.transition(x, u) + w[:, k]
            checks = [x_next, X]
            if attack_run is not None and attack_run.s is not None:
                checks.append(attack_run.s)
            newly_bad = _bad_rows(*checks) & alive
            if np.any(newly_bad):
                rec.valid_until[newly_bad] = row
                rec.blown_up[newly_bad] = True
                alive = alive & ~newly_bad
                # Later rows of a dead run carry NaN so it cannot pollute statistics.
                x_next[newly_bad] = np.nan
                X = X.copy()
                X[newly_bad] = np.nan
                if attack_run is not None:
                    attack_run.kill(newly_bad)
            x, X_prev = x_next, X
    return rec, x, X_prev


def _noise_batch(plant, streams, n_steps):
    ws, vs = zip(*(s.draw(plant, n_steps) for s in streams))
    return np.stack(ws), np.stack(vs)


def run_paired(plant, ctrl, attack=None, horizon=100, warmup=100, noise=None, x_init=None):
    """Simulate attack-free and attacked closed loops under common noise.

    The warmup is simulated once, attack free, from ``x_init`` (default: the
    origin) and the controller's ``initial_state``; both branches then continue
    from the same point with the same noise, the attack acting from ``t = 0``.
    Times run from ``-warmup`` to ``horizon`` inclusive.
    """
    if noise is None:
        raise ContractError("run_paired needs a NoiseStream or a list of them")
    if horizon < 0 or warmup < 0:
        raise ContractError("horizon and warmup must be nonnegative")
    streams = as_streams(noise)
    n_runs = len(streams)
    n_steps = warmup + horizon + 1
    w, v = _noise_batch(plant, streams, n_steps)
    times = np.arange(-warmup, horizon + 1)
    if x_init is None:
        x_init = np.zeros(plant.state_dim)
    x0 = np.broadcast_to(np.asarray(x_init, dtype=float), (n_runs, plant.state_dim))
    X0 = np.broadcast_to(ctrl.initial_state, (n_runs, ctrl.internal_dim))

    free = _Recorder(n_runs, n_steps, plant, ctrl, ctrl.expected_output is not None)
    _, x_t0, X_t0 = simulate(plant, ctrl, x0, X0, w[:, :warmup], v[:, :warmup], t_start=-warmup, rec=free)
    warm_rec = _copy_recorder(free)
    simulate(plant, ctrl, x_t0, X_t0, w[:, warmup:], v[:, warmup:], t_start=0, rec=free, offset=warmup)
    free_traj = free.trajectory(times)

    metadata = {"prng": PRNG_ALGORITHM, "seeds": [[s.master_seed, s.stream_id] for s in streams],
                "warmup": warmup, "horizon": horizon}
    if attack is None:
        return TrajectoryPair(free_traj, free_traj.copy(), None, None, warmup, streams, metadata)

    history = WarmupHistory(warm_rec, warmup)
    runner = attack.start(plant, ctrl, streams, history)
    att = warm_rec
    if runner.s is not None:
        att.s = np.zeros((n_runs, n_steps, plant.state_dim))
    simulate(plant, ctrl, x_t0, X_t0, w[:, warmup:], v[:, warmup:], attack_run=runner,
             t_start=0, rec=att, offset=warmup)
    att_traj = att.trajectory(times)
    fake = None
    if att.s is not None:
        fake = att_traj.states - att.s
    metadata.update(attack.describe())
    return TrajectoryPair(free_traj, att_traj, fake, att.s, warmup, streams, metadata)


def run_free(plant, ctrl, horizon, warmup, noise, x_init=None):
    """Attack-free batch rollout over the same time grid as :func:`run_paired`."""
    streams = as_streams(noise)
    n_steps = warmup + horizon + 1
    w, v = _noise_batch(plant, streams, n_steps)
    if x_init is None:
        x_init = np.zeros(plant.state_dim)
    x0 = np.broadcast_to(np.asarray(x_init, dtype=float), (len(streams), plant.state_dim))
    X0 = np.broadcast_to(ctrl.initial_state, (len(streams), ctrl.internal_dim))
    rec, _, _ = simulate(plant, ctrl, x0, X0, w, v, t_start=-warmup)
    return rec.trajectory(np.arange(-warmup, horizon + 1))


def _copy_recorder(rec):
    out = _Recorder.__new__(_Recorder)
    for name, val in vars(rec).items():
        setattr(out, name, val.copy() if isinstance(val, np.ndarray) else val)
    return out


class WarmupHistory:
    """Attack-free signals recorded before ``t = 0``, as seen by an attacker."""

    def __init__(self, rec, warmup):
        self.length = warmup
        self.states = rec.x[:, :warmup]
        self.inputs = rec.u[:, :warmup]
        self.true_outputs = rec.y[:, :warmup]
        self.received_outputs = rec.yc[:, :warmup]
