"""Sensor-injection attack constructions.

Each attack is an *attack generator*: an immutable description whose
``start(plant, ctrl, streams, history)`` returns a per-batch runner.  The
rollout loop calls ``runner.inject(t, x_a, y_a)`` before the controller update
and ``runner.advance(t, x_a, u_a, y_ca)`` after it.  Runners expose ``s``, the
distance between the true and the fake state, or ``None`` when the attack has
no such state.  The pure step functions below are what the runners call.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import matvec
from .errors import ContractError, NoImpactfulDirection
from .estimation import EstimatorRun, linearize

SUPPORT_TOL = 1e-9


# ---------------------------------------------------------------- step functions

def attack1_step(s, plant, x_a, u_a):
    """Full-knowledge recursion: returns ``(a_t, s_next)``."""
    x_fake = x_a - s
    a = plant.observation(x_fake) - plant.observation(x_a)
    s_next = plant.transition(x_a, u_a) - plant.transition(x_fake, u_a)
    return a, s_next


def attack2_step(s, plant, ctrl, x_hat, X_shadow_prev, y_ca):
    """Partial-knowledge recursion around the attacker's estimate ``x_hat``.

    ``y_ca`` is the compromised measurement the real controller receives at
    this step; the shadow controller consumes the same value.  Returns
    ``(a_t, s_next, u_shadow, X_shadow)``.
    """
    x_fake = x_hat - s
    a = plant.observation(x_fake) - plant.observation(x_hat)
    X_shadow = ctrl.update(X_shadow_prev, y_ca)
    u_shadow = ctrl.output(X_shadow, y_ca)
    s_next = plant.transition(x_hat, u_shadow) - plant.transition(x_fake, u_shadow)
    return a, s_next, u_shadow, X_shadow


def injection_for(plant, x_ref, s):
    return plant.observation(x_ref - s) - plant.observation(x_ref)


def attack_affine_step(s, plant, x_ref):
    """Input-free recursion for plants declared as ``drift(x) + B u``."""
    if not plant.is_input_affine:
        raise ContractError("plant is not declared input affine")
    x_fake = x_ref - s
    a = plant.observation(x_fake) - plant.observation(x_ref)
    return a, plant.drift(x_ref) - plant.drift(x_fake)


def attack_lti_step(A, C, s):
    """Linear recursion: returns ``(-C s, A s)``."""
    return -matvec(np.atleast_2d(C), s), matvec(np.atleast_2d(A), s)


def select_s0(A, magnitude, mode="unstable_eigvec", C=None):
    """Initial attack state along an unstable direction of ``A``.

    ``unstable_eigvec`` takes the fastest-growing unstable mode.  For a complex
    pair the direction in its real 2-plane with the largest one-step growth
    is used.  ``min_sensor_support`` picks, among unstable modes whose
    output ``C q`` is not identically zero, the one touching the fewest sensors.
    """
    if not magnitude > 0:
        raise ContractError("magnitude must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    eigvals, eigvecs = np.linalg.eig(A)
    unstable = [i for i in np.argsort(-np.abs(eigvals)) if np.abs(eigvals[i]) > 1.0]
    if not unstable:
        raise NoImpactfulDirection("no eigenvalue outside the unit circle")
    candidates = [_real_direction(A, eigvals[i], eigvecs[:, i]) for i in unstable]
    if mode == "unstable_eigvec":
        chosen = candidates[0]
    elif mode == "min_sensor_support":
        if C is None:
            raise ContractError("min_sensor_support mode needs the output matrix C")
        C = np.atleast_2d(np.asarray(C, dtype=float))
        supports = [int(np.sum(np.abs(C @ q) > SUPPORT_TOL)) for q in candidates]
        usable = [(sup, k) for k, sup in enumerate(supports) if sup > 0]
        if not usable:
            raise NoImpactfulDirection("every unstable mode is invisible to the sensors")
        chosen = candidates[min(usable)[1]]
    else:
        raise ContractError(f"unknown s0 mode {mode!r}")
    return magnitude * chosen


def _real_direction(A, eigval, eigvec):
    if abs(eigval.imag) < 1e-12:
        q = np.real(eigvec)
    else:
        basis = np.linalg.qr(np.column_stack([eigvec.real, eigvec.imag]))[0]
        # Top right singular vector of A restricted to the plane maximizes one-step growth.
        _, _, vt = np.linalg.svd(A @ basis)
        q = basis @ vt[0]
    q = q / np.linalg.norm(q)
    pivot = np.argmax(np.abs(q))
    return q if q[pivot] > 0 else -q


def one_shot_outlier(sensor_index, magnitude, output_dim, horizon):
    """Injection sequence with ``a_0 = magnitude * e_i`` and zero afterwards."""
    if not np.isfinite(magnitude):
        raise ContractError("magnitude must be finite")
    seq = np.zeros((horizon + 1, output_dim))
    seq[0, sensor_index] = magnitude
    return seq


# ---------------------------------------------------------------- generators

class _Runner:
    s = None

    def kill(self, rows):
        if self.s is not None:
            self.s = self.s.copy()
            self.s[rows] = np.nan

    def advance(self, t, x_a, u_a, y_ca):
        pass


def _batch_s0(s0, n_runs, n):
    s0 = np.asarray(s0, dtype=float)
    return np.broadcast_to(s0, (n_runs, n)).copy()


def resolve_s0(plant, s0=None, magnitude=None, mode="unstable_eigvec", x_op=None, u_op=None):
    """Explicit ``s0`` or one chosen from the plant's linearization."""
    if s0 is not None:
        return np.asarray(s0, dtype=float)
    A, _, C = linearize(plant, x_op, u_op)
    return select_s0(A, magnitude, mode, C)


@dataclass(frozen=True, eq=False)
class ModelOneAttack:
    """Attacker knowing the true state and input at every step."""

    s0: np.ndarray
    input_free: bool = False
    allow_zero: bool = False

    def __post_init__(self):
        s0 = np.asarray(self.s0, dtype=float).reshape(-1)
        if not self.allow_zero and not np.any(s0):
            raise ContractError("s0 = 0 gives the null attack")
        object.__setattr__(self, "s0", s0)

    def describe(self):
        return {"attack": "model1", "s0": self.s0.tolist(), "s0_norm": float(np.linalg.norm(self.s0)),
                "input_free": self.input_free}

    def start(self, plant, ctrl, streams, history):
        if self.input_free and not plant.is_input_affine:
            raise ContractError("input_free recursion needs an input-affine plant")
        return _ModelOneRun(self, plant, len(streams))


class _ModelOneRun(_Runner):
    def __init__(self, gen, plant, n_runs):
        self.gen, self.plant = gen, plant
        self.s = _batch_s0(gen.s0, n_runs, plant.state_dim)

    def inject(self, t, x_a, y_a):
        return injection_for(self.plant, x_a, self.s)

    def advance(self, t, x_a, u_a, y_ca):
        if self.gen.input_free:
            self.s = attack_affine_step(self.s, self.plant, x_a)[1]
        else:
            self.s = attack1_step(self.s, self.plant, x_a, u_a)[1]


@dataclass(frozen=True, eq=False)
class ModelTwoAttack:
    """Attacker with an estimate of the state and a shadow copy of the controller.

    The shadow controller listens from the start of the estimator window,
    starting from the controller's design-time initial state plus
    ``shadow_offset``.
    """

    s0: np.ndarray
    estimator: object
    shadow_offset: Optional[np.ndarray] = None
    input_free: bool = False

    def __post_init__(self):
        s0 = np.asarray(self.s0, dtype=float).reshape(-1)
        if not np.any(s0):
            raise ContractError("s0 = 0 gives the null attack")
        object.__setattr__(self, "s0", s0)

    def describe(self):
        d = {"attack": "model2", "s0": self.s0.tolist(), "s0_norm": float(np.linalg.norm(self.s0)),
             "shadow_offset_norm": 0.0 if self.shadow_offset is None else float(np.linalg.norm(self.shadow_offset))}
        d.update(self.estimator.describe())
        return d

    def start(self, plant, ctrl, streams, history):
        return _ModelTwoRun(self, plant, ctrl, streams, history)


class _ModelTwoRun(_Runner):
    def __init__(self, gen, plant, ctrl, streams, history):
        self.gen, self.plant, self.ctrl = gen, plant, ctrl
        n_runs = len(streams)
        est = gen.estimator
        rng = _batch_rng(streams, 1)
        self.est = EstimatorRun(est, plant, n_runs, rng)
        window = history.length if est.window is None else min(est.window, history.length)
        lo = history.length - window
        X = np.broadcast_to(ctrl.initial_state, (n_runs, ctrl.internal_dim)).copy()
        if gen.shadow_offset is not None:
            X = X + np.asarray(gen.shadow_offset, dtype=float)
        shadow_inputs = np.zeros((n_runs, window, plant.input_dim))
        received = history.received_outputs[:, lo:]
        for k in range(window):
            X = ctrl.update(X, received[:, k])
            shadow_inputs[:, k] = ctrl.output(X, received[:, k])
        self.X_shadow = X
        if est.kind == "case1":
            self.est.warm_start(history.true_outputs[:, lo:], shadow_inputs)
        elif est.kind == "case2":
            readings = np.stack([self.est.own_measurement(history.states[:, lo + k]) for k in range(window)], axis=1) \
                if window else np.zeros((n_runs, 0, plant.state_dim))
            self.est.warm_start(readings, shadow_inputs)
        self.s = _batch_s0(gen.s0, n_runs, plant.state_dim)
        self.x_hat = None
        self.y_a = None
        self.estimates = []

    def inject(self, t, x_a, y_a):
        kind = self.gen.estimator.kind
        if kind == "case2":
            reading = self.est.own_measurement(x_a)
            if self.est.filtered is None:
                self.est.warm_start(reading[:, None], np.zeros((x_a.shape[0], 0, self.plant.input_dim)))
                self.x_hat = self.est.filtered
            else:
                self.est.predict()
                self.x_hat = self.est.correct(reading, self.est.u_prev)
        else:
            self.x_hat = self.est.predict(x_a)
        self.y_a = y_a
        self.estimates.append(self.x_hat)
        return injection_for(self.plant, self.x_hat, self.s)

    def advance(self, t, x_a, u_a, y_ca):
        X_prev = self.X_shadow
        self.X_shadow = self.ctrl.update(X_prev, y_ca)
        u_s = self.ctrl.output(self.X_shadow, y_ca)
        x_hat, x_fake = self.x_hat, self.x_hat - self.s
        if self.gen.input_free and self.plant.is_input_affine:
            self.s = self.plant.drift(x_hat) - self.plant.drift(x_fake)
        else:
            self.s = self.plant.transition(x_hat, u_s) - self.plant.transition(x_fake, u_s)
        if self.gen.estimator.kind == "case1":
            self.est.correct(self.y_a, u_s)
        else:
            self.est.u_prev = u_s


def _batch_rng(streams, k):
    """One generator for a batch, seeded from every run's child stream.

    Draws are taken per run so a run's values do not depend on batch size.
    """
    return _PerRunRng([s.child(k) for s in streams])


class _PerRunRng:
    def __init__(self, gens):
        self.gens = gens

    def standard_normal(self, shape):
        return np.stack([g.standard_normal(shape[1:]) for g in self.gens])

    def random(self, size):
        return np.array([g.random() for g in self.gens])

    def uniform(self, low, high, shape):
        return np.stack([g.uniform(low, high, shape[1:]) for g in self.gens])


@dataclass(frozen=True, eq=False)
class LtiAttack:
    """Attack using only ``A`` and ``C``: ``s' = A s``, ``a = -C s``."""

    A: np.ndarray
    C: np.ndarray
    s0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, dtype=float)))
        object.__setattr__(self, "C", np.atleast_2d(np.asarray(self.C, dtype=float)))
        object.__setattr__(self, "s0", np.asarray(self.s0, dtype=float).reshape(-1))

    def describe(self):
        return {"attack": "lti", "s0": self.s0.tolist(), "s0_norm": float(np.linalg.norm(self.s0))}

    def start(self, plant, ctrl, streams, history):
        return _LtiRun(self, len(streams))

    def sequence(self, steps):
        """Closed-form ``(s_t, a_t)`` for ``t = 0..steps-1`` by iteration."""
        s = self.s0.copy()
        out_s, out_a = [], []
        for _ in range(steps):
            a, s_next = attack_lti_step(self.A, self.C, s)
            out_s.append(s)
            out_a.append(a)
            s = s_next
        return np.array(out_s), np.array(out_a)


class _LtiRun(_Runner):
    def __init__(self, gen, n_runs):
        self.gen = gen
        self.s = _batch_s0(gen.s0, n_runs, gen.s0.size)

    def inject(self, t, x_a, y_a):
        return -matvec(self.gen.C, self.s)

    def advance(self, t, x_a, u_a, y_ca):
        self.s = matvec(self.gen.A, self.s)


@dataclass(frozen=True, eq=False)
class SequenceAttack:
    """Fixed injection sequence ``sequence[t]`` for ``t >= 0`` (zero beyond it)."""

    sequence: np.ndarray
    label: str = "sequence"

    def describe(self):
        return {"attack": self.label}

    def start(self, plant, ctrl, streams, history):
        seq = np.asarray(self.sequence, dtype=float)
        if seq.ndim == 2:
            seq = np.broadcast_to(seq, (len(streams),) + seq.shape)
        return _SequenceRun(seq)


class _SequenceRun(_Runner):
    def __init__(self, seq):
        self.seq = seq

    def inject(self, t, x_a, y_a):
        if t < self.seq.shape[1]:
            return self.seq[:, t]
        return np.zeros_like(y_a)


def one_shot_attack(sensor_index, magnitude, output_dim):
    return SequenceAttack(one_shot_outlier(sensor_index, magnitude, output_dim, 0), label="one_shot")


@dataclass(frozen=True, eq=False)
class RandomBoundedAttack:
    """Per-run random injections, uniform in ``[-bound_i, bound_i]``.

    Each run draws its own bound (log-uniform in ``bound_range``), and with
    probability ``one_shot_prob`` the run is a single large spike on a random
    sensor at a random step instead.
    """

    bound_range: tuple = (0.1, 1e6)
    one_shot_prob: float = 0.5
    duration: int = 50

    def describe(self):
        return {"attack": "random_bounded", "bound_range": list(self.bound_range),
                "one_shot_prob": self.one_shot_prob, "duration": self.duration}

    def start(self, plant, ctrl, streams, history):
        p = plant.output_dim
        lo, hi = np.log(self.bound_range[0]), np.log(self.bound_range[1])
        seqs = []
        for s in streams:
            rng = s.child(3)
            bound = np.exp(rng.uniform(lo, hi))
            seq = np.zeros((self.duration, p))
            if rng.random() < self.one_shot_prob:
                seq[rng.integers(self.duration), rng.integers(p)] = bound * rng.choice([-1.0, 1.0])
            else:
                seq = rng.uniform(-bound, bound, (self.duration, p))
            seqs.append(seq)
        return _SequenceRun(np.stack(seqs))
