"""Stealthiness bounds, detection gaps, incremental-stability probes and envelope fits."""

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import NoiseStream, _noise_batch, simulate
from .errors import ContractError, UnderpoweredProbe

IES, IU, MARGINAL, NOT_IES = "IES", "IU", "MARGINAL", "NOT_IES"
DECAYING, NOT_DECAYING = "DECAYING", "NOT_DECAYING"


class KinfFunction:
    """Scalar gain declared to be of class K-infinity, checked on a sample grid."""

    def __init__(self, func, name="gamma"):
        self.func = func
        self.name = name

    def __call__(self, s):
        return self.func(s)

    def validate(self, grid=None):
        grid = np.concatenate([[0.0], np.logspace(-6, 6, 121)]) if grid is None else np.asarray(grid, float)
        values = np.array([float(self.func(s)) for s in grid])
        if abs(float(self.func(0.0))) > 0:
            raise ContractError(f"{self.name}(0) must be 0")
        if np.any(np.diff(values) <= 0):
            raise ContractError(f"{self.name} is not strictly increasing on the sample grid")
        if not float(self.func(1e6)) > float(self.func(1e3)):
            raise ContractError(f"{self.name} does not look unbounded")
        return self


def gaussian_kl_quadratic(mu_diff, cov):
    """Quadratic form ``mu^T cov^-1 mu`` (no one-half factor)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    mu = np.atleast_1d(np.asarray(mu_diff, dtype=float))
    try:
        c = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ContractError("covariance is not positive definite") from None
    z = np.linalg.solve(c, mu)
    return float(z @ z)


def epsilon_from_bound(b):
    if b < 0:
        raise ContractError("bound must be nonnegative")
    return float(np.sqrt(-np.expm1(-b)))


def max_inverse_eig(cov):
    return float(1.0 / np.linalg.eigvalsh(np.atleast_2d(cov)).min())


@dataclass
class StealthBoundInputs:
    kappa: float
    lam: float
    L_h: float
    L_fc: float
    s0_norm: float
    inv_process: float
    inv_measurement: float
    L_hc: Optional[float] = None
    L_f: Optional[float] = None
    b_zeta: float = 0.0
    gamma: Optional[Sequence[float]] = None

    def __post_init__(self):
        for name in ("kappa", "lam", "L_h", "L_fc", "s0_norm", "inv_process", "inv_measurement", "b_zeta"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")

    @classmethod
    def from_models(cls, ies, plant, ctrl, s0_norm, **extra):
        return cls(kappa=ies.kappa, lam=ies.lam, L_h=plant.lipschitz_h if plant.lipschitz_h is not None else 1.0,
                   L_fc=ctrl.lipschitz_fc or 0.0, L_hc=ctrl.lipschitz_hc, L_f=plant.lipschitz_f,
                   s0_norm=float(s0_norm), inv_process=max_inverse_eig(plant.process_cov),
                   inv_measurement=max_inverse_eig(plant.measurement_cov), **extra)

    def to_dict(self):
        d = asdict(self)
        if d["gamma"] is not None:
            d["gamma"] = [float(g) for g in d["gamma"]]
        return d


def _require_ies(lam):
    if not lam < 1:
        raise ContractError(f"bound needs an IES closed loop (lambda = {lam} >= 1)")


def beps_model1(inp):
    _require_ies(inp.lam)
    gain = inp.kappa ** 2 * (1 + inp.L_fc * inp.L_h) ** 2 * inp.s0_norm ** 2 / (1 - inp.lam ** 2)
    return gain * (inp.inv_process + inp.L_h ** 2 * inp.inv_measurement)


def beps_model2(inp, case=1):
    """Bound series ``b(t)`` for ``t = 0 .. len(gamma) - 1``.

    Case 1 carries the ``(1 + L_fc L_h)`` factors on the ``s0`` terms, case 2
    drops them; ``b_zeta`` plays the role of the respective error bound.
    """
    _require_ies(inp.lam)
    if inp.gamma is None or len(inp.gamma) == 0:
        raise ContractError("gamma sequence is required")
    gamma = np.asarray(inp.gamma, dtype=float)
    if not np.all(np.isfinite(gamma)):
        raise ContractError("gamma sequence has missing values")
    if case not in (1, 2):
        raise ContractError("case must be 1 or 2")
    lw, lv, Lh2, bz = inp.inv_process, inp.inv_measurement, inp.L_h ** 2, inp.b_zeta
    amp = (1 + inp.L_fc * inp.L_h) if case == 1 else 1.0
    k, lam, s0 = inp.kappa, inp.lam, inp.s0_norm
    first = k ** 2 * amp ** 2 * s0 ** 2 / (1 - lam ** 2) * (lw + Lh2 * lv)
    second = k * amp * s0 / (1 - lam) * (2 * gamma[0] * lw + Lh2 * lv * (2 * gamma[0] + bz))
    third = np.cumsum(gamma ** 2) * (lw + Lh2 * lv)
    fourth = np.cumsum(gamma) * 2 * Lh2 * bz * lv
    fifth = np.arange(1, gamma.size + 1) * bz ** 2 * Lh2 * lv
    return first + second + third + fourth + fifth


@dataclass
class StealthReport:
    inputs: dict
    bound: float
    epsilon: float
    diagnostics: dict = field(default_factory=dict)


def stealth_report_model1(inp, diagnostics=None):
    b = beps_model1(inp)
    return StealthReport(inp.to_dict(), float(b), epsilon_from_bound(b), diagnostics or {})


@dataclass
class DetectionGap:
    p_td: np.ndarray
    p_fa: np.ndarray
    se_td: np.ndarray
    se_fa: np.ndarray
    gap: float
    gap_stderr: float
    gap_index: int


def empirical_detection_gap(alarms_attacked, alarms_free):
    """Per-step true/false alarm rates and the largest excess of the former."""
    a = np.asarray(alarms_attacked, dtype=bool)
    f = np.asarray(alarms_free, dtype=bool)
    if a.size == 0 or f.size == 0:
        raise ContractError("detection gap needs non-empty batches")
    if a.shape[1:] != f.shape[1:]:
        raise ContractError("batches must share the horizon")
    p_td, p_fa = a.mean(axis=0), f.mean(axis=0)
    se_td = np.sqrt(p_td * (1 - p_td) / a.shape[0])
    se_fa = np.sqrt(p_fa * (1 - p_fa) / f.shape[0])
    diff = p_td - p_fa
    i = int(np.argmax(diff))
    return DetectionGap(p_td, p_fa, se_td, se_fa, float(diff[i]), float(np.hypot(se_td[i], se_fa[i])), i)


# ---------------------------------------------------------------- stability probes

def classify_lti(A, tol=1e-9):
    rho = float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(A)))))
    if rho < 1 - tol:
        return IES
    if rho > 1 + tol:
        return IU
    return MARGINAL


@dataclass
class IesEstimate:
    verdict: str
    kappa: float
    lam: float
    slope: float
    r2: float
    n_points: int
    n_pairs: int
    delta0: float

    @property
    def is_ies(self):
        return self.verdict == IES

    def to_dict(self):
        return asdict(self)


def _pooled_fit(t, y):
    X = np.column_stack([np.ones_like(t), t])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss if ss > 0 else 1.0
    return coef[0], coef[1], r2


def _pre_floor(series, floor):
    below = np.nonzero(~(series > floor))[0]
    return series.size if below.size == 0 else int(below[0])


def separation_series(plant, ctrl, n_pairs, delta0, horizon, seed, warmup=0, x_init=None):
    """Closed-loop separation ``||(x, X) - (x', X')||`` of perturbed pairs under common noise."""
    streams = [NoiseStream(seed, i) for i in range(n_pairs)]
    n_steps = warmup + horizon + 1
    w, v = _noise_batch(plant, streams, n_steps)
    n, q = plant.state_dim, ctrl.internal_dim
    x0 = np.zeros((n_pairs, n)) if x_init is None else np.broadcast_to(np.asarray(x_init, float), (n_pairs, n))
    X0 = np.broadcast_to(ctrl.initial_state, (n_pairs, q))
    if warmup:
        _, x0, X0 = simulate(plant, ctrl, x0, X0, w[:, :warmup], v[:, :warmup], t_start=-warmup)
    dirs = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 7]))).standard_normal((n_pairs, n + q))
    dirs *= delta0 / np.linalg.norm(dirs, axis=1, keepdims=True)
    base, _, _ = simulate(plant, ctrl, x0, X0, w[:, warmup:], v[:, warmup:])
    pert, _, _ = simulate(plant, ctrl, x0 + dirs[:, :n], X0 + dirs[:, n:], w[:, warmup:], v[:, warmup:])
    diff = np.concatenate([pert.x - base.x, pert.X - base.X], axis=-1)
    with np.errstate(invalid="ignore"):
        return np.linalg.norm(diff, axis=-1)


def estimate_ies(plant, ctrl, n_pairs=20, delta0=1e-6, horizon=200, seed=0, warmup=0,
                 floor=1e-12, divergence_factor=1e4, min_points=5):
    """Fit ``||dX_t|| <= kappa ||dX_0|| lambda^t`` from perturbed paired rollouts."""
    if not delta0 > 0:
        raise ContractError("delta0 must be positive")
    sep = separation_series(plant, ctrl, n_pairs, delta0, horizon, seed, warmup)
    diverged = bool(np.any(~np.isfinite(sep)) or np.any(sep > divergence_factor * delta0))
    ts, ys = [], []
    for row in sep:
        row = np.where(np.isfinite(row), row, np.inf)
        stop = _pre_floor(np.minimum(row, 1e300), floor)
        seg = row[:stop]
        seg = seg[np.isfinite(seg)]
        ts.append(np.arange(seg.size, dtype=float))
        ys.append(np.log(seg / row[0]))
    t, y = np.concatenate(ts), np.concatenate(ys)
    if t.size < min_points * n_pairs:
        raise UnderpoweredProbe(
            f"only {t.size} points above the floor {floor:g}; increase delta0 (now {delta0:g})")
    _, slope, r2 = _pooled_fit(t, y)
    lam = float(np.exp(slope))
    kappa = float(max(1.0, np.exp(np.max(y - slope * t))))
    verdict = NOT_IES if (diverged or slope >= 0) else IES
    return IesEstimate(verdict, kappa, lam, float(slope), r2, int(t.size), n_pairs, delta0)


@dataclass
class Envelope:
    verdict: str
    eta: float
    lam: float
    max_violation: float
    r2: float
    n_fit: int

    @property
    def decaying(self):
        return self.verdict == DECAYING

    def to_dict(self):
        return asdict(self)


def fit_exponential_envelope(series, floor=1e-10):
    """Fit ``g_t <= eta lambda^t`` on the segment before ``g`` first reaches ``floor``."""
    g = np.asarray(series, dtype=float)
    if g.ndim != 1 or g.size < 10:
        raise ContractError("envelope fit needs a 1-D series of length >= 10")
    if np.any(g < 0):
        raise ContractError("series must be nonnegative")
    stop = _pre_floor(g, floor)
    t = np.arange(stop, dtype=float)
    if stop < 2:
        return Envelope(NOT_DECAYING, float(g[0]), 1.0, float("inf"), 0.0, stop)
    log_g = np.log(g[:stop])
    icpt, slope, r2 = _pooled_fit(t, log_g)
    if slope >= -1e-12:
        return Envelope(NOT_DECAYING, float(np.exp(icpt)), float(np.exp(slope)), float("inf"), r2, stop)
    lam = float(np.exp(slope))
    eta = float(max(np.exp(icpt), np.exp(np.max(log_g - slope * t))))
    t_all = np.arange(g.size, dtype=float)
    above = g > floor
    ratio = g[above] / (eta * lam ** t_all[above])
    return Envelope(DECAYING, eta, lam, float(ratio.max()), r2, stop)
