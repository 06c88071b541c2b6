"""Residual detectors, threshold calibration and alarm-rate measurement.

Detectors see the normalized statistic ``g_t = r_t^T S^-1 r_t`` of the
residual ``r_t = y_t^c - y_hat_t``, where ``y_hat_t`` is the controller's own
one-step prediction.  Each detector has a single-step form (a state object and
a step function) and a vectorized offline form over an ``(n_runs, n_steps)``
array of statistics; both give the same numbers.
"""

from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .dynamics import NoiseStream, run_free
from .errors import CalibrationUnderpowered, ContractError, DetectorConfigError

KINDS = ("chi2", "cusum", "random_guess")
MIN_EXPECTED_EXCEEDANCES = 50


def _precision(S):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise DetectorConfigError("residual covariance is not positive definite") from None
    return np.linalg.inv(S)


def normalized_statistic(residuals, S):
    """``r^T S^-1 r`` along the last axis."""
    P = _precision(S)
    r = np.asarray(residuals, dtype=float)
    return np.einsum("...i,ij,...j->...", r, P, r)


def residuals(traj):
    if traj.expected_outputs is None:
        raise DetectorConfigError("controller provides no expected measurement")
    return traj.received_outputs - traj.expected_outputs


@dataclass(frozen=True)
class DetectorSpec:
    """Detector kind and parameters; ``threshold`` is frozen once calibrated.

    ``window`` is the chi-squared summation window, ``drift`` the CUSUM drift
    (default: the output dimension, the statistic's attack-free mean) and
    ``rate`` the alarm probability of the random-guess baseline.
    """

    kind: str
    threshold: Optional[float] = None
    window: int = 1
    drift: Optional[float] = None
    rate: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DetectorConfigError(f"unknown detector kind {self.kind!r}")
        if self.window < 1:
            raise DetectorConfigError("chi2 window must be at least 1")
        if self.kind == "cusum" and self.drift is not None and not self.drift > 0:
            raise DetectorConfigError("CUSUM drift must be positive")
        if self.kind == "random_guess" and not (self.rate is not None and 0 <= self.rate <= 1):
            raise DetectorConfigError("random_guess needs a rate in [0, 1]")

    def with_drift_for(self, output_dim):
        if self.kind == "cusum" and self.drift is None:
            return replace(self, drift=float(output_dim))
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DetectorState:
    spec: DetectorSpec
    statistic: float = 0.0
    recent: deque = field(default_factory=deque)
    alarms: list = field(default_factory=list)

    def _require_threshold(self):
        if self.spec.threshold is None:
            raise DetectorConfigError("detector has no threshold")
        return self.spec.threshold


def chi2_step(st, r, S):
    tau = st._require_threshold()
    g = float(normalized_statistic(r, S))
    st.recent.append(g)
    if len(st.recent) > st.spec.window:
        st.recent.popleft()
    st.statistic = float(sum(st.recent))
    alarm = st.statistic > tau
    st.alarms.append(alarm)
    return st.statistic, alarm


def cusum_step(st, r, S, g=None):
    """One CUSUM update; pass ``g`` directly to skip the quadratic form."""
    tau = st._require_threshold()
    drift = st.spec.drift
    if drift is None or not drift > 0:
        raise DetectorConfigError("CUSUM drift must be positive")
    if g is None:
        g = float(normalized_statistic(r, S))
    st.statistic = max(0.0, st.statistic + g - drift)
    alarm = st.statistic > tau
    st.alarms.append(alarm)
    value = st.statistic
    if alarm:
        st.statistic = 0.0
    return value, alarm


def random_guess_step(st, rng):
    alarm = bool(rng.random() < st.spec.rate)
    st.alarms.append(alarm)
    return alarm


def chi2_statistic(g, window=1):
    """Sliding sum of the last ``window`` values along the time axis."""
    g = np.asarray(g, dtype=float)
    if window == 1:
        return g.copy()
    out = np.zeros_like(g)
    for lag in range(window):
        out[..., lag:] += g[..., : g.shape[-1] - lag]
    return out


def cusum_statistic(g, drift, threshold):
    """CUSUM path with reset; returns ``(statistic, alarms)``.

    The reported statistic at an alarm step is the pre-reset value.
    """
    g = np.asarray(g, dtype=float)
    stat = np.empty_like(g)
    alarms = np.zeros(g.shape, dtype=bool)
    S = np.zeros(g.shape[:-1])
    with np.errstate(invalid="ignore"):
        for k in range(g.shape[-1]):
            S = np.maximum(0.0, S + g[..., k] - drift)
            stat[..., k] = S
            hit = S > threshold
            alarms[..., k] = hit
            S = np.where(hit, 0.0, S)
    return stat, alarms


def run_detector(spec, g, rng=None):
    """Alarms (boolean, same shape as ``g``) of a calibrated detector."""
    g = np.asarray(g, dtype=float)
    if spec.kind == "random_guess":
        if rng is None:
            raise DetectorConfigError("random_guess needs a random generator")
        return rng.random(g.shape) < spec.rate
    if spec.threshold is None:
        raise DetectorConfigError("detector has no threshold")
    with np.errstate(invalid="ignore"):
        if spec.kind == "chi2":
            return chi2_statistic(g, spec.window) > spec.threshold
    if spec.drift is None:
        raise DetectorConfigError("CUSUM drift unset")
    return cusum_statistic(g, spec.drift, spec.threshold)[1]


@dataclass
class AlarmRate:
    rate: np.ndarray
    stderr: np.ndarray
    aggregate: float
    aggregate_stderr: float
    window: tuple
    n_runs: int


def alarm_rate(alarms, window=None):
    """Per-step fraction of alarming runs and its mean over ``window`` = (start, stop)."""
    alarms = np.asarray(alarms, dtype=bool)
    if alarms.ndim != 2 or alarms.shape[0] == 0:
        raise ContractError("alarm_rate needs a non-empty (n_runs, n_steps) batch")
    n = alarms.shape[0]
    rate = alarms.mean(axis=0)
    se = np.sqrt(rate * (1 - rate) / n)
    lo, hi = (0, alarms.shape[1]) if window is None else window
    agg = float(alarms[:, lo:hi].mean())
    agg_se = float(np.sqrt(agg * (1 - agg) / alarms[:, lo:hi].size))
    return AlarmRate(rate, se, agg, agg_se, (lo, hi), n)


def moving_average(series, window):
    """Trailing moving average; the first ``window - 1`` entries average what exists."""
    series = np.asarray(series, dtype=float)
    c = np.cumsum(np.insert(series, 0, 0.0))
    idx = np.arange(1, series.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class Calibration:
    """Serializable calibration artifact."""

    spec: DetectorSpec
    target_pfa: float
    achieved_pfa: float
    runs: int
    horizon: int
    warmup: int
    seed: int
    samples: int

    def to_dict(self):
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["spec"] = DetectorSpec.from_dict(d["spec"])
        return cls(**d)


def attack_free_statistics(plant, ctrl, runs, horizon, seed, warmup=100, chunk=100, first_id=0):
    """Normalized residual statistic of attack-free rollouts, shape (runs, warmup + horizon + 1)."""
    if ctrl.innovation_cov is None:
        raise DetectorConfigError("controller provides no innovation covariance")
    out = []
    for lo in range(0, runs, chunk):
        streams = [NoiseStream(seed, first_id + i) for i in range(lo, min(runs, lo + chunk))]
        traj = run_free(plant, ctrl, horizon, warmup, streams)
        out.append(normalized_statistic(residuals(traj), ctrl.innovation_cov))
    return np.concatenate(out)


def threshold_for(spec, g, target_pfa, start=0):
    """Threshold whose pooled per-step alarm rate on ``g[:, start:]`` hits the target."""
    if spec.kind == "chi2":
        stat = chi2_statistic(g, spec.window)[:, start:]
        return float(np.quantile(stat[np.isfinite(stat)], 1 - target_pfa))
    if spec.kind != "cusum":
        raise DetectorConfigError(f"{spec.kind} has no threshold to calibrate")

    def rate(tau):
        return cusum_statistic(g, spec.drift, tau)[1][:, start:].mean()

    # The reset makes the path depend on the threshold, so search instead of a quantile.
    lo, hi = 0.0, max(1.0, float(np.nanmax(np.cumsum(np.maximum(g - spec.drift, 0), axis=1))))
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if rate(mid) > target_pfa:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-9 * max(1.0, hi):
            break
    return hi


def calibrate_threshold(spec, plant, ctrl, target_pfa, runs, horizon, seed, warmup=100):
    """Calibrate a detector on attack-free rollouts; returns a :class:`Calibration`."""
    if not 0 < target_pfa < 1:
        raise ContractError("target_pfa must lie in (0, 1)")
    if runs * horizon * target_pfa < MIN_EXPECTED_EXCEEDANCES:
        raise CalibrationUnderpowered(
            f"{runs} runs x {horizon} steps give {runs * horizon * target_pfa:.1f} expected "
            f"exceedances at p={target_pfa}; need at least {MIN_EXPECTED_EXCEEDANCES}")
    spec = spec.with_drift_for(plant.output_dim)
    g = attack_free_statistics(plant, ctrl, runs, horizon, seed, warmup)
    tau = threshold_for(spec, g, target_pfa, start=warmup)
    calibrated = replace(spec, threshold=tau)
    achieved = float(run_detector(calibrated, g)[:, warmup:].mean())
    return Calibration(calibrated, target_pfa, achieved, runs, horizon, warmup, int(seed), runs * (horizon + 1))
