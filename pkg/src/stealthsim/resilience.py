"""Outlier-rejecting controller wrapper and its deviation bound."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import ControllerModel
from .errors import ContractError
from .metrics import KinfFunction

NOMINAL_MODES = ("ekf_prediction", "moving_average", "constant")
ACTIONS = ("clamp", "substitute")


@dataclass(frozen=True, eq=False)
class OutlierFilterConfig:
    """Per-sensor gate ``|y_i - ybar_i| <= eta``; ``eta = inf`` disables it.

    ``nominal`` is the fixed nominal measurement for ``constant`` mode and the
    initial content of the averaging buffer for ``moving_average``.
    """

    eta: object
    nominal_mode: str = "ekf_prediction"
    action: str = "clamp"
    window: int = 5
    nominal: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.any(~(np.asarray(self.eta, dtype=float) > 0)):
            raise ContractError("eta must be positive")
        if self.nominal_mode not in NOMINAL_MODES:
            raise ContractError(f"unknown nominal mode {self.nominal_mode!r}")
        if self.action not in ACTIONS:
            raise ContractError(f"unknown rejection action {self.action!r}")
        if self.nominal_mode == "moving_average" and self.window < 1:
            raise ContractError("moving-average window must be at least 1")
        if self.nominal_mode == "constant" and self.nominal is None:
            raise ContractError("constant mode needs a nominal measurement")


def outlier_filter(y_c, y_bar, cfg):
    eta = np.asarray(cfg.eta, dtype=float)
    y_c = np.asarray(y_c, dtype=float)
    y_bar = np.broadcast_to(np.asarray(y_bar, dtype=float), y_c.shape)
    if np.all(np.isinf(eta)):
        return y_c.copy()
    outside = np.abs(y_c - y_bar) > eta
    if cfg.action == "clamp":
        fallback = np.clip(y_c, y_bar - eta, y_bar + eta)
    else:
        fallback = y_bar
    return np.where(outside, fallback, y_c)


def rejected(y_c, y_bar, eta):
    """Mask of sensor readings the gate would alter."""
    return np.abs(np.asarray(y_c) - np.asarray(y_bar)) > np.asarray(eta, dtype=float)


def deviation_bound(gamma, gamma_c, L_hc, eta):
    """Worst-case state deviation ``gamma(L_hc (gamma_c(2 eta) + eta))``."""
    if L_hc < 0 or eta < 0:
        raise ContractError("L_hc and eta must be nonnegative")
    for g in (gamma, gamma_c):
        (g if isinstance(g, KinfFunction) else KinfFunction(g)).validate()
    return float(gamma(L_hc * (gamma_c(2 * eta) + eta)))


def resilient_controller_wrap(ctrl, cfg, output_dim=None):
    """Controller that gates measurements before ``f_c`` and ``h_c``.

    The wrapped state is ``[X, y_used, buffer]``: the inner state, the last
    gated measurement (so ``h_c`` sees the same value as ``f_c``) and, for the
    moving-average nominal, the last ``window`` gated measurements.
    """
    if cfg.nominal_mode == "ekf_prediction" and ctrl.expected_output is None:
        raise ContractError("ekf_prediction nominal needs a controller with an attached estimator")
    if output_dim is None:
        if ctrl.innovation_cov is not None:
            output_dim = ctrl.innovation_cov.shape[0]
        elif cfg.nominal is not None:
            output_dim = np.asarray(cfg.nominal).size
        else:
            raise ContractError("output_dim is required")
    q, p = ctrl.internal_dim, output_dim
    buf = cfg.window * p if cfg.nominal_mode == "moving_average" else 0
    eta = np.asarray(cfg.eta, dtype=float)
    slack = 1e-9 * np.where(np.isinf(eta), 1.0, np.maximum(eta, 1.0))

    def nominal(X_aug_prev):
        if cfg.nominal_mode == "ekf_prediction":
            return ctrl.expected_output(X_aug_prev[..., :q])
        if cfg.nominal_mode == "constant":
            return np.broadcast_to(np.asarray(cfg.nominal, float), X_aug_prev.shape[:-1] + (p,))
        hist = X_aug_prev[..., q + p:].reshape(X_aug_prev.shape[:-1] + (cfg.window, p))
        return hist.mean(axis=-2)

    def update(X_aug_prev, y_c):
        y_bar = nominal(X_aug_prev)
        y_used = outlier_filter(y_c, y_bar, cfg)
        with np.errstate(invalid="ignore"):
            if np.any(np.abs(y_used - y_bar) > eta + slack):
                raise AssertionError("outlier filter output left the eta band")
        X = ctrl.update(X_aug_prev[..., :q], y_used)
        parts = [X, y_used]
        if buf:
            parts.append(np.concatenate([X_aug_prev[..., q + 2 * p:], y_used], axis=-1))
        return np.concatenate(parts, axis=-1)

    def output(X_aug, y_c):
        return ctrl.output(X_aug[..., :q], X_aug[..., q:q + p])

    init = [ctrl.initial_state, np.zeros(p) if cfg.nominal is None else np.asarray(cfg.nominal, float)]
    if buf:
        start = np.zeros(p) if cfg.nominal is None else np.asarray(cfg.nominal, float)
        init.append(np.tile(start, cfg.window))
    expected = None
    if ctrl.expected_output is not None:
        expected = lambda X_aug_prev: ctrl.expected_output(X_aug_prev[..., :q])
    return ControllerModel(
        internal_dim=q + p + buf, update=update, output=output, initial_state=np.concatenate(init),
        lipschitz_fc=ctrl.lipschitz_fc, lipschitz_hc=ctrl.lipschitz_hc, expected_output=expected,
        innovation_cov=ctrl.innovation_cov, name=f"{ctrl.name}+outlier_filter",
        params={"inner_dim": q, "output_dim": p, "eta": np.atleast_1d(eta).tolist(),
                "nominal_mode": cfg.nominal_mode, "action": cfg.action},
    )


def gated_measurements(traj, ctrl_wrapped):
    """Gated measurements recorded inside a wrapped controller's state."""
    q, p = ctrl_wrapped.params["inner_dim"], ctrl_wrapped.params["output_dim"]
    return traj.controller_states[..., q:q + p]


def rejection_rate(traj, ctrl_wrapped, start=0):
    """Fraction of sensor-steps (from index ``start``) the gate altered, per run."""
    used = gated_measurements(traj, ctrl_wrapped)[:, start:]
    received = traj.received_outputs[:, start:]
    return np.mean(used != received, axis=(1, 2))
