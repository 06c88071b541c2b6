"""Monte-Carlo experiment runner: configuration, orchestration, aggregation and output.

A configuration names a model, controller, attack and detectors; the runner
calibrates detectors on attack-free rollouts, simulates paired rollouts in
fixed chunks of run indices (run ``i`` always uses noise stream ``i``) and folds
the chunk results in index order, so the report does not depend on the
worker count.
"""

import copy
import csv
import hashlib
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import __version__
from .attacks import (LtiAttack, ModelOneAttack, ModelTwoAttack, RandomBoundedAttack, select_s0,
                      one_shot_attack)
from .detection import (Calibration, DetectorSpec, alarm_rate, calibrate_threshold, moving_average,
                        normalized_statistic, residuals, run_detector)
from .dynamics import PRNG_ALGORITHM, NoiseStream, run_paired
from .errors import ExperimentError, StealthSimError
from .estimation import AttackerEstimator, case1_estimator, case2_estimator, linearize
from .metrics import (DECAYING, StealthBoundInputs, beps_model1, beps_model2, empirical_detection_gap,
                      epsilon_from_bound, estimate_ies, fit_exponential_envelope)
from .models import (cartpole_controller, cartpole_plant, hover_state, lqg_build, quadrotor_controller,
                     quadrotor_plant, resilience_example, scalar_examples)
from .resilience import OutlierFilterConfig, rejection_rate, resilient_controller_wrap


@dataclass
class ExperimentConfig:
    """Experiment description; see ``configs/`` for annotated examples.

    ``sweep`` is ``{"axis": "<dotted.path>", "values": [...]}`` where the path
    addresses a field of this config, e.g. ``attack.s0_norm`` or
    ``model.noise_var``.
    """

    name: str
    model: dict
    controller: dict = field(default_factory=dict)
    attack: dict = field(default_factory=lambda: {"kind": "none"})
    detectors: list = field(default_factory=list)
    calibration: dict = field(default_factory=lambda: {"target_pfa": 0.002, "runs": 200, "horizon": 1000})
    horizon: int = 300
    warmup: int = 100
    n_runs: int = 500
    master_seed: int = 0
    impact_threshold: float = 0.4
    impact_component: Optional[int] = None
    fall_threshold: float = math.pi / 4
    fall_component: Optional[int] = None
    post_impact_window: Optional[int] = None
    smoothing_window: int = 10
    ies: dict = field(default_factory=lambda: {"n_pairs": 20, "delta0": 1e-6, "horizon": 400})
    resilience: Optional[dict] = None
    sweep: Optional[dict] = None
    chunk_size: int = 100
    max_blowup_rate: float = 0.5
    description: str = ""

    def __post_init__(self):
        if self.n_runs < 1:
            raise ExperimentError("n_runs must be at least 1")
        if self.horizon < 0 or self.warmup < 0:
            raise ExperimentError("horizon and warmup must be nonnegative")
        if "id" not in self.model:
            raise ExperimentError("model.id is required")

    def to_dict(self):
        return copy.deepcopy(asdict(self))

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ExperimentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_value(self, path, value):
        d = self.to_dict()
        node = d
        keys = path.split(".")
        for k in keys[:-1]:
            if node.get(k) is None:
                node[k] = {}
            node = node[k]
        node[keys[-1]] = value
        return ExperimentConfig.from_dict(d)


def load_config(path):
    with open(path) as fh:
        return ExperimentConfig.from_json(fh.read())


# ---------------------------------------------------------------- builders


def build_models(cfg):
    """Plant, controller and initial plant state for a config."""
    m, c = cfg.model, cfg.controller
    mid = m["id"]
    if mid == "cartpole":
        plant = cartpole_plant(sample_time=m.get("sample_time", 0.05), noise_var=m.get("noise_var", 1e-3))
        kw = {k: c[k] for k in ("state_weights", "input_weight") if k in c}
        ctrl = cartpole_controller(plant, **kw)
        x_init = np.zeros(4)
    elif mid == "quadrotor":
        plant = quadrotor_plant(sample_time=m.get("sample_time", 0.01), noise_var=m.get("noise_var", 1e-3))
        target = c.get("target", [0.0, 0.0, 10.0])
        ctrl = quadrotor_controller(plant, target=target)
        x_init = hover_state(target)
    elif mid == "lqg":
        var_w, var_v = m.get("process_var", 1.0), m.get("measurement_var", 1.0)
        A = np.atleast_2d(m.get("A", [[2.0]]))
        B = np.atleast_2d(m.get("B", [[1.0]]))
        C = np.atleast_2d(m.get("C", [[1.0]]))
        design = lqg_build(A, B, C, np.atleast_2d(c.get("Q", np.eye(A.shape[0]))),
                           np.atleast_2d(c.get("R", np.eye(B.shape[1]))),
                           var_w * np.eye(A.shape[0]), var_v * np.eye(C.shape[0]))
        plant, ctrl = design.plant, design.controller
        x_init = np.zeros(A.shape[0])
    elif mid == "scalar":
        example = m.get("example", "example1")
        if example == "resilience":
            plant, ctrl, _ = resilience_example(m.get("noise_var", 1e-2))
        else:
            plant, ctrl = scalar_examples(m.get("noise_var", 1e-2))[example]
        x_init = np.zeros(1)
    else:
        raise ExperimentError(f"unknown model id {mid!r}")
    if cfg.resilience:
        r = cfg.resilience
        eta = r["eta"]
        if isinstance(eta, dict):
            # Threshold as a multiple of the innovation standard deviation.
            eta = (eta["sigmas"] * np.sqrt(np.diag(ctrl.innovation_cov))).tolist()
        fcfg = OutlierFilterConfig(eta=np.asarray(eta, dtype=float), nominal_mode=r.get("nominal_mode", "ekf_prediction"),
                                   action=r.get("action", "clamp"), window=r.get("window", 5),
                                   nominal=None if r.get("nominal") is None else np.asarray(r["nominal"], float))
        ctrl = resilient_controller_wrap(ctrl, fcfg, plant.output_dim)
    return plant, ctrl, np.asarray(m.get("x_init", x_init), dtype=float)


def attack_direction(spec, plant, x_op):
    if spec.get("s0") is not None:
        s0 = np.asarray(spec["s0"], dtype=float)
        return s0 / np.linalg.norm(s0), float(np.linalg.norm(s0))
    norm = float(spec.get("s0_norm", 1e-8))
    if spec.get("s0_component") is not None:
        d = np.zeros(plant.state_dim)
        d[int(spec["s0_component"])] = 1.0
        return d * np.sign(norm), abs(norm)
    A, _, C = linearize(plant, x_op, spec.get("u_op"))
    return select_s0(A, 1.0, spec.get("s0_mode", "unstable_eigvec"), C), norm


def build_attack(spec, plant, ctrl, x_op):
    kind = spec.get("kind", "none")
    if kind == "none":
        return None
    if kind == "one_shot":
        return one_shot_attack(int(spec.get("sensor", 0)), float(spec["magnitude"]), plant.output_dim)
    if kind == "random_bounded":
        return RandomBoundedAttack(tuple(spec.get("bound_range", (0.1, 1e6))), spec.get("one_shot_prob", 0.5),
                                   int(spec.get("duration", 50)))
    direction, norm = attack_direction(spec, plant, x_op)
    s0 = direction * norm
    if kind == "model1":
        return ModelOneAttack(s0, input_free=spec.get("input_free", False))
    if kind == "lti":
        A, _, C = linearize(plant, x_op, spec.get("u_op"))
        return LtiAttack(A, C, s0)
    if kind == "model2":
        est = spec.get("estimator", {"kind": "bounded_error", "error_bound": 0.0})
        ekind = est.get("kind", "bounded_error")
        if ekind == "case1":
            estimator = case1_estimator(plant, window=est.get("window"))
        elif ekind == "case2":
            cov = est.get("sensor_var")
            estimator = case2_estimator(plant, sensor_cov=None if not cov else cov * np.eye(plant.state_dim))
        else:
            estimator = AttackerEstimator("bounded_error", error_bound=float(est.get("error_bound", 0.0)))
        offset = spec.get("shadow_offset")
        if offset is not None:
            offset = np.broadcast_to(np.asarray(offset, dtype=float), (ctrl.internal_dim,)).copy()
        return ModelTwoAttack(s0, estimator, shadow_offset=offset, input_free=spec.get("input_free", False))
    raise ExperimentError(f"unknown attack kind {kind!r}")


def calibration_seed(cfg):
    seed = cfg.calibration.get("seed")
    if seed is not None:
        return int(seed)
    return int(np.random.SeedSequence([int(cfg.master_seed), 1]).generate_state(1, np.uint64)[0] >> 1)


def ies_seed(cfg):
    seed = cfg.ies.get("seed")
    if seed is not None:
        return int(seed)
    return int(np.random.SeedSequence([int(cfg.master_seed), 2]).generate_state(1, np.uint64)[0] >> 1)


def calibrate(cfg, plant=None, ctrl=None):
    """Calibrate every configured detector; returns a list of :class:`Calibration`."""
    if plant is None:
        plant, ctrl, _ = build_models(cfg)
    out = []
    cal = cfg.calibration
    for d in cfg.detectors:
        spec = DetectorSpec(**d)
        if spec.kind == "random_guess":
            out.append(Calibration(spec, spec.rate, spec.rate, 0, 0, 0, 0, 0))
            continue
        out.append(calibrate_threshold(spec, plant, ctrl, cal.get("target_pfa", 0.002), cal.get("runs", 200),
                                       cal.get("horizon", 1000), calibration_seed(cfg), cal.get("warmup", cfg.warmup)))
    return out


# ---------------------------------------------------------------- rollouts


def _first_crossing(series, threshold):
    """Index of the first entry with ``series >= threshold`` per run (-1 if never)."""
    with np.errstate(invalid="ignore"):
        hit = series >= threshold
    idx = np.argmax(hit, axis=1)
    return np.where(hit.any(axis=1), idx, -1)


def _envelopes(gaps):
    lam, viol, ok = [], [], []
    for row in gaps:
        row = row[np.isfinite(row)]
        if row.size < 10:
            continue
        env = fit_exponential_envelope(row)
        ok.append(env.verdict == DECAYING)
        lam.append(env.lam)
        viol.append(env.max_violation)
    return {"lam": lam, "violation": viol, "decaying": ok}


def _run_chunk(cfg_dict, lo, hi, cal_dicts):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    plant, ctrl, x_init = build_models(cfg)
    attack = build_attack(cfg.attack, plant, ctrl, x_init)
    streams = [NoiseStream(cfg.master_seed, i) for i in range(lo, hi)]
    pair = run_paired(plant, ctrl, attack, cfg.horizon, cfg.warmup, streams, x_init=x_init)
    k0 = pair.t0_index
    free, att = pair.free, pair.attacked
    out = {"valid_until": att.valid_until - k0, "blown_up": att.blown_up | free.blown_up}

    dev = np.linalg.norm(att.states - free.states, axis=-1)[:, k0:]
    out["deviation"] = dev
    comp = cfg.impact_component
    impact_series = dev if comp is None else np.abs(att.states[..., comp] - free.states[..., comp])[:, k0:]
    out["deviation_component"] = impact_series
    out["impact_index"] = _first_crossing(impact_series, cfg.impact_threshold)
    fcomp = cfg.fall_component
    if fcomp is not None:
        out["fall_index"] = _first_crossing(np.abs(att.states[:, k0:, fcomp]), cfg.fall_threshold)
        out["angle_cross_index"] = _first_crossing(np.abs(att.states[:, k0:, fcomp]), cfg.impact_threshold)
    if pair.fake_states is not None:
        out["fake_env"] = _envelopes(np.linalg.norm(pair.fake_states - free.states, axis=-1)[:, k0:])
    if ctrl.internal_dim and attack is not None:
        q = ctrl.params.get("inner_dim", ctrl.internal_dim)
        est_gap = np.linalg.norm(att.controller_states[..., :q] - free.controller_states[..., :q], axis=-1)[:, k0:]
        out["estimator_env"] = _envelopes(est_gap)
    if cfg.resilience:
        out["rejection_free"] = rejection_rate(free, ctrl, k0)
        out["rejection_attacked"] = rejection_rate(att, ctrl, k0)
        out["rejection_steps"] = (cfg.horizon + 1) * plant.output_dim

    alarms = {}
    for i, c in enumerate(cal_dicts):
        cal = Calibration.from_dict(c)
        spec = cal.spec
        if spec.kind == "random_guess":
            rng_f = np.stack([s.child(10 + i).random(free.times.size) for s in streams])
            rng_a = np.stack([s.child(20 + i).random(free.times.size) for s in streams])
            af, aa = rng_f < spec.rate, rng_a < spec.rate
        else:
            af = run_detector(spec, normalized_statistic(residuals(free), ctrl.innovation_cov))
            aa = run_detector(spec, normalized_statistic(residuals(att), ctrl.innovation_cov))
        alarms[f"{spec.kind}_{i}"] = (af[:, k0:], aa[:, k0:])
    out["alarms"] = alarms
    return out


def _fold(chunks):
    """Concatenate chunk outputs in run-index order."""
    first = chunks[0]
    merged = {}
    for key, val in first.items():
        if key == "alarms":
            merged[key] = {d: tuple(np.concatenate([c[key][d][j] for c in chunks]) for j in (0, 1)) for d in val}
        elif isinstance(val, dict):
            merged[key] = {k: sum((c[key][k] for c in chunks), []) for k in val}
        elif isinstance(val, np.ndarray):
            merged[key] = np.concatenate([c[key] for c in chunks])
        else:
            merged[key] = val
    return merged


def _map_chunks(cfg, cal_dicts, workers):
    bounds = [(lo, min(cfg.n_runs, lo + cfg.chunk_size)) for lo in range(0, cfg.n_runs, cfg.chunk_size)]
    cfg_dict = cfg.to_dict()
    if workers and workers > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_chunk, cfg_dict, lo, hi, cal_dicts) for lo, hi in bounds]
            return [f.result() for f in futures]
    return [_run_chunk(cfg_dict, lo, hi, cal_dicts) for lo, hi in bounds]


# ---------------------------------------------------------------- report


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def _mean_se(series):
    """Per-step mean and standard error over runs, ignoring NaN (dead runs)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        n = np.sum(np.isfinite(series), axis=0)
        mean = np.nanmean(series, axis=0)
        se = np.nanstd(series, axis=0) / np.sqrt(np.maximum(n, 1))
    return mean, np.where(n > 1, se, np.nan)


def _envelope_summary(env):
    if not env or not env["lam"]:
        return None
    lam, viol = np.asarray(env["lam"]), np.asarray(env["violation"])
    return {"n_runs": int(lam.size), "fraction_decaying": float(np.mean(env["decaying"])),
            "lam_max": float(lam.max()), "lam_median": float(np.median(lam)),
            "max_violation": float(viol.max())}


def _stealth_bound(cfg, plant, ctrl, x_init):
    kind = cfg.attack.get("kind", "none")
    if kind not in ("model1", "model2", "lti"):
        return None
    ies_cfg = cfg.ies
    ies = estimate_ies(plant, ctrl, n_pairs=ies_cfg.get("n_pairs", 20), delta0=ies_cfg.get("delta0", 1e-6),
                       horizon=ies_cfg.get("horizon", 400), seed=ies_seed(cfg), warmup=ies_cfg.get("warmup", cfg.warmup))
    _, norm = attack_direction(cfg.attack, plant, x_init)
    result = {"ies": ies.to_dict(), "s0_norm": norm}
    if not ies.is_ies:
        result.update({"b_eps": None, "epsilon": None, "note": "closed loop not IES; bound does not apply"})
        return result
    if kind == "model2":
        est = cfg.attack.get("estimator", {})
        g = cfg.attack.get("gamma")
        steps = cfg.horizon + 1
        if g is None:
            gamma, source = np.zeros(steps), "zero (no identified gain supplied)"
        else:
            gamma, source = g["scale"] * g.get("rate", 1.0) ** np.arange(steps), "declared"
        inp = StealthBoundInputs.from_models(ies, plant, ctrl, norm, b_zeta=float(est.get("error_bound", 0.0)),
                                             gamma=gamma)
        series = beps_model2(inp, case=2 if est.get("kind") == "case2" else 1)
        b = float(series[-1])
        result["gamma_source"] = source
    else:
        inp = StealthBoundInputs.from_models(ies, plant, ctrl, norm)
        b = beps_model1(inp)
    d = inp.to_dict()
    d.pop("gamma", None)
    result.update({"inputs": d, "b_eps": b, "epsilon": epsilon_from_bound(b)})
    return result


def _post_impact_rate(alarms, cross_index, valid_until, window):
    hits, steps = 0, 0
    for i, k in enumerate(cross_index):
        if k < 0:
            continue
        stop = valid_until[i] + 1 if window is None else min(valid_until[i] + 1, k + window)
        seg = alarms[i, k:stop]
        hits += int(seg.sum())
        steps += seg.size
    rate = hits / steps if steps else float("nan")
    se = math.sqrt(rate * (1 - rate) / steps) if steps else float("nan")
    return {"rate": rate, "stderr": se, "steps": steps, "runs": int(np.sum(cross_index >= 0))}


@dataclass
class MetricsReport:
    data: dict

    def to_json(self):
        return json.dumps(self.data, sort_keys=True, indent=1, allow_nan=False)

    @classmethod
    def from_json(cls, text):
        return cls(json.loads(text))

    def __getitem__(self, key):
        return self.data[key]

    def __eq__(self, other):
        return isinstance(other, MetricsReport) and self.to_json() == other.to_json()


def run_experiment(cfg, workers=1, calibrations=None):
    plant, ctrl, x_init = build_models(cfg)
    if cfg.detectors and ctrl.innovation_cov is None:
        raise ExperimentError("detectors need a controller with an expected measurement")
    if calibrations is None:
        calibrations = calibrate(cfg, plant, ctrl)
    cal_dicts = [c.to_dict() for c in calibrations]
    res = _fold(_map_chunks(cfg, cal_dicts, workers))

    blowup = float(np.mean(res["blown_up"]))
    if blowup > cfg.max_blowup_rate:
        raise ExperimentError(f"blowup rate {blowup:.2f} exceeds {cfg.max_blowup_rate:.2f}; "
                              f"last valid steps: median {int(np.median(res['valid_until']))}")
    t = np.arange(cfg.horizon + 1)
    report = {
        "name": cfg.name, "config": cfg.to_dict(), "config_hash": cfg.hash(),
        "software": {"package": "stealthsim", "version": __version__, "prng": PRNG_ALGORITHM},
        "seeds": {"master_seed": cfg.master_seed, "stream_ids": [0, cfg.n_runs],
                  "calibration_seed": calibration_seed(cfg), "ies_seed": ies_seed(cfg)},
        "calibrations": cal_dicts, "blowup_rate": blowup,
    }
    dev_mean, dev_se = _mean_se(res["deviation"])
    comp_mean, comp_se = _mean_se(res["deviation_component"])
    report["deviation"] = {"t": t, "value": dev_mean, "stderr": dev_se}
    report["deviation_component"] = {"component": cfg.impact_component, "t": t, "value": comp_mean, "stderr": comp_se}
    hit = res["impact_index"] >= 0
    report["impact"] = {"alpha": cfg.impact_threshold, "component": cfg.impact_component,
                        "fraction": float(hit.mean()),
                        "first_index": res["impact_index"],
                        "max_deviation": float(np.nanmax(res["deviation_component"])) if res["deviation_component"].size else 0.0}
    if "fall_index" in res:
        fi = res["fall_index"]
        fallen = fi[fi >= 0].astype(float)
        report["falling_time"] = {
            "threshold": cfg.fall_threshold, "component": cfg.fall_component, "per_run": fi,
            "fraction_fallen": float(np.mean(fi >= 0)),
            "mean": float(fallen.mean()) if fallen.size else None,
            "stderr": float(fallen.std() / np.sqrt(fallen.size)) if fallen.size > 1 else None,
        }
    report["fake_gap_envelope"] = _envelope_summary(res.get("fake_env"))
    report["estimator_gap_envelope"] = _envelope_summary(res.get("estimator_env"))
    if cfg.resilience:
        rf, ra = res["rejection_free"], res["rejection_attacked"]
        steps = res["rejection_steps"] * rf.size
        pf = float(rf.mean())
        report["resilience"] = {"rejection_rate_free": pf, "rejection_rate_attacked": float(ra.mean()),
                                "stderr": math.sqrt(max(pf * (1 - pf), 1e-12) / steps), "sensor_steps": steps}

    report["alarm_rates"], report["detection_gap"], report["post_impact_alarm_rate"] = {}, {}, {}
    cross = res.get("angle_cross_index", res["impact_index"])
    for name, (af, aa) in res["alarms"].items():
        rf, ra = alarm_rate(af), alarm_rate(aa)
        gap = empirical_detection_gap(aa, af)
        report["alarm_rates"][name] = {
            "t": t, "rate_free": rf.rate, "rate_attacked": ra.rate, "se_free": rf.stderr, "se_attacked": ra.stderr,
            "smoothing_window": cfg.smoothing_window,
            "smoothed_free": moving_average(rf.rate, cfg.smoothing_window),
            "smoothed_attacked": moving_average(ra.rate, cfg.smoothing_window),
            "aggregate_free": rf.aggregate, "aggregate_attacked": ra.aggregate,
        }
        report["detection_gap"][name] = {"gap": gap.gap, "stderr": gap.gap_stderr, "t": gap.gap_index}
        report["post_impact_alarm_rate"][name] = _post_impact_rate(aa, cross, res["valid_until"],
                                                                   cfg.post_impact_window)
    report["stealth_bound"] = _stealth_bound(cfg, plant, ctrl, x_init)
    return MetricsReport(_clean(report))


# ---------------------------------------------------------------- sweeps

SUMMARY_COLUMNS = ["value", "epsilon", "b_eps", "kappa", "lam", "falling_time_mean", "falling_time_stderr",
                   "fraction_fallen", "impact_fraction", "max_deviation", "blowup_rate", "seed"]


def lane_seed(master_seed, row):
    return int(np.random.SeedSequence([int(master_seed), 1000 + int(row)]).generate_state(1, np.uint64)[0] >> 1)


def summarize(report, value):
    r = report.data
    sb = r.get("stealth_bound") or {}
    ft = r.get("falling_time") or {}
    row = {"value": value, "epsilon": sb.get("epsilon"), "b_eps": sb.get("b_eps"),
           "kappa": (sb.get("ies") or {}).get("kappa"), "lam": (sb.get("ies") or {}).get("lam"),
           "falling_time_mean": ft.get("mean"), "falling_time_stderr": ft.get("stderr"),
           "fraction_fallen": ft.get("fraction_fallen"), "impact_fraction": r["impact"]["fraction"],
           "max_deviation": r["impact"]["max_deviation"], "blowup_rate": r["blowup_rate"],
           "seed": r["seeds"]["master_seed"]}
    for name, gap in r.get("detection_gap", {}).items():
        row[f"gap_{name}"] = gap["gap"]
    return row


@dataclass
class SweepTable:
    axis: str
    rows: list

    def to_dict(self):
        return {"axis": self.axis, "rows": self.rows}

    def column(self, name):
        return [row[name] for row in self.rows]


def run_sweep(cfg, axis=None, values=None, workers=1):
    """One summary row per value; row ``r`` uses its own seed lane."""
    axis = axis or (cfg.sweep or {}).get("axis")
    values = (cfg.sweep or {}).get("values", []) if values is None else values
    if not axis:
        raise ExperimentError("sweep axis is required")
    rows = []
    for r, value in enumerate(values):
        row_cfg = cfg.with_value(axis, value).with_value("master_seed", lane_seed(cfg.master_seed, r))
        row_cfg.sweep = None
        rows.append(summarize(run_experiment(row_cfg, workers=workers), value))
    return SweepTable(axis, _clean(rows))


# ---------------------------------------------------------------- emission


def _write_csv(path, header, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow(["" if v is None else v for v in row])


def emit(report, fmt, out_dir):
    """Write a report as JSON (``report.json``) or CSV time series; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    data = report.data
    if fmt == "json":
        path = os.path.join(out_dir, "report.json")
        with open(path, "w") as fh:
            fh.write(report.to_json())
        return [path]
    if fmt != "csv":
        raise ExperimentError(f"unknown format {fmt!r}")
    paths = []
    for name, ar in data.get("alarm_rates", {}).items():
        path = os.path.join(out_dir, f"alarm_rate_{name}.csv")
        _write_csv(path, ["t", "rate_free", "rate_attacked", "se_free", "se_attacked"],
                   [ar["t"], ar["rate_free"], ar["rate_attacked"], ar["se_free"], ar["se_attacked"]])
        paths.append(path)
        path = os.path.join(out_dir, f"alarm_rate_{name}_smoothed{ar['smoothing_window']}.csv")
        _write_csv(path, ["t", "rate_free", "rate_attacked"], [ar["t"], ar["smoothed_free"], ar["smoothed_attacked"]])
        paths.append(path)
    for key in ("deviation", "deviation_component"):
        if key in data:
            path = os.path.join(out_dir, f"{key}.csv")
            _write_csv(path, ["t", "value", "stderr"], [data[key]["t"], data[key]["value"], data[key]["stderr"]])
            paths.append(path)
    if data.get("falling_time"):
        path = os.path.join(out_dir, "falling_time.csv")
        per_run = data["falling_time"]["per_run"]
        _write_csv(path, ["run", "falling_index"], [list(range(len(per_run))), per_run])
        paths.append(path)
    return paths


def emit_sweep(table, fmt, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    if fmt == "json":
        path = os.path.join(out_dir, "sweep.json")
        with open(path, "w") as fh:
            json.dump(table.to_dict(), fh, sort_keys=True, indent=1)
        return [path]
    header = list(SUMMARY_COLUMNS)
    for row in table.rows:
        header += [k for k in row if k not in header]
    path = os.path.join(out_dir, "sweep.csv")
    _write_csv(path, ["axis"] + header, [[table.axis] * len(table.rows)] +
               [[row.get(k) for row in table.rows] for k in header])
    return [path]


def summary_line(report):
    d = report.data
    out = {"name": d["name"], "config_hash": d["config_hash"], "blowup_rate": d["blowup_rate"],
           "impact_fraction": d["impact"]["fraction"]}
    if d.get("stealth_bound"):
        out["epsilon"] = d["stealth_bound"].get("epsilon")
    for name, gap in d.get("detection_gap", {}).items():
        out[f"gap_{name}"] = gap["gap"]
    for name, pi in d.get("post_impact_alarm_rate", {}).items():
        out[f"post_impact_{name}"] = pi["rate"]
    return out


__all__ = ["ExperimentConfig", "MetricsReport", "SweepTable", "StealthSimError", "build_models", "build_attack",
           "calibrate", "emit", "emit_sweep", "load_config", "run_experiment", "run_sweep", "summary_line"]
