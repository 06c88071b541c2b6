"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict (printed in the pytest terminal
summary) and then asserts it, so a failure shows both the line and the reason.
"""

import os
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from stealthsim.attacks import LtiAttack, ModelOneAttack, one_shot_attack
from stealthsim.dynamics import NoiseStream, run_paired
from stealthsim.experiment import build_models, load_config, run_experiment, run_sweep
from stealthsim.metrics import (IES, NOT_IES, StealthBoundInputs, beps_model1, classify_lti, epsilon_from_bound,
                                estimate_ies)
from stealthsim.models import hover_state, lti_plant, resilience_example, scalar_examples, zero_controller

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def config(name):
    return load_config(os.path.join(CONFIGS, name + ".json"))


class Criterion:
    def __init__(self, number, title, budget):
        self.number, self.title, self.budget = number, title, budget
        self.checks = []

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def check(self, ok, detail):
        self.checks.append((bool(ok), detail))

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        if exc_type is not None:
            self.checks.append((False, f"{exc_type.__name__}: {exc}"))
        self.check(elapsed < self.budget, f"{elapsed:.1f}s < {self.budget:g}s")
        ok = all(c for c, _ in self.checks)
        detail = "; ".join(f"{'' if c else 'FAILED '}{d}" for c, d in self.checks)
        ACCEPTANCE_LINES[self.number] = f"#{self.number:<2} {'PASS' if ok else 'FAIL'}  {self.title}: {detail}"
        if exc_type is None:
            assert ok, ACCEPTANCE_LINES[self.number]
        return False


def _exact_powers(A, C, s0, steps):
    """``A^t s0`` and ``-C A^t s0`` in exact rational arithmetic, rounded once at the end."""
    A = [[Fraction(x) for x in row] for row in A]
    C = [[Fraction(x) for x in row] for row in C]
    v = [Fraction(x) for x in s0]
    s_out, a_out = [], []
    for _ in range(steps):
        s_out.append([float(x) for x in v])
        a_out.append([float(-sum(c * x for c, x in zip(row, v))) for row in C])
        v = [sum(a * x for a, x in zip(row, v)) for row in A]
    return np.array(s_out), np.array(a_out)


def test_01_lti_attack_matches_matrix_powers():
    with Criterion(1, "LTI attack oracle", 1.0) as c:
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            n, p = int(rng.integers(1, 7)), int(rng.integers(1, 4))
            A = rng.standard_normal((n, n)) * 1.3 / np.sqrt(n)
            C = rng.standard_normal((p, n))
            s0 = rng.standard_normal(n)
            s, a = LtiAttack(A, C, s0).sequence(31)
            s_ref, a_ref = _exact_powers(A, C, s0, 31)
            rel = lambda x, ref: np.linalg.norm(x - ref, axis=1) / np.linalg.norm(ref, axis=1)
            worst = max(worst, rel(s, s_ref).max(), rel(a, a_ref).max())
        c.check(worst <= 1e-12, f"max relative error {worst:.1e} <= 1e-12 over 20 seeds, t <= 30")


def test_02_fake_output_identity():
    with Criterion(2, "fake-output identity", 10.0) as c:
        cfg = config("cartpole_model1_impact")
        plant, ctrl, x_init = build_models(cfg)
        s0 = 1e-5 * np.array([0.0, 0.0, 1.0, 0.0])
        pair = run_paired(plant, ctrl, ModelOneAttack(s0), 1000, cfg.warmup,
                          [NoiseStream(cfg.master_seed, i) for i in range(50)], x_init=x_init)
        att, k0 = pair.attacked, pair.t0_index
        v = att.true_outputs - plant.observation(att.states)
        err = np.max(np.abs(att.received_outputs - (plant.observation(pair.fake_states) + v))[:, k0:])
        c.check(err <= 1e-10, f"max error {err:.1e} <= 1e-10 over 50 runs")


def test_03_convergence_and_impact():
    with Criterion(3, "convergence + impact", 120.0) as c:
        cfg = config("cartpole_model1_impact")
        rep = run_experiment(cfg)
        env = rep["fake_gap_envelope"]
        c.check(env["fraction_decaying"] == 1.0 and env["lam_max"] < 1,
                f"fake-gap envelope lambda_max {env['lam_max']:.4f} < 1")
        first = np.array(rep["impact"]["first_index"])
        frac = float(np.mean((first >= 0) & (first < 3000)))
        c.check(frac >= 0.95 and cfg.n_runs == 100, f"impact before 3000 steps in {frac:.0%} of {cfg.n_runs} runs")


def test_04_stealthiness():
    with Criterion(4, "stealthiness", 600.0) as c:
        cfg = config("cartpole_model1_stealth")
        rep = run_experiment(cfg)
        pfa = cfg.calibration["target_pfa"]
        for name, ar in rep["alarm_rates"].items():
            free, att = np.array(ar["rate_free"]), np.array(ar["rate_attacked"])
            p = np.maximum(free, pfa)
            sigma = np.sqrt(p * (1 - p) / cfg.n_runs)
            excess = np.max(np.abs(att - free) / sigma)
            c.check(excess <= 3, f"{name} max |attacked - free| = {excess:.2f} sigma")
        c.check(cfg.n_runs == 500, f"{cfg.n_runs} runs")


def test_05_lti_attack_detected_on_nonlinear_plant():
    with Criterion(5, "LTI-attack detectability", 600.0) as c:
        cfg = config("cartpole_lti_attack")
        rep = run_experiment(cfg)
        floor = 5 * cfg.calibration["target_pfa"]
        for name, r in rep["post_impact_alarm_rate"].items():
            c.check(r["rate"] >= floor, f"{name} post-|theta|>=0.4 rate {r['rate']:.3f} >= {floor:g}")
        c.check(cfg.n_runs == 500, f"{cfg.n_runs} runs")


def test_06_estimator_gap_envelope():
    with Criterion(6, "estimator impact envelope", 30.0) as c:
        cfg = config("lqg_scalar_lti")
        rep = run_experiment(cfg)
        env = rep["estimator_gap_envelope"]
        c.check(env["n_runs"] == 50 and env["fraction_decaying"] == 1.0 and env["lam_max"] < 1,
                f"lambda_max {env['lam_max']:.3f} < 1 on {env['n_runs']} runs")
        c.check(env["max_violation"] <= 1.05, f"max violation ratio {env['max_violation']:.4f} <= 1.05")


def test_07_ies_probe_calibration():
    with Criterion(7, "IES probe calibration", 30.0) as c:
        plant, ctrl = scalar_examples()["example1"]
        est = estimate_ies(plant, ctrl, n_pairs=20, delta0=1e-3, horizon=60)
        c.check(0.45 <= est.lam <= 0.55, f"example1 lambda {est.lam:.4f}")
        agree = 0
        rng = np.random.default_rng(2024)
        for k in range(20):
            n = int(rng.integers(1, 5))
            M = rng.standard_normal((n, n))
            radius = rng.uniform(0.5, 0.9) if k % 2 == 0 else rng.uniform(1.1, 1.5)
            A = M * radius / np.max(np.abs(np.linalg.eigvals(M)))
            lti = lti_plant(A, np.zeros((n, 1)), np.eye(n), 1e-2 * np.eye(n), 1e-2 * np.eye(n))
            probe = estimate_ies(lti, zero_controller(), n_pairs=10, delta0=1e-3, horizon=200, seed=k)
            agree += (probe.verdict == IES) == (classify_lti(A) == IES)
        c.check(agree == 20, f"probe matches eigenvalue verdict on {agree}/20 closed loops")
        plant, ctrl = scalar_examples()["example2"]
        verdict = estimate_ies(plant, ctrl, n_pairs=10, delta0=1e-3, horizon=60).verdict
        c.check(verdict == NOT_IES, f"example2 verdict {verdict}")


def test_08_epsilon_pipeline_and_sweeps():
    with Criterion(8, "epsilon pipeline + sweeps", 300.0) as c:
        inp = StealthBoundInputs(kappa=1, lam=0.5, L_h=1, L_fc=0, s0_norm=0.3, inv_process=1, inv_measurement=1)
        b = beps_model1(inp)
        eps = epsilon_from_bound(b)
        # Independent closed form sqrt(1 - exp(-0.24)) = 0.4619222; see the note in the README.
        c.check(abs(b - 0.24) <= 1e-6 and abs(eps - 0.4619222) <= 1e-6, f"b_eps {b:.6f}, epsilon {eps:.7f}")
        s0 = run_sweep(config("sweep_s0_norm"))
        eps_s0 = np.array(s0.column("epsilon"), dtype=float)
        c.check(np.all(np.diff(eps_s0) > 0), "epsilon strictly increasing in |s0|")
        fall = np.array(s0.column("falling_time_mean"), dtype=float)
        fallen = np.array(s0.column("fraction_fallen"), dtype=float)
        c.check(np.all(fallen == 1.0) and np.all(np.diff(fall) < 0),
                "falling time strictly decreasing in |s0| (" + ", ".join(f"{f:.1f}" for f in fall) + ")")
        noise = run_sweep(config("sweep_noise_var"))
        eps_noise = np.array(noise.column("epsilon"), dtype=float)
        c.check(np.all(np.diff(eps_noise) < 0), "epsilon strictly decreasing in sigma^2")


def test_09_resilience_bound():
    with Criterion(9, "resilience deviation bound", 30.0) as c:
        cfg = config("resilience_scalar")
        rep = run_experiment(cfg)
        worst = rep["impact"]["max_deviation"]
        c.check(cfg.n_runs == 200 and worst <= 2.5, f"max deviation {worst:.3f} <= 2.5 over {cfg.n_runs} attacks")
        plant, ctrl, _ = resilience_example()
        streams = [NoiseStream(cfg.master_seed, i) for i in range(20)]
        devs = [run_paired(plant, ctrl, one_shot_attack(0, a0, 1), 50, 20, streams).deviation().max()
                for a0 in (10.0, 100.0)]
        ratio = devs[1] / devs[0]
        c.check(abs(ratio - 10) <= 0.5, f"unfiltered deviation ratio {ratio:.4f} for a0 = 10 -> 100")


def test_10_filter_ineffective_against_model_one():
    with Criterion(10, "outlier gate vs full-knowledge attack", 120.0) as c:
        cfg = config("cartpole_outlier_gate")
        rep = run_experiment(cfg)
        res = rep["resilience"]
        limit = res["rejection_rate_free"] + 3 * res["stderr"]
        c.check(res["rejection_rate_attacked"] <= limit,
                f"clamp rate {res['rejection_rate_attacked']:.5f} <= free {res['rejection_rate_free']:.5f} + 3 sigma")
        c.check(rep["impact"]["fraction"] >= 0.95 and cfg.n_runs == 100,
                f"deviation exceeds alpha in {rep['impact']['fraction']:.0%} of {cfg.n_runs} runs")


def test_11_quadrotor_lateral_drift():
    with Criterion(11, "quadrotor directional claim", 120.0) as c:
        cfg = config("quadrotor_pitch_drift")
        plant, ctrl, x_init = build_models(cfg)
        streams = [NoiseStream(cfg.master_seed, i) for i in range(cfg.n_runs)]
        per_second = int(round(1 / plant.params["sample_time"]))
        drifts = {}
        for sign in (1.0, -1.0):
            s0 = np.zeros(plant.state_dim)
            s0[cfg.attack["s0_component"]] = sign * cfg.attack["s0_norm"]
            pair = run_paired(plant, ctrl, ModelOneAttack(s0), cfg.horizon, cfg.warmup, streams, x_init=x_init)
            dy = (pair.attacked.states - pair.free.states)[:, pair.t0_index:, 1].mean(axis=0)
            drifts[sign] = dy[::per_second]
        pos, neg = drifts[1.0], drifts[-1.0]
        c.check(np.all(np.diff(pos[1:]) < 0) and np.all(np.diff(neg[1:]) > 0),
                "mean lateral drift monotone each second")
        c.check(pos[-1] < 0 < neg[-1], f"sign flips with s0 ({pos[-1]:+.2f} m vs {neg[-1]:+.2f} m at 50 s)")
        magnitude = abs(pos[-1])
        within = 10 <= magnitude <= 40
        # Reported only: the physical constants and PID gains are not the reference ones.
        c.checks.append((True, f"|drift| at 50 s = {magnitude:.1f} m ({'within' if within else 'outside'} "
                               "factor 2 of 20 m, non-blocking)"))
