import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stealthsim.attacks import RandomBoundedAttack, one_shot_attack
from stealthsim.dynamics import ControllerModel, NoiseStream, run_paired
from stealthsim.errors import ContractError
from stealthsim.models import resilience_example
from stealthsim.resilience import (OutlierFilterConfig, deviation_bound, outlier_filter, rejected, rejection_rate,
                                   resilient_controller_wrap)


def _cfg(eta, **kw):
    return OutlierFilterConfig(eta=eta, nominal_mode=kw.pop("mode", "constant"), nominal=np.zeros(1), **kw)


def test_filter_pass_through_and_clamp():
    y = np.array([0.2, -0.5, 0.9])
    cfg = OutlierFilterConfig(eta=1.0, nominal_mode="constant", nominal=np.zeros(3))
    assert np.array_equal(outlier_filter(y, np.zeros(3), cfg), y)
    assert outlier_filter(np.array([10.0]), np.zeros(1), _cfg(1.0))[0] == 1.0
    assert outlier_filter(np.array([10.0]), np.zeros(1), _cfg(1.0, action="substitute"))[0] == 0.0
    for action in ("clamp", "substitute"):
        assert outlier_filter(np.array([0.3]), np.array([0.3]), _cfg(1.0, action=action))[0] == 0.3
    assert rejected(np.array([2.0, 0.5]), np.zeros(2), 1.0).tolist() == [True, False]


@settings(max_examples=60, deadline=None)
@given(y=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=4), eta=st.floats(1e-3, 1e3),
       action=st.sampled_from(["clamp", "substitute"]), seed=st.integers(0, 1000))
def test_filter_output_stays_in_band(y, eta, action, seed):
    y = np.array(y)
    ybar = np.random.default_rng(seed).standard_normal(y.size)
    cfg = OutlierFilterConfig(eta=eta, nominal_mode="constant", nominal=np.zeros(y.size), action=action)
    out = outlier_filter(y, ybar, cfg)
    assert np.all(np.abs(out - ybar) <= eta * (1 + 1e-12))


def test_deviation_bound_examples():
    assert deviation_bound(lambda s: s, lambda s: 2 * s, 1.0, 0.0) == 0.0
    assert deviation_bound(lambda s: s, lambda s: 2 * s, 1.0, 0.5) == 2.5
    with pytest.raises(ContractError):
        deviation_bound(lambda s: s + 1, lambda s: 2 * s, 1.0, 0.5)
    with pytest.raises(ContractError):
        deviation_bound(lambda s: s, lambda s: np.minimum(s, 1), 1.0, 0.5)


def test_config_contracts():
    with pytest.raises(ContractError):
        OutlierFilterConfig(eta=0.0)
    with pytest.raises(ContractError):
        OutlierFilterConfig(eta=1.0, nominal_mode="constant")
    plain = ControllerModel(1, lambda X, y: X + y, lambda X, y: -X, np.zeros(1))
    with pytest.raises(ContractError):
        resilient_controller_wrap(plain, OutlierFilterConfig(eta=1.0), output_dim=1)


def test_disabled_filter_is_identity():
    plant, ctrl, _ = resilience_example()
    wrapped = resilient_controller_wrap(ctrl, _cfg(np.inf))
    streams = [NoiseStream(0, i) for i in range(5)]
    a = run_paired(plant, ctrl, one_shot_attack(0, 50.0, 1), 30, 10, streams)
    b = run_paired(plant, wrapped, one_shot_attack(0, 50.0, 1), 30, 10, streams)
    assert np.array_equal(a.attacked.states, b.attacked.states)
    assert np.array_equal(a.attacked.inputs, b.attacked.inputs)


def test_moving_average_nominal_runs():
    plant, ctrl, _ = resilience_example()
    wrapped = resilient_controller_wrap(ctrl, OutlierFilterConfig(eta=0.5, nominal_mode="moving_average", window=3,
                                                                  nominal=np.zeros(1)))
    pair = run_paired(plant, wrapped, one_shot_attack(0, 1e3, 1), 20, 10, [NoiseStream(1, i) for i in range(4)])
    assert np.all(np.isfinite(pair.attacked.states))
    assert rejection_rate(pair.attacked, wrapped, pair.t0_index).min() > 0


def test_one_shot_outlier_within_deviation_bound():
    plant, ctrl, gains = resilience_example()
    wrapped = resilient_controller_wrap(ctrl, _cfg(0.5))
    bound = deviation_bound(gains["gamma"], gains["gamma_c"], gains["L_hc"], 0.5)
    pair = run_paired(plant, wrapped, one_shot_attack(0, 1e6, 1), 50, 20, [NoiseStream(2, i) for i in range(50)])
    assert pair.deviation().max() <= bound


def test_unfiltered_deviation_linear_in_spike():
    plant, ctrl, _ = resilience_example()
    streams = [NoiseStream(3, i) for i in range(10)]
    devs = [run_paired(plant, ctrl, one_shot_attack(0, a0, 1), 30, 10, streams).deviation().max() for a0 in (10, 100)]
    assert devs[1] / devs[0] == pytest.approx(10, rel=0.05)


def test_random_battery_bounded():
    plant, ctrl, gains = resilience_example()
    wrapped = resilient_controller_wrap(ctrl, _cfg(0.5))
    pair = run_paired(plant, wrapped, RandomBoundedAttack(), 80, 20, [NoiseStream(4, i) for i in range(100)])
    assert pair.deviation().max() <= deviation_bound(gains["gamma"], gains["gamma_c"], gains["L_hc"], 0.5)
