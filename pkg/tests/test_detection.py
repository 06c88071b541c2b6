import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stealthsim.detection import (Calibration, attack_free_statistics, DetectorSpec, DetectorState, alarm_rate, calibrate_threshold,
                                  chi2_statistic, chi2_step, cusum_statistic, cusum_step, moving_average,
                                  normalized_statistic, run_detector, threshold_for)
from stealthsim.errors import CalibrationUnderpowered, ContractError, DetectorConfigError


def _state(kind, threshold, **kw):
    return DetectorState(DetectorSpec(kind, threshold=threshold, **kw))


def test_zero_residual_never_alarms():
    st_ = _state("chi2", 1e-9)
    for _ in range(5):
        g, alarm = chi2_step(st_, np.zeros(2), np.eye(2))
        assert g == 0.0 and not alarm


def test_chi2_hand_values():
    g, alarm = chi2_step(_state("chi2", 20.0), np.array([3.0, 4.0]), np.eye(2))
    assert g == 25.0 and alarm
    st_ = _state("chi2", 6.0, window=2)
    chi2_step(st_, np.array([1.0]), np.eye(1))
    g, alarm = chi2_step(st_, np.array([2.0]), np.eye(1))
    assert g == 5.0 and not alarm


def test_cusum_hand_values():
    st_ = _state("cusum", 1.0, drift=1.0)
    assert all(cusum_step(st_, np.zeros(1), np.eye(1)) == (0.0, False) for _ in range(5))
    st_ = _state("cusum", 3.5, drift=1.0)
    assert cusum_step(st_, None, None, g=3.0) == (2.0, False)
    assert cusum_step(st_, None, None, g=3.0) == (4.0, True)
    assert st_.statistic == 0.0
    st_ = _state("cusum", 20.0, drift=1.0)
    values = [cusum_step(st_, None, None, g=g)[0] for g in (10.0, 0.0, 0.0, 0.0)]
    assert values == [9.0, 8.0, 7.0, 6.0]


def test_vectorized_statistics_match_step_functions():
    rng = np.random.default_rng(0)
    g = rng.chisquare(2, size=(3, 40))
    stat, alarms = cusum_statistic(g, 2.0, 4.0)
    for run in range(3):
        st_ = _state("cusum", 4.0, drift=2.0)
        seq = [cusum_step(st_, None, None, g=x) for x in g[run]]
        assert np.allclose(stat[run], [s for s, _ in seq])
        assert alarms[run].tolist() == [a for _, a in seq]
    chi = chi2_statistic(g, window=3)
    assert chi[0, 5] == pytest.approx(g[0, 3:6].sum())


def test_singular_covariance_rejected():
    with pytest.raises(DetectorConfigError):
        normalized_statistic(np.ones(2), np.zeros((2, 2)))


def test_spec_validation_and_roundtrip():
    with pytest.raises(DetectorConfigError):
        DetectorSpec("nope")
    with pytest.raises(DetectorConfigError):
        DetectorSpec("random_guess")
    spec = DetectorSpec("cusum", threshold=3.0, drift=2.0)
    assert DetectorSpec.from_dict(spec.to_dict()) == spec
    cal = Calibration(spec, 0.01, 0.011, 10, 100, 5, 1, 1010)
    assert Calibration.from_dict(cal.to_dict()) == cal


def test_median_threshold_on_symmetric_statistic():
    g = np.random.default_rng(1).standard_normal((50, 400))
    tau = threshold_for(DetectorSpec("chi2"), g, 0.5)
    assert tau == pytest.approx(np.median(g), abs=1e-12)


def test_cusum_threshold_hits_target_rate():
    g = np.random.default_rng(2).chisquare(2, size=(100, 2000))
    spec = DetectorSpec("cusum", drift=2.0)
    tau = threshold_for(spec, g, 0.01)
    rate = run_detector(DetectorSpec("cusum", threshold=tau, drift=2.0), g).mean()
    assert abs(rate - 0.01) < 0.001


def test_calibration_underpowered(cartpole):
    plant, ctrl = cartpole
    with pytest.raises(CalibrationUnderpowered):
        calibrate_threshold(DetectorSpec("chi2"), plant, ctrl, 0.002, 10, 100, seed=0)


def test_chi2_calibration_fresh_seed_false_alarm_rate(cartpole):
    plant, ctrl = cartpole
    cal = calibrate_threshold(DetectorSpec("chi2"), plant, ctrl, 0.002, 200, 5000, seed=123)
    assert abs(cal.achieved_pfa - 0.002) < 1e-4
    fresh = calibrate_threshold(DetectorSpec("chi2"), plant, ctrl, 0.002, 200, 5000, seed=456)
    g = attack_free_statistics(plant, ctrl, 200, 5000, seed=789)
    rate = run_detector(cal.spec, g)[:, 100:].mean()
    assert 0.0014 <= rate <= 0.0026
    assert fresh.spec.threshold == pytest.approx(cal.spec.threshold, rel=0.05)


def test_random_guess_rate_within_three_sigma():
    spec = DetectorSpec("random_guess", rate=0.002)
    alarms = run_detector(spec, np.zeros((200_000, 10)), rng=np.random.default_rng(3))
    res = alarm_rate(alarms)
    sigma = np.sqrt(0.002 * 0.998 / 200_000)
    assert np.all(np.abs(res.rate - 0.002) <= 3 * sigma)


def test_alarm_rate_edge_cases():
    assert not alarm_rate(np.zeros((4, 6), dtype=bool)).rate.any()
    same = np.tile(np.random.default_rng(4).random(8) < 0.5, (5, 1))
    assert set(alarm_rate(same).rate.tolist()) <= {0.0, 1.0}
    with pytest.raises(ContractError):
        alarm_rate(np.zeros((0, 3), dtype=bool))


def test_moving_average():
    assert moving_average([1.0, 2.0, 3.0, 4.0], 2).tolist() == [1.0, 1.5, 2.5, 3.5]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(0.5, 20.0), bump=st.floats(0.0, 10.0),
       kind=st.sampled_from(["chi2", "cusum"]))
def test_alarm_rate_non_increasing_in_threshold(seed, tau, bump, kind):
    g = np.random.default_rng(seed).chisquare(2, size=(5, 200))
    kw = {"drift": 2.0} if kind == "cusum" else {}
    low = run_detector(DetectorSpec(kind, threshold=tau, **kw), g).mean()
    high = run_detector(DetectorSpec(kind, threshold=tau + bump, **kw), g).mean()
    assert high <= low
