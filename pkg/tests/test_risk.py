import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_graph
from nsbmgat.gev import GevParams, gev_cdf
from nsbmgat.model import TrainedModel, init_params
from nsbmgat.risk import (RiskAssessment, ThresholdCalibration, calibrate_threshold, m_grid,
                          predict, predict_batch, risk_value, risk_values)

params = st.builds(GevParams, st.floats(-0.9, 0.9), st.floats(0.01, 3.0), st.floats(-3.0, 0.0))


def fine_oracle(z, pc, pn, Q=1.0, n=100_000):
    i = np.linspace(min(-Q, z), z, n)
    return float(np.max(1 - gev_cdf(i, pc) + gev_cdf(i, pn)))


def test_equal_params_give_one():
    p = GevParams(-0.2, 0.3, -0.6)
    for z in (-2.0, -0.9, -0.5, 0.0, -np.inf):
        assert risk_value(z, p, p) == 1.0


def test_separated_distributions_approach_two():
    pc = GevParams(0.0, 0.01, -0.1)
    pn = GevParams(0.0, 0.01, -0.9)
    assert risk_value(-0.5, pc, pn) == pytest.approx(2.0, abs=1e-9)


def test_fine_grid_oracle():
    pc, pn = GevParams(0.0, 0.05, -0.1), GevParams(0.0, 0.2, -0.8)
    assert risk_value(-0.2, pc, pn, grid_n=200) == pytest.approx(fine_oracle(-0.2, pc, pn),
                                                                 abs=1e-3)


@settings(max_examples=200, deadline=None)
@given(pc=params, pn=params, z=st.floats(-3.0, 0.0))
def test_m_in_range(pc, pn, z):
    M = risk_value(z, pc, pn)
    assert 0.0 <= M <= 2.0
    # the grid includes the current value itself
    assert M >= 1 - gev_cdf(z, pc) + gev_cdf(z, pn) - 1e-12


def test_nested_grid_refinement_is_monotone():
    rng = np.random.default_rng(0)
    for _ in range(30):
        pc = GevParams(rng.uniform(-0.5, 0.5), rng.uniform(0.02, 0.5), rng.uniform(-1, 0))
        pn = GevParams(rng.uniform(-0.5, 0.5), rng.uniform(0.02, 0.5), rng.uniform(-1.5, -0.5))
        z = rng.uniform(-1.0, 0.0)
        vals = [risk_value(z, pc, pn, grid_n=2 ** k + 1) for k in range(1, 12)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert vals[-1] <= fine_oracle(z, pc, pn) + 1e-12
        assert vals[-1] == pytest.approx(fine_oracle(z, pc, pn), abs=1e-3)


def test_vectorized_matches_scalar():
    rng = np.random.default_rng(1)
    n = 25
    pc = GevParams(rng.uniform(-0.5, 0.5, n), rng.uniform(0.05, 0.5, n), rng.uniform(-1, 0, n))
    pn = GevParams(rng.uniform(-0.5, 0.5, n), rng.uniform(0.05, 0.5, n), rng.uniform(-2, -1, n))
    z = rng.uniform(-2.0, 0.0, n)
    z[3] = -np.inf
    Ms = risk_values(z, pc, pn)
    for k in range(n):
        assert Ms[k] == risk_value(z[k], pc[k], pn[k])
    assert Ms[3] == 1.0


def test_grid_n_validation():
    p = GevParams(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        risk_value(-0.5, p, p, grid_n=1)


def test_assessment_range_check():
    p = GevParams(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        RiskAssessment(0.0, 2.5, True, p, p)


# --- calibration ------------------------------------------------------------------------

def brute_force_m_star(c, n):
    best, arg = -1.0, None
    for k in range(41):
        m = k / 20  # nearest double to each decimal threshold
        v = np.mean([x >= m for x in c]) + 1 - np.mean([x >= m for x in n])
        if v > best + 1e-12:
            best, arg = v, m
    return arg


def test_m_grid():
    g = m_grid()
    assert len(g) == 41 and g[0] == 0.0 and g[-1] == 2.0
    assert g[3] == 0.15


def test_calibration_perfect_separation():
    assert calibrate_threshold([2.0] * 4, [0.0] * 9).m_star == 0.05


def test_calibration_identical_lists():
    cal = calibrate_threshold([0.3, 1.2, 0.8], [0.3, 1.2, 0.8])
    assert cal.m_star == 0.0
    np.testing.assert_allclose([v for _, v in cal.v_curve], 1.0)


def test_calibration_brute_force_example():
    c, n = [1.5, 1.6, 1.4, 1.3], [0.5, 0.7, 1.35, 0.9, 0.6]
    cal = calibrate_threshold(c, n)
    assert cal.m_star == pytest.approx(brute_force_m_star(c, n))
    assert cal.m_star == pytest.approx(0.95)


def test_calibration_control_on_grid_point():
    # a control exactly at 0.15 is flagged at M* = 0.15, so 0.2 separates perfectly
    assert calibrate_threshold([1.0], [0.15]).m_star == 0.2


@settings(max_examples=100, deadline=None)
@given(c=st.lists(st.floats(0, 2), min_size=1, max_size=20),
       n=st.lists(st.floats(0, 2), min_size=1, max_size=20), k=st.integers(2, 4))
def test_calibration_properties(c, n, k):
    cal = calibrate_threshold(c, n, lead_time=2.0)
    assert 0.0 <= cal.m_star <= 2.0
    assert all(0.0 <= v <= 2.0 for _, v in cal.v_curve)
    assert cal.m_star == pytest.approx(brute_force_m_star(c, n))
    assert calibrate_threshold(c * k, n * k).m_star == cal.m_star


def test_calibration_validation_and_json():
    with pytest.raises(ValueError):
        calibrate_threshold([], [1.0])
    cal = calibrate_threshold([1.5], [0.5], lead_time=1.0)
    d = json.loads(cal.to_json())
    assert set(d) == {"lead_time", "m_star", "v_curve"} and d["lead_time"] == 1.0
    assert ThresholdCalibration.from_dict(d).m_star == cal.m_star


# --- prediction ----------------------------------------------------------------------------

def test_identical_models_score_one(rng):
    m = init_params(3)
    mc, mn = TrainedModel(m, "crash", 0.0, 0, 0), TrainedModel(m.copy(), "non_crash", 0.0, 0, 0)
    g = random_graph(rng)
    for m_star, warn in ((1.0, True), (1.05, False)):
        ra = predict(g, mc, mn, m_star, current_z=-0.4)
        assert ra.M == 1.0 and ra.warn is warn
        assert ra.crash_params == ra.noncrash_params


def test_predict_checks_tags(rng):
    m = init_params(3)
    mc = TrainedModel(m, "crash", 0.0, 0, 0)
    with pytest.raises(ValueError):
        predict(random_graph(rng), mc, mc, 1.0, -0.4)


def test_predict_batch_matches_single(rng):
    mc = TrainedModel(init_params(1), "crash", 0.0, 0, 0)
    mn = TrainedModel(init_params(2), "non_crash", 0.0, 0, 0)
    gs = [random_graph(rng) for _ in range(6)]
    z = rng.uniform(-1.5, 0, 6)
    Ms, _, _ = predict_batch(gs, mc, mn, z)
    for g, zz, M in zip(gs, z, Ms):
        assert predict(g, mc, mn, 1.0, zz).M == pytest.approx(M, abs=1e-14)
