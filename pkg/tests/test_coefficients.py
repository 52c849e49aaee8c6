import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delaybs.coefficients import (
    D1,
    D2,
    ScenarioSampler,
    classify_delay,
    delayed_time_inverse,
    load_config,
    make_delay,
    sample_scenario,
    scenario_from_config,
    standard_coefficients,
    uniform_grid,
)
from delaybs.errors import NonPositiveDelay, OutOfRange, RetryExhausted, SlopeViolation


def test_cosine_delay_region(tau_d1):
    assert tau_d1.tau1 == pytest.approx(3.5, abs=1e-12)
    assert tau_d1.region == D1


def test_exponential_delay_region(tau_d2):
    assert tau_d2.tau1 == pytest.approx(0.5 * np.exp(-1.6), rel=1e-12)
    assert tau_d2.tau1 == pytest.approx(0.1009, abs=1e-4)
    assert tau_d2.region == D2


def test_constant_delay():
    tau = make_delay("constant", {"value": 0.2}, 21)
    assert np.all(tau.derivative == 0.0)
    assert tau.region == D2
    s = np.linspace(0, 1, 11)
    assert np.allclose(tau.map(s), s - 0.2)


def test_non_positive_delay_rejected():
    with pytest.raises(NonPositiveDelay):
        make_delay("constant", {"value": 0.0})
    with pytest.raises(NonPositiveDelay):
        make_delay("exponential", {"amplitude": 0.5, "rate": -1.0, "offset": -0.45})


def test_slope_violation_rejected():
    # tau(s) = 0.05 + 1.5 (1 - s) has slope -1.5 where it drops below s
    vals = 0.05 + 1.5 * (1 - np.linspace(0, 1, 41))
    with pytest.raises(SlopeViolation):
        make_delay("tabulated", {"values": vals})


def test_grid_needs_two_points():
    with pytest.raises(ValueError):
        make_delay("constant", {"value": 1.0}, 1)


def test_inverse_linear_map():
    tau = make_delay("tabulated", {"values": np.linspace(1e-9, 0.5, 201)}, 201, validate=False)
    assert delayed_time_inverse(tau, 0.25) == pytest.approx(0.5, abs=1e-6)


def test_inverse_shift_map():
    tau = make_delay("constant", {"value": 0.2})
    assert delayed_time_inverse(tau.map, 0.0) == pytest.approx(0.2, abs=1e-10)


def test_inverse_exponential_root(tau_d2):
    # independent oracle: bisection on q - 0.5 exp(-1.6 q)
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid - 0.5 * np.exp(-1.6 * mid) < 0:
            lo = mid
        else:
            hi = mid
    q = delayed_time_inverse(tau_d2, 0.0)
    assert q == pytest.approx(0.5 * (lo + hi), abs=1e-10)
    assert q == pytest.approx(0.3059, abs=1e-3)


def test_inverse_out_of_range(tau_d2):
    with pytest.raises(OutOfRange):
        delayed_time_inverse(tau_d2, tau_d2.map.g1 + 0.1)
    with pytest.raises(OutOfRange):
        delayed_time_inverse(tau_d2, tau_d2.map.g0 - 0.1)


def test_classify_examples(tau_d1, tau_d2):
    assert classify_delay(tau_d1) == D1
    assert classify_delay(tau_d2) == D2
    assert classify_delay(make_delay("constant", {"value": 1.0})) == D1


def test_gbar_clamped(tau_d1, tau_d2):
    assert tau_d1.map.gbar == 0.0
    assert tau_d2.map.gbar == pytest.approx(1.0 - tau_d2.tau1, rel=1e-9)


def test_standard_coefficients_bounds():
    co = standard_coefficients()
    assert co.c[-1] == 0.0
    assert np.all(np.abs(co.c) <= co.c_bar)
    assert np.all(np.abs(co.f) <= co.f_bar)
    assert co.c_bar == pytest.approx(20.0)
    assert co.f_bar == pytest.approx(10.0, rel=1e-3)


def test_sampler_d1_family():
    sc = ScenarioSampler(seed=1).sample_scenario(D1)
    assert sc.tau.family == "cosine-chebyshev"
    assert sc.tau.params["offset"] == 3.0
    assert -1.0 <= sc.tau.params["amplitude"] <= 1.0


def test_sampler_deterministic():
    a = sample_scenario(ScenarioSampler(seed=1), D2)
    b = sample_scenario(ScenarioSampler(seed=1), D2)
    assert a.tau.params == b.tau.params
    assert np.array_equal(a.x0, b.x0)


def test_sampler_d2_draws_valid():
    smp = ScenarioSampler(seed=3, n=21)
    s = np.linspace(0, 1, 2001)
    for _ in range(10_000):
        tau = smp.sample_delay(D2)
        assert tau.tau1 < 1.0
        t = tau(s)
        assert np.all(t > 0)
        assert np.all(np.abs(tau.deriv(s))[t < s] < 1.0)
        assert np.all(1.0 - tau.deriv(tau.grid) > 0)


def test_sampler_retry_exhausted():
    smp = ScenarioSampler(seed=0, ranges={"A3": (5.0, 5.0), "G3": (0.8, 0.8)}, max_retries=5)
    with pytest.raises(RetryExhausted):
        smp.sample_delay(D2)


def test_sampler_initial_finite():
    smp = ScenarioSampler(seed=5)
    for _ in range(100):
        x0, _ = smp.sample_initial()
        assert np.all(np.isfinite(x0))


def test_uniform_grid():
    g = uniform_grid(0.025)
    assert g.size == 41 and g[-1] == 1.0


def test_config_roundtrip(tmp_path):
    cfg = {"tau": {"family": "constant", "params": {"value": 0.3}}, "grid": {"ds": 0.05, "dr": 0.05}}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    co, tau, x0, g = scenario_from_config(load_config(p))
    assert tau.region == D2 and g["dt"] == 0.005
    assert co.grid.size == 21 and x0.shape == (21,)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.4, 0.8), st.floats(0.8, 2.4))
def test_inverse_round_trip(a3, g3):
    tau = make_delay("exponential", {"amplitude": a3, "rate": -g3})
    gm = tau.map
    ys = np.random.default_rng(0).uniform(gm.g0, gm.g1, 1000)
    err = max(abs(float(gm(gm.inverse(y))) - y) for y in ys[ys >= 0])
    assert err <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.floats(0.4, 0.8), st.floats(0.8, 2.4))
def test_d2_delayed_slope_below_one(a3, g3):
    tau = make_delay("exponential", {"amplitude": a3, "rate": -g3})
    assert tau.lipschitz_delayed < 1.0
    assert np.all(tau.map.derivative(tau.grid) > 0)


def test_classify_agrees_with_tau1():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        v = rng.uniform(0.05, 2.0)
        tau = make_delay("constant", {"value": v}, 5)
        assert (classify_delay(tau) == D1) == (v - 1.0 >= 0)
    for _ in range(200):
        off = rng.uniform(0.5, 4.0)
        tau = make_delay("cosine-chebyshev", {"offset": off, "amplitude": 0.2, "order": 0.0}, 5, validate=False)
        assert (classify_delay(tau) == D1) == (tau.tau1 >= 1.0)
