import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delaybs.coefficients import D1, D2, chebyshev_profile, make_delay, zero_coefficients
from delaybs.controller import (
    AnalyticController,
    ZeroController,
    analytic_control,
    build_law,
    forward_transform,
    target_residual,
)
from delaybs.errors import GridMismatch, InsufficientSnapshots
from delaybs.quadrature import uniform_trapz_weights
from delaybs.simulator import SimConfig, simulate


def _state(seed, n=41, nr=41):
    rng = np.random.default_rng(seed)
    return rng.normal(size=n), rng.normal(size=(n, nr))


def test_zero_plant_zero_control(tau_d2):
    law = build_law(zero_coefficients(), tau_d2)
    x, u = _state(0)
    assert analytic_control(law, x, u) == 0.0


def test_initial_control_is_kernel_integral(coeffs, tau_d1, x0):
    law = build_law(coeffs, tau_d1)
    w = uniform_trapz_weights(41, law.h)
    assert law.raw(x0, np.zeros((41, 41))) == pytest.approx(np.sum(w * law.kernel.K[0] * x0), rel=1e-12)


def test_initial_control_second_order(coeffs):
    fam, p = "cosine-chebyshev", {"offset": 3.0, "amplitude": 0.5, "order": 5.0}
    U = []
    for n in (41, 81, 161):
        s = np.linspace(0, 1, n)
        law = build_law(coeffs.on_grid(n), make_delay(fam, p, n))
        U.append(law.raw(chebyshev_profile(s, 5, 4, 0.2), np.zeros((n, n))))
    rich_coarse = (4 * U[1] - U[0]) / 3
    rich_fine = (4 * U[2] - U[1]) / 3
    assert rich_coarse == pytest.approx(rich_fine, rel=1e-4)


def test_region_boundary_continuity(coeffs):
    x, u = _state(1)
    lo = build_law(coeffs, make_delay("constant", {"value": 1.0 - 1e-6}))
    hi = build_law(coeffs, make_delay("constant", {"value": 1.0 + 1e-6}))
    assert lo.region == D2 and hi.region == D1
    gap = abs(lo(x, u) - hi(x, u))
    assert gap <= 1e-3 * (np.abs(x).max() + np.abs(u).max())


def test_grid_mismatch(coeffs, tau_d2):
    law = build_law(coeffs, tau_d2)
    with pytest.raises(GridMismatch):
        law(np.zeros(40), np.zeros((41, 41)))
    with pytest.raises(GridMismatch):
        law(np.zeros(41), np.zeros((41, 40)))


def test_d2_law_stores_inverse_at_zero(coeffs, tau_d2):
    law = build_law(coeffs, tau_d2)
    assert 0.0 <= law.g_inv0 <= 1.0
    assert law.g_inv0 == pytest.approx(tau_d2.map.inverse(0.0))


def test_d1_law_uses_single_integral_to_one(coeffs, tau_d1):
    law = build_law(coeffs, tau_d1)
    assert law.g_inv0 is None
    assert law._qe(0.0) == 1.0


def test_seam_at_gbar(coeffs, tau_d2):
    law = build_law(coeffs, tau_d2)
    assert law._qe(law.gbar - 1e-12) == pytest.approx(1.0, abs=1e-9)
    assert law._qe(law.gbar) == 1.0


def test_identity_transform_without_coupling(tau_d2):
    law = build_law(zero_coefficients(), tau_d2)
    x, u = _state(2)
    snap = forward_transform(law, x, u)
    assert np.array_equal(snap.z, x)


def test_implicit_solve_zeroes_boundary(coeffs, tau_d1, tau_d2):
    for tau in (tau_d1, tau_d2):
        law = build_law(coeffs, tau)
        x, u = _state(3)
        x[0] = law(x, u)
        assert abs(law.transform(x, u)[0]) <= 1e-10 * (np.abs(x).max() + np.abs(u).max())


def test_target_residual_needs_snapshots(coeffs, tau_d2, x0):
    law = build_law(coeffs, tau_d2)
    # shorter than half a step: only the initial state is recorded
    tr = simulate(coeffs, tau_d2, x0, SimConfig(T=0.002, controller="zero"))
    assert len(tr.snapshots) == 1
    with pytest.raises(InsufficientSnapshots):
        target_residual(tr, law)


def test_target_residual_uncompensated_is_finite(coeffs, tau_d2, x0):
    law = build_law(coeffs, tau_d2)
    tr = simulate(coeffs, tau_d2, x0, SimConfig(T=1.0, snapshot_stride=20, controller="zero"))
    for norm in ("weak", "l2", "sup"):
        t, r, z0 = target_residual(tr, law, norm=norm)
        assert np.all(np.isfinite(r)) and np.all(r >= 0) and np.all(np.isfinite(z0))


def test_target_residual_pure_transport(tau_d2):
    # with K = 0 and c = 0 the target residual is the x-equation residual
    co = zero_coefficients()
    law = build_law(co, tau_d2)
    s = np.linspace(0, 1, 41)
    tr = simulate(co, tau_d2, np.sin(np.pi * s) ** 2, SimConfig(dt=0.0125, T=0.5, controller="zero"))
    t, r, _ = target_residual(tr, law, norm="l2")
    xs = [sn.x for sn in tr.snapshots]
    direct = [np.sqrt(np.sum(((b[1:] - a[1:]) / 0.0125 + (a[1:] - a[:-1]) / law.h) ** 2) * law.h) for a, b in zip(xs, xs[1:])]
    assert np.allclose(r, direct)
    assert max(r) <= 10 * (0.025 + 0.0125) * np.pi**2


def test_closed_loop_boundary_certificate(coeffs, tau_d2, x0):
    ctrl = AnalyticController(coeffs, tau_d2)
    tr = simulate(coeffs, tau_d2, x0, SimConfig(T=1.0, snapshot_stride=10, controller=ctrl))
    _, _, z0 = target_residual(tr, ctrl.law)
    assert np.abs(z0).max() <= 1e-2 * np.abs(x0).max()


def test_noisy_delay_flips_branches_without_nan(coeffs):
    tau = make_delay("constant", {"value": 1.0})
    ctrl = AnalyticController(coeffs, tau, recompute=True)
    x, u = _state(4)
    rng = np.random.default_rng(4)
    outs = []
    for _ in range(6):
        ts = np.clip(tau.samples + rng.normal(0, 0.05, 41), 0.5, None)
        outs.append(ctrl(ts, x, u))
    assert np.all(np.isfinite(outs))
    assert ctrl.calls == 6 and ctrl.seconds > 0


def test_zero_controller():
    assert ZeroController()(None, np.ones(3), np.ones((3, 3))) == 0.0


@settings(max_examples=15, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 10_000))
def test_control_is_linear(alpha, seed):
    from delaybs.coefficients import standard_coefficients

    law = _law_cache.setdefault("d2", build_law(standard_coefficients(), make_delay("exponential", {"amplitude": 0.5, "rate": -1.6})))
    x, u = _state(seed)
    assert law(alpha * x, alpha * u) == pytest.approx(alpha * law(x, u), rel=1e-9, abs=1e-9)


_law_cache = {}
