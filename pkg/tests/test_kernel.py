import numpy as np
import pytest

from delaybs.coefficients import D1, D2, ScenarioSampler, make_coefficients, make_delay, zero_coefficients
from delaybs.errors import DegenerateSlope, SingleBranch
from delaybs.kernel import branch_boundary_gap, kernel_bound, solve_kernel


def _on_coarse(kg, n):
    step = (kg.n - 1) // (n - 1)
    return kg.K[::step, ::step]


def test_zero_data_gives_zero_kernel(tau_d2):
    kg = solve_kernel(zero_coefficients(), tau_d2)
    assert np.all(kg.K == 0.0)
    assert kg.iterations <= 2
    assert branch_boundary_gap(kg) == 0.0


def test_residual_below_tolerance(coeffs, tau_d1, tau_d2):
    for tau in (tau_d1, tau_d2):
        kg = solve_kernel(coeffs, tau)
        assert kg.residual <= 1e-8


def test_last_column_vanishes_on_branch_one(coeffs, tau_d1, tau_d2):
    for tau in (tau_d1, tau_d2):
        kg = solve_kernel(coeffs, tau)
        b1 = kg.branch[:, -1] == 1
        assert np.all(kg.K[b1, -1] == 0.0)


def test_branch_mask_constant_on_antidiagonals(coeffs, tau_d2):
    kg = solve_kernel(coeffs, tau_d2)
    for m in range(kg.n):
        k = np.arange(kg.n - m)
        assert np.unique(kg.branch[k, k + m]).size == 1


def test_d1_kernel_ignores_delay_shape(coeffs, tau_d1):
    other = make_delay("cosine-chebyshev", {"offset": 3.0, "amplitude": -0.9, "order": 2.0}, 41)
    a = solve_kernel(coeffs, tau_d1)
    b = solve_kernel(coeffs, other)
    assert a.region == b.region == D1
    assert np.array_equal(a.K, b.K)
    assert np.array_equal(a.K, a.K1)
    assert np.all(a.branch[a.valid] == 1)


def test_refinement_against_fine_grid(coeffs, tau_d2):
    coarse = solve_kernel(coeffs, tau_d2, h=0.025)
    fine = solve_kernel(coeffs, tau_d2, h=0.00625)
    diff = np.abs(_on_coarse(fine, 41) - coarse.K)[coarse.valid].max()
    assert diff / fine.sup <= 2e-2


def test_refinement_rate(coeffs, tau_d2):
    ks = [solve_kernel(coeffs, tau_d2, h=h) for h in (0.05, 0.025, 0.0125)]
    d1 = np.abs(_on_coarse(ks[1], 21) - ks[0].K)[ks[0].valid].max()
    d2 = np.abs(_on_coarse(ks[2], 21) - _on_coarse(ks[1], 21))[ks[0].valid].max()
    assert d1 / d2 >= 1.7


def test_residual_decreases_after_start(coeffs, tau_d1):
    hist = solve_kernel(coeffs, tau_d1).residual_history
    assert all(b <= a for a, b in zip(hist[3:], hist[4:]))


def test_h_precondition(coeffs, tau_d2):
    with pytest.raises(ValueError):
        solve_kernel(coeffs, tau_d2, h=0.1)
    assert solve_kernel(coeffs, tau_d2, h=0.1, max_h=0.1).n == 11


def test_bound_zero_coefficients(tau_d2):
    b = kernel_bound(zero_coefficients(), tau_d2)
    assert b.W0 == 0.0 and b.K_bar == 0.0


def test_bound_constant_delay(coeffs):
    tau = make_delay("constant", {"value": 0.4})
    b = kernel_bound(coeffs, tau)
    cf = coeffs.c_bar + coeffs.f_bar
    assert b.w == 1.0
    assert b.W0 == pytest.approx(cf)
    assert b.K_bar == pytest.approx(cf * np.exp(cf))


def test_bound_benchmark_d2(coeffs, tau_d2):
    assert tau_d2.dtau_bar == pytest.approx(0.8)
    assert tau_d2.map.gprime_min == pytest.approx(1 + 0.8 * np.exp(-1.6), rel=1e-6)
    b = kernel_bound(coeffs, tau_d2)
    assert b.w == 1.0
    assert b.W0 == pytest.approx(110.0, rel=1e-3)
    assert b.K_bar == pytest.approx(110.0 * np.exp(30.0), rel=1e-3)


def test_bound_degenerate_slope(coeffs, tau_d1):
    with pytest.raises(DegenerateSlope):
        kernel_bound(coeffs, tau_d1)
    # nothing of a D1 delay is read by the kernel
    assert kernel_bound(coeffs, tau_d1, slopes="delayed").w == 1.0


def test_bound_holds_on_random_draws():
    smp = ScenarioSampler(seed=11, n=21)
    rng = np.random.default_rng(11)
    for k in range(200):
        cg, fc, fs = rng.uniform(0, 25), rng.uniform(0, 6), rng.uniform(0, 6)
        co = make_coefficients(
            lambda s: cg * (1 - np.asarray(s)),
            lambda s, q: fc * np.cos(2 * np.pi * q) + fs * np.sin(2 * np.pi * s),
            21,
        )
        tau = smp.sample_delay(D1 if k % 2 else D2)
        kg = solve_kernel(co, tau)
        assert kg.sup <= kernel_bound(co, tau, slopes="delayed").K_bar


def test_gap_single_branch(coeffs, tau_d1):
    with pytest.raises(SingleBranch):
        branch_boundary_gap(solve_kernel(coeffs, tau_d1))


def test_gap_without_coupling(tau_d2):
    co = make_coefficients(lambda s: 20 * (1 - np.asarray(s)), lambda s, q: 0.0 * s * q, 41)
    kg = solve_kernel(co, tau_d2)
    assert np.all(kg.K1 == 0.0)
    m_b = int(np.floor(kg.tau1 / kg.h + 1e-9))
    k = np.arange(kg.n - m_b - 1)
    assert branch_boundary_gap(kg) == pytest.approx(np.abs(kg.K[k, k + m_b + 1]).max())


def test_gap_first_order(coeffs, tau_d2):
    gaps = [branch_boundary_gap(solve_kernel(coeffs, tau_d2, h=h)) for h in (0.025, 0.0125, 0.00625)]
    # constant estimated from the coarse pair, then checked on the finest grid
    C = gaps[0] / 0.025
    assert gaps[1] / gaps[0] == pytest.approx(0.5, abs=0.05)
    assert gaps[2] <= 1.1 * C * 0.00625


def test_kernel_export(tmp_path, coeffs, tau_d2):
    kg = solve_kernel(coeffs, tau_d2, h=0.05)
    kg.write(tmp_path / "k.csv", tmp_path / "k.json", kbar=1.0)
    lines = (tmp_path / "k.csv").read_text().splitlines()
    assert lines[0] == "s,q,branch,K"
    assert len(lines) == 1 + 21 * 22 // 2
