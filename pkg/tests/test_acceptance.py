"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the session prints in its
terminal summary, then asserts the same condition.
"""

import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import D1_DELAY, D2_DELAY, DT, X0
from delaybs.analysis import (
    PROBE_KINDS,
    bench_controllers,
    constants_for,
    lipschitz_probe,
    state_error,
    verify_envelope,
)
from delaybs.cli import run_command
from delaybs.coefficients import D1, D2, ScenarioSampler, chebyshev_profile, make_coefficients, make_delay, standard_coefficients
from delaybs.controller import AnalyticController, build_law, target_residual
from delaybs.kernel import branch_boundary_gap, kernel_bound, solve_kernel
from delaybs.operator_learning import ModelConfig, NeuralController, evaluate, load_model, predict, save_model
from delaybs.operator_learning.model import DeepONetModel, _grads, amplitude_scale, channel_stats
from delaybs.operator_learning.network import init_params
from delaybs.simulator import SimConfig, l2, simulate, simulate_delayed_reference

DELAYS = {D1: D1_DELAY, D2: D2_DELAY}


def _benchmark(region, N=40):
    s = np.linspace(0.0, 1.0, N + 1)
    return standard_coefficients(grid=s), make_delay(*DELAYS[region], s), chebyshev_profile(s, **X0)


def _ratio(tr):
    return float(tr.x_l2[-1] / tr.x_l2[0])


@pytest.fixture(scope="module")
def analytic_runs():
    runs = {}
    for region in (D1, D2):
        co, tau, x0 = _benchmark(region)
        ctrl = AnalyticController(co, tau)
        runs[region] = (simulate(co, tau, x0, SimConfig(dt=DT[region], T=10.0, controller=ctrl)), ctrl.law)
    return runs


def test_criterion_01_closed_loop_stabilization(analytic_runs, criterion):
    ratios = {r: _ratio(tr) for r, (tr, _) in analytic_runs.items()}
    ok = all(v <= 0.01 for v in ratios.values()) and not any(tr.diverged for tr, _ in analytic_runs.values())
    detail = ", ".join(f"{r} ||x(10)||/||x0|| = {v:.3g}" for r, v in ratios.items()) + " (limit 0.01)"
    assert criterion(1, ok, detail)


def test_criterion_02_uncompensated_baseline(criterion):
    ratios = {}
    for region in (D1, D2):
        co, tau, x0 = _benchmark(region)
        tr = simulate(co, tau, x0, SimConfig(dt=DT[region], T=10.0, controller="zero", snapshot_stride=10**6))
        ratios[region] = np.inf if tr.diverged else _ratio(tr)
    ok = all(v >= 1.0 for v in ratios.values())
    detail = ", ".join(f"{r} ratio {v:.3g}" for r, v in ratios.items()) + " (limit >= 1)"
    assert criterion(2, ok, detail)


def _mean_weak_residual(region, N, dt):
    co, tau, x0 = _benchmark(region, N)
    law = build_law(co, tau, nr=N + 1)
    tr = simulate(co, tau, x0, SimConfig(ds=1 / N, dr=1 / N, dt=dt, T=10.0, controller=AnalyticController(co, tau)))
    _, res, _ = target_residual(tr, law, norm="weak")
    return float(res.mean())


def test_criterion_03_target_system_certificate(analytic_runs, criterion):
    parts, ok = [], True
    for region, (tr, law) in analytic_runs.items():
        _, _, z0 = target_residual(tr, law)
        z_rel = np.abs(z0).max() / np.abs(tr.snapshots[0].x[1:]).max()
        coarse = _mean_weak_residual(region, 40, DT[region])
        fine = _mean_weak_residual(region, 80, DT[region] / 2)
        rate = coarse / fine
        ok &= z_rel <= 1e-2 and rate >= 1.7
        parts.append(f"{region} max|z(0)|/||x0||inf = {z_rel:.2g}, residual {coarse:.4f} -> {fine:.4f} ({rate:.2f}x)")
    assert criterion(3, ok, "; ".join(parts) + " (limits 1e-2, 1.7x)")


def test_criterion_04_representation_equivalence(coeffs, criterion):
    sampler = ScenarioSampler(seed=4)
    worst_x = worst_u = 0.0
    for region in [D1] * 10 + [D2] * 10:
        tau, x0 = sampler.sample_scenario(region)
        cfg = SimConfig(dt=DT[region], T=5.0, controller="zero")
        a = simulate(coeffs, tau, x0, cfg)
        b = simulate_delayed_reference(coeffs, tau, x0, cfg)
        h = 1.0 / 40
        bound = 5 * (cfg.ds + cfg.dt) * max(a.x_l2.max(), b.x_l2.max())
        gap = max(l2(sa.x - sb.x, h) for sa, sb in zip(a.snapshots, b.snapshots))
        worst_x = max(worst_x, gap / bound)
        out = np.array([sn.x[-1] for sn in a.snapshots])
        tau_s = tau(a.grid)
        u_bound = 5 * (cfg.ds + cfg.dt) * np.abs(out).max()
        for sn in a.snapshots:
            ready = sn.t >= tau_s
            if ready.any():
                ref = np.interp(sn.t - tau_s[ready], a.t, out)
                worst_u = max(worst_u, np.abs(sn.u[ready, 0] - ref).max() / u_bound)
    ok = worst_x <= 1.0 and worst_u <= 1.0
    detail = f"worst x gap {worst_x:.3g}, worst u(s,0,t) gap {worst_u:.3g} of the bound 5(ds+dt)sup||x|| over 20 scenarios"
    assert criterion(4, ok, detail)


def test_criterion_05_kernel_certificates(coeffs, criterion):
    res, last = 0.0, True
    for region in (D1, D2):
        kg = solve_kernel(coeffs, make_delay(*DELAYS[region], 41))
        res = max(res, kg.residual)
        last &= bool(np.all(kg.K[kg.branch[:, -1] == 1, -1] == 0.0))
    smp = ScenarioSampler(seed=11, n=21)
    rng = np.random.default_rng(11)
    bound_ok = 0
    for k in range(200):
        cg, fc, fs = rng.uniform(0, 25), rng.uniform(0, 6), rng.uniform(0, 6)
        co = make_coefficients(
            lambda s, cg=cg: cg * (1 - np.asarray(s)),
            lambda s, q, fc=fc, fs=fs: fc * np.cos(2 * np.pi * q) + fs * np.sin(2 * np.pi * s),
            21,
        )
        tau = smp.sample_delay(D1 if k % 2 else D2)
        kg = solve_kernel(co, tau)
        res = max(res, kg.residual)
        bound_ok += kg.sup <= kernel_bound(co, tau, slopes="delayed").K_bar
    tau2 = make_delay(*D2_DELAY, 41)
    gaps = [branch_boundary_gap(solve_kernel(coeffs, tau2, h=h)) for h in (0.025, 0.0125, 0.00625)]
    orders = np.log2(np.array(gaps[:-1]) / np.array(gaps[1:]))
    ok = res <= 1e-8 and bound_ok == 200 and np.all(orders >= 0.9) and last
    detail = (f"max residual {res:.2g}, sup|K| <= K_bar on {bound_ok}/200, "
              f"gap orders {orders.round(2).tolist()}, K(s,1)=0 on branch 1: {last}")
    assert criterion(5, ok, detail)


def test_criterion_06_lipschitz_probes(criterion):
    parts, ok = [], True
    for kind in PROBE_KINDS:
        r = lipschitz_probe(kind, n_pairs=100, seed=6)
        ok &= r.passed and r.quotients.size >= 100 - r.skipped and r.quotients.size > 0
        parts.append(f"{kind} {r.max:.3g}/{r.ceiling:.3g}")
    assert criterion(6, ok, "max/ceiling: " + ", ".join(parts))


@pytest.fixture(scope="module")
def neural_runs(desk_model):
    runs = {}
    for region in (D1, D2):
        co, tau, x0 = _benchmark(region)
        an = AnalyticController(co, tau)
        cfg = SimConfig(dt=DT[region], T=20.0, snapshot_stride=int(round(0.1 / DT[region])))
        runs[region] = {
            "law": an.law,
            "analytic": simulate(co, tau, x0, replace(cfg, controller=an)),
            "neural": simulate(co, tau, x0, replace(cfg, controller=NeuralController(desk_model)), shadow=an),
            "noisy": simulate(co, tau, x0, replace(cfg, controller=NeuralController(desk_model), noise_sigma=0.05)),
        }
    return runs


def test_criterion_07_operator_learning(desk_model, desk_dataset, neural_runs, criterion):
    loss = evaluate(desk_model, desk_dataset)["smooth_l1"]
    ok = loss <= 5e-3
    parts = [f"{len(desk_dataset)} records from {len(desk_dataset.scenarios)} scenarios, smooth-L1 {loss:.3g} (limit 5e-3)"]
    for region, r in neural_runs.items():
        x0n = r["analytic"].x_l2[0]
        _, es = state_error(r["analytic"], r["neural"])
        noisy = r["noisy"]
        bounded = not r["neural"].diverged and not noisy.diverged and noisy.x_l2[-1] <= x0n
        ok &= bool(es[-1] <= 0.05 * x0n and bounded)
        parts.append(f"{region} e_s(20)/||x0|| = {es[-1] / x0n:.3g}, noisy max {noisy.x_l2.max() / x0n:.3g} "
                     f"end {noisy.x_l2[-1] / x0n:.3g}")
    assert criterion(7, ok, "; ".join(parts))


def test_criterion_08_stability_envelope(neural_runs, criterion):
    parts, ok = [], True
    for region, r in neural_runs.items():
        rep = verify_envelope(r["neural"], constants_for(r["law"]), law=r["law"])
        ok &= rep.passed and rep.k1_passed
        parts.append(f"{region} eps {rep.epsilon:.3g}, min margin {rep.margin.min():.3g}, "
                     f"max k1 ratio {rep.k1_ratio.max():.3g}")
    assert criterion(8, ok, "; ".join(parts))


def test_criterion_09_benchmark(desk_model, coeffs, criterion):
    scen = []
    for region in (D1, D2):
        _, tau, x0 = _benchmark(region)
        scen.append((tau, x0))
    rows = bench_controllers(scen, desk_model, coeffs, grids=(0.08, 0.05, 0.025), reps=10, steps=10)
    sp = [r.speedup for r in rows]
    ok = sp[-1] >= 5 and all(a < b for a, b in zip(sp, sp[1:]))
    detail = ", ".join(f"ds={r.ds:g} {r.speedup:.1f}x" for r in rows) + " (>= 5x at 0.025, increasing)"
    assert criterion(9, ok, detail)


def _gradient_error():
    cfg = ModelConfig(m=5, p=3, branch_widths=(8,), trunk_widths=(4,), activation="tanh", output_bias=True)
    rng = np.random.default_rng(10)
    X = rng.normal(size=(12, 3, 5, 5))
    Xs, a = amplitude_scale(X)
    model = DeepONetModel(cfg, init_params(cfg), *channel_stats(Xs))
    Xn = model.normalize(Xs)
    y = rng.normal(size=12)
    P = model.params
    _, g = _grads(model.net, P, Xn, a, y, 1.0, 1)
    keys = sorted(P)
    picks = [(k, i) for k in keys for i in range(P[k].size)]
    picks = [picks[j] for j in rng.choice(len(picks), 100, replace=False)]
    ga, gf = [], []
    for k, i in picks:
        orig = P[k].flat[i]
        P[k].flat[i] = orig + 1e-6
        lp = _grads(model.net, P, Xn, a, y, 1.0, 1)[0]
        P[k].flat[i] = orig - 1e-6
        lm = _grads(model.net, P, Xn, a, y, 1.0, 1)[0]
        P[k].flat[i] = orig
        ga.append(g[k].flat[i])
        gf.append((lp - lm) / 2e-6)
    ga, gf = np.array(ga), np.array(gf)
    return float(np.linalg.norm(ga - gf) / np.linalg.norm(gf))


def test_criterion_10_numeric_hygiene(desk_model, tmp_path, criterion):
    grad = _gradient_error()
    path = tmp_path / "model.json"
    save_model(desk_model, path)
    back = load_model(path)
    exact = all(np.array_equal(back.params[k], desk_model.params[k]) for k in desk_model.params)
    rng = np.random.default_rng(0)
    args = (np.full(41, 0.7), rng.normal(size=41), rng.normal(size=(41, 41)))
    exact &= predict(back, *args) == predict(desk_model, *args)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"T": 1.0}))
    csvs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = run_command(["simulate", "--config", str(cfg), "--noise", "0.05", "--seed", "3", "--out", str(out)])
        csvs.append((out / "trace.csv").read_bytes() if code == 0 else name.encode())
    same = csvs[0] == csvs[1]
    ok = grad <= 1e-5 and exact and same
    detail = f"gradient rel. error {grad:.2g} (limit 1e-5), save/load bit-exact: {exact}, identical CSVs: {same}"
    assert criterion(10, ok, detail)
