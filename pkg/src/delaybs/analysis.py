"""Analytic constants, Lipschitz probes, stability envelopes, norms, timing.

Lipschitz ceilings are evaluated from closed-form expressions in the
primitive constants of the sampled delays and coefficients (``L_tau``,
``L_tau'``, ``L_g``, ``L_c``, ``L_f``, ``L_B``, ``c_bar``, ``f_bar``,
``K_bar``); the primitives are measured on the population being probed.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .coefficients import D1, D2, ScenarioSampler, chebyshev_profile
from .controller import AnalyticController, build_law
from .errors import DegenerateBounds, DegeneratePair, GridMismatch, MissingShadowLabels
from .kernel import solve_kernel
from .simulator import SimConfig, l2, simulate

log = logging.getLogger(__name__)

PROBE_KINDS = ("g-inverse", "kernel-K2", "control-case1", "control-case2", "control-case3")
_CASE_REGIONS = {
    "control-case1": (D1, D1),
    "control-case2": (D1, D2),
    "control-case3": (D2, D2),
}
_FINE = np.linspace(0.0, 1.0, 1001)


# norms -----------------------------------------------------------------------


def norms(x, h=None):
    """``{"L2", "sup", "C1"}`` of a 1-D profile on a uniform grid of [0, 1]."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 1.0 / (x.size - 1)
    dx = np.gradient(x, h, edge_order=2) if x.size >= 3 else np.diff(x) / h
    sup = float(np.max(np.abs(x)))
    return {"L2": float(l2(x, h)), "sup": sup, "C1": sup + float(np.max(np.abs(dx)))}


def l2_sq(v, h):
    return float(l2(v, h) ** 2)


def lyapunov(z, u, tau_samples, b1, b2, A, h=None, dr=None):
    """``(V1, V2, V)`` with ``V1 = int e^{-b1 s} z^2``, ``V2 = int int tau e^{b2 r} u^2``."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    n, nr = u.shape
    h = 1.0 / (n - 1) if h is None else h
    dr = 1.0 / (nr - 1) if dr is None else dr
    s = np.linspace(0.0, 1.0, z.size)
    r = np.linspace(0.0, 1.0, nr)
    V1 = float(np.trapezoid(np.exp(-b1 * s) * z**2, dx=h))
    inner = np.trapezoid(np.exp(b2 * r)[None, :] * u**2, dx=dr, axis=1)
    V2 = float(np.trapezoid(np.asarray(tau_samples) * inner, dx=h))
    return V1, V2, A * V1 + V2


def state_error(trace_a, trace_b):
    """``(times, e_s)`` with ``e_s = ||x_a - x_b||_{L2}`` at shared snapshot times."""
    if trace_a.grid.shape != trace_b.grid.shape or not np.allclose(trace_a.grid, trace_b.grid):
        raise GridMismatch("traces use different spatial grids")
    ta = np.array([sn.t for sn in trace_a.snapshots])
    tb = np.array([sn.t for sn in trace_b.snapshots])
    k = min(ta.size, tb.size)
    if not np.allclose(ta[:k], tb[:k]):
        raise GridMismatch("traces have different snapshot times")
    h = trace_a.grid[1] - trace_a.grid[0]
    e = np.array([l2(trace_a.snapshots[i].x - trace_b.snapshots[i].x, h) for i in range(k)])
    return ta[:k], e


# Lipschitz ceilings --------------------------------------------------------------


@dataclass
class LipschitzBudget:
    L_tau: float
    L_dtau: float
    L_g: float
    L_c: float
    L_f: float
    L_B: float
    dtau_bar: float
    gp_min: float
    gp_max: float
    c_bar: float
    f_bar: float
    K_bar: float
    L_F: float = 0.0
    L_1: float = 0.0
    L_2: float = 0.0
    L_Phi0: float = 0.0
    L_K: float = 0.0
    x_bar: float = 0.0
    u_bar: float = 0.0
    L_u: float = 0.0
    L_ubreve: float = 0.0
    L_U: float = 0.0

    def to_dict(self):
        return asdict(self)


def lemma2_constants(b):
    """Fill ``L_F``, ``L_1``, ``L_2``, ``L_Phi0`` and ``L_K`` in ``b``."""
    if b.dtau_bar >= 1.0 or b.L_tau >= 1.0:
        raise DegenerateBounds(f"sup|tau'| = {max(b.dtau_bar, b.L_tau)} >= 1")
    if b.gp_min <= 0.0:
        raise DegenerateBounds("inf g' must be positive")
    one = 1.0 - b.dtau_bar
    c, f, K = b.c_bar, b.f_bar, b.K_bar
    b.L_F = (c * b.L_B + c * b.L_dtau + b.L_c * one) / one**2
    b.L_1 = 3 * f * K + b.L_f * (1 + K)
    b.L_2 = (
        b.gp_min
        * math.exp(c / b.gp_min)
        * (
            3 * c * K * b.L_g
            + b.L_f * (1 + K) * (1 + c)
            + 3 * f * K * (1 + c)
            + b.L_g / one**2 * (c * b.L_dtau + b.L_c * b.gp_max)
        )
    )
    b.L_Phi0 = b.L_F + 2 * K * f + 3 * c * K / (1 - b.L_tau) + c * (b.L_1 + b.L_2) + 4 * b.L_g * c * K
    b.L_K = b.L_Phi0 * math.exp(max(f, c))
    return b


def lemma3_constant(b):
    """``L_U`` from the filled budget (needs ``L_K``, ``x_bar``, ``u_bar``, ``L_u``)."""
    c, K = b.c_bar, b.K_bar
    b.L_U = max(
        K,
        c * (1 + K),
        6 * c * b.u_bar * K
        + 2 * K * b.x_bar
        + c * b.L_u * (1 + K)
        + b.L_K * (b.x_bar + c * b.u_bar)
        + c * b.u_bar / (1 - b.L_tau),
    )
    return b.L_U


def _pair_primitives(t1, t2):
    d = float(np.max(np.abs(t1(_FINE) - t2(_FINE))))
    dd = float(np.max(np.abs(t1.deriv(_FINE) - t2.deriv(_FINE))))
    return d, dd


def _budget_from(taus, pairs, coeffs, K_bar):
    """Primitive constants measured over a delay population.

    Slope bounds hold only where ``tau(s) <= s``, so each delay contributes
    its slopes on its own delayed interval ``[p*, 1]``; ``L_B`` is the
    largest derivative quotient ``||tau1' - tau2'|| / ||tau1 - tau2||`` over
    the probed pairs.
    """
    rbs = [t.restricted_bounds() for t in taus]
    dtau = max(rb["dtau"] for rb in rbs)
    ddtau = max(rb["ddtau"] for rb in rbs)
    gp_min = min(rb["gp_min"] for rb in rbs)
    gp_max = max(rb["gp_max"] for rb in rbs)
    L_B = 0.0
    for t1, t2 in pairs:
        d, dd = _pair_primitives(t1, t2)
        if d > 1e-9:
            L_B = max(L_B, dd / d)
    return LipschitzBudget(
        L_tau=dtau,
        L_dtau=ddtau,
        L_g=1.0 / gp_min,
        L_c=coeffs.lip_c,
        L_f=coeffs.lip_f,
        L_B=L_B,
        dtau_bar=dtau,
        gp_min=gp_min,
        gp_max=gp_max,
        c_bar=coeffs.c_bar,
        f_bar=coeffs.f_bar,
        K_bar=K_bar,
    )


@dataclass
class ProbeResult:
    kind: str
    quotients: np.ndarray
    ceiling: float
    skipped: int
    budget: LipschitzBudget = field(repr=False, default=None)

    @property
    def max(self):
        return float(np.max(self.quotients)) if self.quotients.size else 0.0

    @property
    def median(self):
        return float(np.median(self.quotients)) if self.quotients.size else 0.0

    @property
    def passed(self):
        return bool(np.all(self.quotients <= self.ceiling))

    def to_dict(self):
        return {
            "kind": self.kind,
            "pairs": int(self.quotients.size),
            "skipped": int(self.skipped),
            "max": self.max,
            "median": self.median,
            "ceiling": self.ceiling,
            "passed": self.passed,
            "budget": self.budget.to_dict() if self.budget is not None else None,
        }


def ginv_quotient(t1, t2, levels=201):
    """``sup_y |g1^{-1}(y) - g2^{-1}(y)| / ||tau1 - tau2||`` over common levels ``y >= 0``."""
    d, _ = _pair_primitives(t1, t2)
    if d < 1e-9:
        raise DegeneratePair("identical delays")
    top = min(t1.map.g1, t2.map.g1)
    if top <= 0:
        raise DegeneratePair("no common delayed levels")
    ys = np.linspace(0.0, top, levels)
    q1 = np.array([t1.map.inverse(y) for y in ys])
    q2 = np.array([t2.map.inverse(y) for y in ys])
    return float(np.max(np.abs(q1 - q2))) / d


def k2_quotient(k1, k2, t1, t2):
    d, _ = _pair_primitives(t1, t2)
    if d < 1e-9:
        raise DegeneratePair("identical delays")
    both = (k1.branch == 2) & (k2.branch == 2)
    if not both.any():
        raise DegeneratePair("no common branch-2 nodes")
    return float(np.max(np.abs(k1.K[both] - k2.K[both]))) / d


def _random_state(rng, n, nr, sampler):
    x, _ = sampler.sample_initial()
    s = np.linspace(0.0, 1.0, n)
    r = np.linspace(0.0, 1.0, nr)
    a = chebyshev_profile(s, rng.uniform(0.5, 4.0), rng.uniform(0.0, 6.0), rng.uniform(0.0, 0.5))
    b = np.cos(rng.uniform(0.0, 3.0) * np.pi * r + rng.uniform(0, np.pi))
    return x, np.outer(a, b)


def _grad_r(u):
    return float(np.max(np.abs(np.diff(u, axis=1)))) * (u.shape[1] - 1)


def lipschitz_probe(kind, n_pairs=100, seed=0, coeffs=None, n=41, workers=1, sampler=None):
    """Empirical Lipschitz quotients against the analytic ceiling for ``kind``.

    Degenerate pairs (``||tau1 - tau2|| < 1e-9``) are skipped and counted.
    """
    from .coefficients import standard_coefficients

    if kind not in PROBE_KINDS:
        raise ValueError(f"unknown probe kind {kind!r}")
    coeffs = standard_coefficients(grid=n) if coeffs is None else coeffs.on_grid(n)
    sampler = ScenarioSampler(seed=seed, n=n) if sampler is None else sampler
    rng = np.random.default_rng(seed + 1)
    regions = _CASE_REGIONS.get(kind, (D2, D2))
    pairs = [(sampler.sample_delay(regions[0]), sampler.sample_delay(regions[1])) for _ in range(n_pairs)]
    taus = [t for p in pairs for t in p]

    if kind == "g-inverse":
        qs, skipped = [], 0
        for t1, t2 in pairs:
            try:
                qs.append(ginv_quotient(t1, t2))
            except DegeneratePair:
                skipped += 1
        b = _budget_from(taus, pairs, coeffs, 0.0)
        return ProbeResult(kind, np.array(qs), 1.0 / (1.0 - b.L_tau), skipped, b)

    def kern(t):
        return solve_kernel(coeffs, t)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        kernels = list(ex.map(kern, taus))
    K_bar = max(k.sup for k in kernels)
    b = lemma2_constants(_budget_from(taus, pairs, coeffs, K_bar))

    if kind == "kernel-K2":
        qs, skipped = [], 0
        for i, (t1, t2) in enumerate(pairs):
            try:
                qs.append(k2_quotient(kernels[2 * i], kernels[2 * i + 1], t1, t2))
            except DegeneratePair:
                skipped += 1
        return ProbeResult(kind, np.array(qs), b.L_K, skipped, b)

    from .controller import ControlLaw

    qs, skipped = [], 0
    x_bar = u_bar = L_ub = 0.0
    tau_min = min(t.tau_min for t in taus)
    for i, (t1, t2) in enumerate(pairs):
        x1, u1 = _random_state(rng, n, n, sampler)
        if rng.random() < 0.5:
            x2, u2 = x1, u1
        else:
            x2, u2 = _random_state(rng, n, n, sampler)
        d, _ = _pair_primitives(t1, t2)
        dx = float(np.max(np.abs(x1 - x2)))
        du = float(np.max(np.abs(u1 - u2)))
        den = max(d, dx, du)
        if d < 1e-9 and den < 1e-9:
            skipped += 1
            continue
        U1 = ControlLaw(kernels[2 * i], t1, coeffs).raw(x1, u1)
        U2 = ControlLaw(kernels[2 * i + 1], t2, coeffs).raw(x2, u2)
        qs.append(abs(U1 - U2) / den)
        x_bar = max(x_bar, np.abs(x1).max(), np.abs(x2).max())
        u_bar = max(u_bar, np.abs(u1).max(), np.abs(u2).max())
        L_ub = max(L_ub, _grad_r(u1), _grad_r(u2))
    b.x_bar, b.u_bar, b.L_ubreve = float(x_bar), float(u_bar), L_ub
    b.L_u = L_ub / tau_min
    return ProbeResult(kind, np.array(qs), lemma3_constant(b), skipped, b)


# stability constants -----------------------------------------------------------


@dataclass
class StabilityConstants:
    b1: float
    b2: float
    B_tau: float
    B_tau_lower: float
    B_x: float
    B_u: float
    K_bar: float
    c_bar: float
    f_bar: float
    F1_bar: float
    epsilon: float
    A: float
    a: float
    beta1: float
    beta2: float
    k1: float
    k2: float
    M1: float
    M2: float
    eps_star: float
    B0: float
    assumptions: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def default_F1_bar(K_bar):
    """Inverse-kernel bound surrogate ``K_bar e^{K_bar}``."""
    return K_bar * math.exp(K_bar)


def stability_constants(
    b1,
    b2,
    B_tau,
    B_tau_lower,
    K_bar,
    c_bar,
    f_bar,
    B_x=1.0,
    B_u=1.0,
    F1_bar=None,
    epsilon=0.0,
    dtau_bar=0.0,
):
    """Every constant of the practical-stability estimate.

    ``F1_bar`` defaults to :func:`default_F1_bar`; ``dtau_bar`` is the delay
    slope bound, which must stay below one.
    """
    if not (b1 > 0 and b2 > 0):
        raise DegenerateBounds("b1 and b2 must be positive")
    if not (B_tau_lower > 0 and B_tau >= B_tau_lower):
        raise DegenerateBounds(f"need 0 < B_tau_lower <= B_tau, got {B_tau_lower}, {B_tau}")
    if dtau_bar >= 1.0:
        raise DegenerateBounds(f"sup|tau'| = {dtau_bar} >= 1")
    assumptions = []
    if F1_bar is None:
        F1_bar = default_F1_bar(K_bar)
        assumptions.append("F1_bar = K_bar * exp(K_bar) (surrogate)")
    A = math.exp(b1 * b2)
    a = min(b1, b2 / B_tau)
    if a <= 0:
        raise DegenerateBounds("decay rate a must be positive")
    beta1 = min(1.0, math.exp(-b2) / B_tau) / A
    beta2 = max(math.exp(b1), 1.0 / B_tau_lower)
    k1 = 4 * max(1 + K_bar, c_bar**2 * (1 + B_tau**2 * K_bar**2) + 1)
    k2 = max(4 * (1 + F1_bar**2), 1 + 4 * c_bar**2 * (1 + B_tau**2 * math.exp(2 * f_bar * B_tau)))
    M1 = k1 / beta1 * k2 * beta2
    M2 = k2 * beta2 * A
    eps_star = math.sqrt((B_x**2 + B_u**2) / (k2 * beta2 * A))
    B0 = beta1 / k1 * ((B_x**2 + B_u**2) / (k2 * beta2) - A * epsilon**2)
    return StabilityConstants(
        b1, b2, B_tau, B_tau_lower, B_x, B_u, K_bar, c_bar, f_bar, F1_bar, epsilon,
        A, a, beta1, beta2, k1, k2, M1, M2, eps_star, B0, assumptions,
    )


def constants_for(law, b1=1.0, b2=1.0, B_x=1.0, B_u=1.0, F1_bar=None, epsilon=0.0):
    """:func:`stability_constants` with bounds read off one control law."""
    tau = law.tau
    rb = tau.restricted_bounds()
    return stability_constants(
        b1, b2, tau.tau_bar, tau.tau_min, law.kernel.sup, law.coeffs.c_bar, law.coeffs.f_bar,
        B_x=B_x, B_u=B_u, F1_bar=F1_bar, epsilon=epsilon, dtau_bar=rb["dtau"],
    )


# envelope --------------------------------------------------------------------


@dataclass
class EnvelopeReport:
    t: np.ndarray
    margin: np.ndarray
    epsilon: float
    passed: bool
    k1_ratio: np.ndarray
    k1_passed: bool

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "passed": self.passed,
            "min_margin": float(self.margin.min()),
            "k1_passed": self.k1_passed,
            "max_k1_ratio": float(self.k1_ratio.max()) if self.k1_ratio.size else 0.0,
        }


def verify_envelope(trace, constants, epsilon=None, law=None):
    """Check the decay-plus-ball estimate at every recorded time.

    ``epsilon`` defaults to ``max |U - U_shadow|`` along the trace.  With a
    ``law`` the norm-equivalence ``||z||^2 + ||u||^2 <= k1 (||x||^2 + ||u||^2)``
    is also checked on every snapshot (``k1_ratio`` is the left side over
    the right side).
    """
    if constants.a <= 0:
        raise DegenerateBounds("decay rate a must be positive")
    if epsilon is None:
        if trace.shadow_U is None:
            raise MissingShadowLabels("trace has no shadow controller outputs")
        k = min(trace.U.size, trace.shadow_U.size)
        epsilon = float(np.max(np.abs(trace.U[:k] - trace.shadow_U[:k]))) if k else 0.0
    e = trace.x_l2**2 + trace.u_l2**2
    bound = constants.M1 * np.exp(-constants.a * trace.t) * e[0] + constants.M2 * epsilon**2
    margin = bound - e
    ratios = []
    if law is not None:
        h = trace.grid[1] - trace.grid[0]
        hr = (h, trace.r_grid[1] - trace.r_grid[0])
        for sn in trace.snapshots:
            z = law.transform(sn.x, sn.u)
            uu = l2(sn.u, hr) ** 2
            lhs = l2(z, h) ** 2 + uu
            rhs = constants.k1 * (l2(sn.x, h) ** 2 + uu)
            ratios.append(lhs / rhs if rhs > 0 else 0.0)
    ratios = np.array(ratios)
    return EnvelopeReport(
        trace.t, margin, float(epsilon), bool(np.all(margin >= 0)), ratios, bool(np.all(ratios <= 1.0))
    )


# benchmark -------------------------------------------------------------------


@dataclass
class BenchRow:
    ds: float
    analytic_seconds: float
    neural_seconds: float
    reps: int

    @property
    def speedup(self):
        return self.analytic_seconds / self.neural_seconds


def bench_controllers(scenarios, model, coeffs, grids=(0.08, 0.05, 0.025), reps=10, steps=10, dt=None):
    """Mean controller wall-clock per closed-loop horizon of ``steps`` steps.

    The analytic controller re-solves the kernel at every call, the cost a
    numerical controller pays when the delay is re-measured; the neural one
    runs one forward pass.  ``scenarios`` is a list of ``(tau, x0)``.
    """
    from .coefficients import make_delay
    from .operator_learning import NeuralController

    rows = []
    for ds in grids:
        n = int(round(1.0 / ds)) + 1
        step = dt if dt is not None else min(ds, 0.005)
        co = coeffs.on_grid(n)
        ta = tn = 0.0
        for _ in range(reps):
            for tau, x0 in scenarios:
                tg = make_delay(tau.family, tau.params, n, validate=False)
                s = np.linspace(0.0, 1.0, n)
                x0g = np.interp(s, np.linspace(0.0, 1.0, np.size(x0)), x0)
                an = AnalyticController(co, tg, recompute=True, max_h=0.1)
                nn = NeuralController(model)
                cfg = dict(ds=1.0 / (n - 1), dr=1.0 / (n - 1), dt=step, T=steps * step, snapshot_stride=10**9)
                simulate(co, tg, x0g, SimConfig(controller=an, **cfg))
                simulate(co, tg, x0g, SimConfig(controller=nn, **cfg))
                ta += an.seconds
                tn += nn.seconds
        k = reps * len(scenarios)
        rows.append(BenchRow(ds, ta / k, tn / k, reps))
        log.info("ds=%g analytic %.4gs neural %.4gs", ds, ta / k, tn / k)
    return rows


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0
