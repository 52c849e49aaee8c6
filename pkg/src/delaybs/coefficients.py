"""Delay functions, the delayed-time map and plant coefficients.

A delay ``tau(s) > 0`` on ``[0, 1]`` belongs to region D1 when
``tau(1) >= 1`` and to D2 otherwise.  Where ``tau(s) < s`` it must
satisfy ``|tau'(s)| < 1``, which makes ``g(s) = s - tau(s)`` increasing
there and therefore invertible on ``[0, g(1)]``.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .errors import (
    NonMonotone,
    NonPositiveDelay,
    OutOfRange,
    RetryExhausted,
    SlopeViolation,
)

D1 = "D1"
D2 = "D2"
FAMILIES = ("cosine-chebyshev", "exponential", "constant", "tabulated")

TOL_INV = 1e-10
_CHECK_POINTS = 2001


def uniform_grid(h):
    """Uniform grid on [0, 1]; ``h`` is snapped to ``1/round(1/h)``."""
    n = int(round(1.0 / h))
    if n < 1:
        raise ValueError(f"grid spacing {h} too coarse")
    return np.linspace(0.0, 1.0, n + 1)


def _chebyshev_cos(s, amp, order):
    theta = np.arccos(np.clip(s, -1.0, 1.0))
    return amp * np.cos(order * theta)


def _chebyshev_cos_d(s, amp, order):
    # d/ds cos(G arccos s) = G sin(G theta) / sin(theta), limit G^2 at s = 1
    theta = np.arccos(np.clip(s, -1.0, 1.0))
    st = np.sin(theta)
    small = st < 1e-8
    safe = np.where(small, 1.0, st)
    val = order * np.sin(order * theta) / safe
    val = np.where(small & (theta < 1.0), order**2, val)
    val = np.where(small & (theta >= 1.0), order**2 * np.cos(order * np.pi + np.pi), val)
    return amp * val


def _chebyshev_cos_dd(s, amp, order, eps=1e-6):
    s = np.asarray(s, dtype=float)
    lo = np.clip(s - eps, 0.0, 1.0)
    hi = np.clip(s + eps, 0.0, 1.0)
    return (_chebyshev_cos_d(hi, amp, order) - _chebyshev_cos_d(lo, amp, order)) / (hi - lo)


class DelayedTimeMap:
    """``g(s) = s - tau(s)`` together with its inverse.

    ``tau_fn`` and ``dtau_fn`` are vectorised callables.  The inverse
    returns the last crossing of ``g`` with the requested level, which is
    the unique one on the increasing branch.
    """

    def __init__(self, tau_fn, dtau_fn, n_check=_CHECK_POINTS, tabulated=False):
        self.tau_fn = tau_fn
        self.dtau_fn = dtau_fn
        self._s = np.linspace(0.0, 1.0, n_check)
        self._g = self._s - tau_fn(self._s)
        self.g0 = float(self._g[0])
        self.g1 = float(self._g[-1])
        self.gbar = max(0.0, float(self._g.max()))
        gp = 1.0 - dtau_fn(self._s)
        self.gprime_max = float(np.abs(gp).max())
        self.gprime_min = float(np.abs(gp).min())
        self.tabulated = tabulated
        self._pchip = None
        if tabulated and self.g1 > 0:
            i0 = self._start_of_last_rise()
            if self._s.size - i0 >= 2:
                self._pchip = PchipInterpolator(self._g[i0:], self._s[i0:])

    def _start_of_last_rise(self):
        d = np.diff(self._g)
        bad = np.nonzero(d <= 0)[0]
        return 0 if bad.size == 0 else int(bad[-1]) + 1

    def __call__(self, s):
        return np.asarray(s) - self.tau_fn(s)

    def derivative(self, s):
        return 1.0 - self.dtau_fn(s)

    @property
    def p_star(self):
        """``g^{-1}(0)`` when ``g(1) > 0``, else ``None``."""
        return self.inverse(0.0) if self.g1 > 0 else None

    @property
    def inverse_lipschitz(self):
        """Max finite-difference slope of ``g^{-1}`` on ``[0, g(1)]``."""
        if self.g1 <= 0:
            return 0.0
        ys = np.linspace(0.0, self.g1, 401)
        qs = np.array([self.inverse(y) for y in ys])
        return float(np.max(np.abs(np.diff(qs)) / np.diff(ys)))

    def inverse(self, y, tol=TOL_INV):
        y = float(y)
        g, s = self._g, self._s
        span = 1e-12 * max(1.0, abs(self.g0), abs(self.g1))
        if y < self.g0 - span or y > self.g1 + span:
            raise OutOfRange(f"y={y} outside [g(0), g(1)] = [{self.g0}, {self.g1}]")
        if y >= self.g1:
            return 1.0
        if self._pchip is not None and y >= g[self._start_of_last_rise()]:
            return float(np.clip(self._pchip(y), 0.0, 1.0))
        below = np.nonzero(g <= y)[0]
        if below.size == 0:
            return 0.0
        j = int(below[-1])
        if j >= s.size - 1:
            return 1.0
        lo, hi = s[j], s[j + 1]
        f = lambda q: float(q - self.tau_fn(q)) - y  # noqa: E731
        flo, fhi = f(lo), f(hi)
        if flo == 0.0:
            return float(lo)
        if flo > 0 or fhi < 0:
            raise NonMonotone(f"cannot bracket g(q) = {y} on [{lo}, {hi}]")
        return float(brentq(f, lo, hi, xtol=tol * 1e-2, rtol=4 * np.finfo(float).eps))


@dataclass(frozen=True, eq=False)
class DelayFunction:
    family: str
    params: dict
    grid: np.ndarray
    samples: np.ndarray
    derivative: np.ndarray
    tau_bar: float
    dtau_bar: float
    region: str
    lipschitz: float
    lipschitz_delayed: float
    map: DelayedTimeMap = field(repr=False)
    _fn: object = field(repr=False)
    _dfn: object = field(repr=False)
    _ddfn: object = field(repr=False)

    def __call__(self, s):
        return self._fn(s)

    def deriv(self, s):
        return self._dfn(s)

    def second_deriv(self, s):
        return self._ddfn(s)

    @property
    def tau1(self):
        return float(self._fn(np.array([1.0]))[0])

    @property
    def tau_min(self):
        return float(self._fn(self.map._s).min())

    def delayed_region(self):
        """Sub-interval ``[p*, 1]`` where ``tau(s) <= s``, or ``None``."""
        p = self.map.p_star
        return None if p is None else (p, 1.0)

    def restricted_bounds(self):
        """``sup|tau'|``, ``sup|tau''|``, ``inf g'`` and ``sup g'`` on ``[p*, 1]``."""
        reg = self.delayed_region()
        if reg is None:
            return dict(dtau=0.0, ddtau=0.0, gp_min=1.0, gp_max=1.0)
        s = np.linspace(reg[0], 1.0, 801)
        d = self._dfn(s)
        return dict(
            dtau=float(np.abs(d).max()),
            ddtau=float(np.abs(self._ddfn(s)).max()),
            gp_min=float(np.abs(1.0 - d).min()),
            gp_max=float(np.abs(1.0 - d).max()),
        )

    def to_config(self):
        return {"family": self.family, "params": _jsonable(self.params), "n": int(self.grid.size - 1)}


def _jsonable(params):
    out = {}
    for k, v in params.items():
        out[k] = np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
    return out


def _family_functions(family, params):
    if family == "cosine-chebyshev":
        off = float(params.get("offset", 3.0))
        amp = float(params["amplitude"])
        order = float(params["order"])
        return (
            lambda s: off + _chebyshev_cos(np.asarray(s, float), amp, order),
            lambda s: _chebyshev_cos_d(np.asarray(s, float), amp, order),
            lambda s: _chebyshev_cos_dd(np.asarray(s, float), amp, order),
        )
    if family == "exponential":
        amp = float(params["amplitude"])
        rate = float(params["rate"])
        off = float(params.get("offset", 0.0))
        return (
            lambda s: off + amp * np.exp(rate * np.asarray(s, float)),
            lambda s: amp * rate * np.exp(rate * np.asarray(s, float)),
            lambda s: amp * rate**2 * np.exp(rate * np.asarray(s, float)),
        )
    if family == "constant":
        v = float(params["value"])
        return (
            lambda s: np.full(np.shape(s), v, dtype=float),
            lambda s: np.zeros(np.shape(s)),
            lambda s: np.zeros(np.shape(s)),
        )
    if family == "tabulated":
        vals = np.asarray(params["values"], dtype=float)
        sg = np.linspace(0.0, 1.0, vals.size)
        dv = np.gradient(vals, sg, edge_order=1)
        ddv = np.gradient(dv, sg, edge_order=1)
        return (
            lambda s: np.interp(s, sg, vals),
            lambda s: np.interp(s, sg, dv),
            lambda s: np.interp(s, sg, ddv),
        )
    raise ValueError(f"unknown delay family {family!r}; expected one of {FAMILIES}")


def classify_delay(tau):
    """Region tag: D1 iff ``tau(1) >= 1``."""
    t1 = tau.tau1 if isinstance(tau, DelayFunction) else float(tau)
    return D1 if t1 >= 1.0 else D2


def make_delay(family, params, grid=None, validate=True):
    """Build a validated :class:`DelayFunction`.

    ``grid`` is an array of nodes or a node count; defaults to 41 nodes.
    """
    if grid is None:
        grid = 41
    if np.isscalar(grid):
        if int(grid) < 2:
            raise ValueError("grid needs at least 2 points")
        grid = np.linspace(0.0, 1.0, int(grid))
    grid = np.asarray(grid, dtype=float)
    if grid.size < 2:
        raise ValueError("grid needs at least 2 points")
    fn, dfn, ddfn = _family_functions(family, params)
    check = np.linspace(0.0, 1.0, _CHECK_POINTS)
    tc, dc = fn(check), dfn(check)

    if validate:
        if np.any(tc <= 0):
            j = int(np.argmin(tc))
            raise NonPositiveDelay(f"tau({check[j]:.4f}) = {tc[j]:.4g} <= 0")
        delayed = tc < check
        if np.any(delayed & (np.abs(dc) >= 1.0)):
            j = int(np.nonzero(delayed & (np.abs(dc) >= 1.0))[0][0])
            raise SlopeViolation(f"|tau'({check[j]:.4f})| = {abs(dc[j]):.4g} >= 1 where tau < s")

    samples = fn(grid)
    deriv = dfn(grid)
    fd = np.abs(np.diff(tc)) / np.diff(check)
    delayed = tc <= check
    mask = delayed[:-1] | delayed[1:]
    lip_d = float(fd[mask].max()) if mask.any() else 0.0
    gmap = DelayedTimeMap(fn, dfn, tabulated=(family == "tabulated"))
    t1 = float(fn(np.array([1.0]))[0])
    return DelayFunction(
        family=family,
        params=dict(params),
        grid=grid,
        samples=samples,
        derivative=deriv,
        tau_bar=float(tc.max()),
        dtau_bar=float(np.abs(dc).max()),
        region=D1 if t1 >= 1.0 else D2,
        lipschitz=float(fd.max()),
        lipschitz_delayed=lip_d,
        map=gmap,
        _fn=fn,
        _dfn=dfn,
        _ddfn=ddfn,
    )


def delayed_time_inverse(gmap, y):
    """``g^{-1}(y)`` for a :class:`DelayedTimeMap` or :class:`DelayFunction`."""
    if isinstance(gmap, DelayFunction):
        gmap = gmap.map
    return gmap.inverse(y)


# plant coefficients ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Recirculation gain ``c(s)`` and integral coupling ``f(s, q)``.

    ``c_fn(s)`` and ``f_fn(s, q)`` are vectorised; samples live on ``grid``
    (and ``grid x grid`` for ``f``).
    """

    c_fn: object = field(repr=False)
    f_fn: object = field(repr=False)
    grid: np.ndarray = field(repr=False)
    c: np.ndarray = field(repr=False)
    f: np.ndarray = field(repr=False)
    c_bar: float = 0.0
    f_bar: float = 0.0
    lip_c: float = 0.0
    lip_f: float = 0.0
    spec: dict = field(default_factory=dict)

    def on_grid(self, grid):
        if np.isscalar(grid):
            grid = np.linspace(0.0, 1.0, int(grid))
        return make_coefficients(self.c_fn, self.f_fn, grid, spec=self.spec)


def make_coefficients(c_fn, f_fn, grid=41, spec=None):
    if np.isscalar(grid):
        grid = np.linspace(0.0, 1.0, int(grid))
    grid = np.asarray(grid, dtype=float)
    fine = np.linspace(0.0, 1.0, 401)
    cf = np.asarray(c_fn(fine), dtype=float)
    S, Q = np.meshgrid(fine, fine, indexing="ij")
    ff = np.asarray(f_fn(S, Q), dtype=float)
    h = fine[1] - fine[0]
    lip_c = float(np.max(np.abs(np.diff(cf))) / h)
    lip_f = float(np.max(np.abs(np.diff(ff, axis=0))) / h)
    Sg, Qg = np.meshgrid(grid, grid, indexing="ij")
    return CoefficientSet(
        c_fn=c_fn,
        f_fn=f_fn,
        grid=grid,
        c=np.asarray(c_fn(grid), dtype=float),
        f=np.asarray(f_fn(Sg, Qg), dtype=float),
        c_bar=float(np.abs(cf).max()),
        f_bar=float(np.abs(ff).max()),
        lip_c=lip_c,
        lip_f=lip_f,
        spec=dict(spec or {}),
    )


def standard_coefficients(c_gain=20.0, f_cos=5.0, f_sin=5.0, grid=41):
    """``c = c_gain (1 - s)``, ``f = f_cos cos(2 pi q) + f_sin sin(2 pi s)``.

    The defaults are the benchmark plant used throughout the demos.
    """

    def c_fn(s):
        return c_gain * (1.0 - np.asarray(s, float))

    def f_fn(s, q):
        return f_cos * np.cos(2 * np.pi * np.asarray(q, float)) + f_sin * np.sin(
            2 * np.pi * np.asarray(s, float)
        )

    spec = {"c_gain": c_gain, "f_cos": f_cos, "f_sin": f_sin}
    return make_coefficients(c_fn, f_fn, grid, spec=spec)


def zero_coefficients(grid=41):
    return standard_coefficients(0.0, 0.0, 0.0, grid)


def chebyshev_profile(s, amplitude, order, shift):
    """``amplitude * cos(order * arccos(s - shift))``."""
    return _chebyshev_cos(np.asarray(s, float) - shift, amplitude, order)


# scenario sampling ----------------------------------------------------------

DEFAULT_RANGES = {
    "A1": (0.5, 8.0),
    "G1": (0.0, 8.0),
    "kappa": (0.0, 0.5),
    "A2": (-1.0, 1.0),
    "G2": (0.0, 8.0),
    "A3": (0.4, 0.8),
    "G3": (0.8, 2.4),
}


@dataclass
class Scenario:
    tau: DelayFunction
    x0: np.ndarray
    x0_params: dict

    def __iter__(self):
        return iter((self.tau, self.x0))


class ScenarioSampler:
    """Seeded generator of ``(tau, x0)`` pairs.

    D1 delays are ``3 + A2 cos(G2 arccos s)``; D2 delays are
    ``A3 exp(-G3 s)``; initial states are ``A1 cos(G1 arccos(s - kappa))``.
    """

    def __init__(self, seed=0, n=41, ranges=None, max_retries=100):
        self.seed = seed
        self.n = n
        self.ranges = dict(DEFAULT_RANGES)
        if ranges:
            self.ranges.update(ranges)
        self.max_retries = max_retries
        self.rng = np.random.default_rng(seed)

    def _u(self, key):
        lo, hi = self.ranges[key]
        return float(self.rng.uniform(lo, hi))

    def sample_delay(self, region):
        for _ in range(self.max_retries):
            if region == D1:
                params = {"offset": 3.0, "amplitude": self._u("A2"), "order": self._u("G2")}
                family = "cosine-chebyshev"
            elif region == D2:
                params = {"amplitude": self._u("A3"), "rate": -self._u("G3")}
                family = "exponential"
            else:
                raise ValueError(f"unknown region {region!r}")
            try:
                tau = make_delay(family, params, self.n)
            except (NonPositiveDelay, SlopeViolation):
                continue
            if tau.region == region:
                return tau
        raise RetryExhausted(f"no valid {region} delay after {self.max_retries} draws")

    def sample_initial(self):
        for _ in range(self.max_retries):
            p = {"amplitude": self._u("A1"), "order": self._u("G1"), "shift": self._u("kappa")}
            x0 = chebyshev_profile(np.linspace(0.0, 1.0, self.n), **p)
            if np.all(np.isfinite(x0)):
                return x0, p
        raise RetryExhausted("no finite initial condition")

    def sample_scenario(self, region):
        tau = self.sample_delay(region)
        x0, p = self.sample_initial()
        return Scenario(tau, x0, p)


def sample_scenario(sampler, region):
    return sampler.sample_scenario(region)


# configuration --------------------------------------------------------------


def load_config(path_or_dict):
    """Read a scenario/coefficient JSON document.

    Keys: ``tau`` ({family, params}), ``coefficients`` ({c_gain, f_cos,
    f_sin}), ``grid`` ({ds, dr, dt}), ``x0`` ({amplitude, order, shift}),
    ``seed``.  Missing sections fall back to the benchmark setup.
    """
    if isinstance(path_or_dict, dict):
        cfg = dict(path_or_dict)
    else:
        with open(path_or_dict) as fh:
            cfg = json.load(fh)
    return cfg


def scenario_from_config(cfg):
    """Return ``(coeffs, tau, x0, grid_cfg)`` built from a config mapping."""
    grid_cfg = {"ds": 0.025, "dr": 0.025, "dt": None}
    grid_cfg.update(cfg.get("grid", {}))
    s = uniform_grid(grid_cfg["ds"])
    coeffs = standard_coefficients(grid=s, **cfg.get("coefficients", {}))
    tcfg = cfg.get("tau", {"family": "exponential", "params": {"amplitude": 0.5, "rate": -1.6}})
    tau = make_delay(tcfg["family"], tcfg["params"], s)
    xcfg = cfg.get("x0", {"amplitude": 5.0, "order": 4.0, "shift": 0.2})
    x0 = chebyshev_profile(s, **xcfg)
    if grid_cfg["dt"] is None:
        grid_cfg["dt"] = 0.02 if tau.region == D1 else 0.005
    return coeffs, tau, x0, grid_cfg
