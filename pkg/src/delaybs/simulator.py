"""Closed-loop simulation of the recirculating transport plant.

Two solvers share one configuration:

* :func:`simulate` advances the delay-free pair ``(x, u)``: ``x`` by
  explicit first-order upwind, ``u`` semi-Lagrangianly along
  ``tau(s) u_t = u_r`` (characteristics are exact, so the step is stable
  for any ``dt / tau``).
* :func:`simulate_delayed_reference` advances ``x`` alone and reads the
  recirculated value ``x(1, t - tau(s))`` from a history of the outlet.

Controllers are callables ``(tau_samples, x, u) -> U`` evaluated once per
step on the state at the start of the step.
"""

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .coefficients import make_delay
from .errors import CflViolation, GridMismatch, NonFinite
from .quadrature import linear_index

log = logging.getLogger(__name__)

BLOWUP = 1e8


@dataclass
class SimConfig:
    ds: float = 0.025
    dr: float = 0.025
    dt: float = 0.005
    T: float = 10.0
    controller: object = "analytic"  # "zero", "analytic" or a callable
    noise_sigma: float = 0.0
    noise_seed: int = 0
    snapshot_stride: int = 1  # the final step is always recorded
    raise_on_blowup: bool = False

    def __post_init__(self):
        if not (0 < self.ds <= 0.1 and 0 < self.dr <= 0.1):
            raise ValueError("ds and dr must lie in (0, 0.1]")
        if self.dt > self.ds * (1 + 1e-12):
            raise CflViolation(f"dt={self.dt} > ds={self.ds}")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")

    @property
    def n(self):
        return int(round(1.0 / self.ds)) + 1

    @property
    def nr(self):
        return int(round(1.0 / self.dr)) + 1

    @property
    def steps(self):
        return int(round(self.T / self.dt))

    def to_dict(self):
        d = asdict(self)
        if not isinstance(self.controller, str):
            d["controller"] = getattr(self.controller, "name", type(self.controller).__name__)
        return d


@dataclass
class PlantState:
    x: np.ndarray
    u: np.ndarray
    t: float


@dataclass
class Trace:
    t: np.ndarray
    U: np.ndarray
    x_l2: np.ndarray
    u_l2: np.ndarray
    controller_seconds: np.ndarray
    snapshots: list
    grid: np.ndarray
    r_grid: np.ndarray
    config: dict = field(default_factory=dict)
    diverged: bool = False
    shadow_U: np.ndarray = None

    @property
    def final(self):
        return self.snapshots[-1]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "U", "x_l2", "u_l2"])
            for row in zip(self.t, self.U, self.x_l2, self.u_l2):
                w.writerow([f"{v:.17g}" for v in row])

    def write_snapshots(self, x_path, u_path):
        with open(x_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "s", "x"])
            for sn in self.snapshots:
                for s, v in zip(self.grid, sn.x):
                    w.writerow([f"{sn.t:.17g}", f"{s:.17g}", f"{v:.17g}"])
        with open(u_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "s", "r", "u"])
            for sn in self.snapshots:
                for i, s in enumerate(self.grid):
                    for l, r in enumerate(self.r_grid):
                        w.writerow([f"{sn.t:.17g}", f"{s:.17g}", f"{r:.17g}", f"{sn.u[i, l]:.17g}"])

    def write_config(self, path):
        with open(path, "w") as fh:
            json.dump(self.config, fh, indent=2, sort_keys=True)


def l2(v, h):
    """Trapezoid L2 norm on a uniform grid (last axis for 1-D, both for 2-D)."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        sq = v**2
        return float(np.sqrt(h * (sq.sum() - 0.5 * (sq[0] + sq[-1]))))
    hs, hr = h
    sq = v**2
    ws = np.full(v.shape[0], hs)
    ws[[0, -1]] *= 0.5
    wr = np.full(v.shape[1], hr)
    wr[[0, -1]] *= 0.5
    return float(np.sqrt(ws @ sq @ wr))


def integral_matrix(f, h):
    """``(F x)_i = int_{s_i}^1 f(s_i, q) x(q) dq`` by the trapezoid rule."""
    n = f.shape[0]
    w = np.zeros((n, n))
    for i in range(n - 1):
        w[i, i:] = h
        w[i, i] = w[i, -1] = 0.5 * h
    return w * f


def _advance_x(x, rec_now, rec_next, F, lam, dt):
    """One upwind step of ``x_t + x_s = S``.

    The source is integrated along the characteristic with the trapezoid
    rule: its value at the foot (time ``t``, linear in ``s`` between the
    two upwind nodes) and at the node (time ``t + dt``, where only the
    recirculation part is updated).  ``x[0]`` is left to the controller.
    """
    fx = F @ x
    s_now = rec_now + fx
    s_next = rec_next + fx
    xn = x.copy()
    foot = (1 - lam) * s_now[1:] + lam * s_now[:-1]
    xn[1:] = x[1:] - lam * (x[1:] - x[:-1]) + 0.5 * dt * (foot + s_next[1:])
    return xn


def _resolve_controller(spec, coeffs, tau, nr):
    if callable(spec):
        return spec
    if spec == "zero":
        from .controller import ZeroController

        return ZeroController()
    if spec == "analytic":
        from .controller import AnalyticController

        return AnalyticController(coeffs, tau, nr=nr)
    raise ValueError(f"unknown controller {spec!r}")


def _prepare(coeffs, tau, x0, config):
    n, nr = config.n, config.nr
    s = np.linspace(0.0, 1.0, n)
    if coeffs.grid.size != n or not np.allclose(coeffs.grid, s):
        coeffs = coeffs.on_grid(s)
    if tau.grid.size != n or not np.allclose(tau.grid, s):
        tau = make_delay(tau.family, tau.params, s, validate=False)
    x0 = np.asarray(x0(s) if callable(x0) else x0, dtype=float)
    if x0.shape != (n,):
        raise GridMismatch(f"x0 has shape {x0.shape}, grid has {n} nodes")
    return coeffs, tau, x0, s, n, nr


class _NoisyDelay:
    """Supplies the delay samples handed to the controller."""

    def __init__(self, samples, sigma, seed):
        self.samples = samples
        self.sigma = sigma
        self.rng = np.random.default_rng(seed) if sigma > 0 else None

    def __call__(self):
        if self.rng is None:
            return self.samples
        return self.samples + self.rng.normal(0.0, self.sigma, self.samples.shape)


def simulate(coeffs, tau, x0, config, on_step=None, shadow=None):
    """Integrate the closed loop of the 2-D transport representation.

    ``on_step(n, t, tau_samples, x, u, U)`` is called with the state the
    controller saw.  ``shadow`` is a second controller evaluated on the
    same inputs whose output is recorded but never applied.
    """
    coeffs, tau, x0, s, n, nr = _prepare(coeffs, tau, x0, config)
    ctrl = _resolve_controller(config.controller, coeffs, tau, nr)
    h, dr, dt = s[1] - s[0], 1.0 / (nr - 1), config.dt
    r = np.linspace(0.0, 1.0, nr)
    tau_s = tau(s)
    c = coeffs.c
    F = integral_matrix(coeffs.f, h)
    lam = dt / h
    noisy = _NoisyDelay(tau_s, config.noise_sigma, config.noise_seed)

    # semi-Lagrangian departure points
    dep = r[None, :] + dt / tau_s[:, None]
    inside = dep <= 1.0
    l0, fr = linear_index(np.minimum(dep, 1.0), dr, nr)
    rows = np.repeat(np.arange(n)[:, None], nr, axis=1)
    # fraction of the step after which the characteristic left r = 1
    theta = np.where(inside, 0.0, 1.0 - (1.0 - r[None, :]) * tau_s[:, None] / dt)
    theta = np.clip(theta, 0.0, 1.0)

    x = x0.copy()
    u = np.zeros((n, nr))
    u[:, -1] = x[-1]
    steps = config.steps
    t_arr, U_arr, xl, ul, secs, shadow_U = [], [], [], [], [], []
    snaps = []
    diverged = False
    for k in range(steps + 1):
        t = k * dt
        ts = noisy()
        t0 = time.perf_counter()
        U = float(ctrl(ts, x, u))
        secs.append(time.perf_counter() - t0)
        if on_step is not None:
            on_step(k, t, ts, x, u, U)
        if shadow is not None:
            shadow_U.append(float(shadow(ts, x, u)))
        x[0] = U
        t_arr.append(t)
        U_arr.append(U)
        xl.append(l2(x, h))
        ul.append(l2(u, (h, dr)))
        if k % config.snapshot_stride == 0 or k == steps:
            snaps.append(PlantState(x.copy(), u.copy(), t))
        if not (np.isfinite(xl[-1]) and np.isfinite(ul[-1])) or xl[-1] > BLOWUP:
            diverged = True
            log.warning("blow-up at t=%.4g, trace truncated", t)
            if config.raise_on_blowup:
                raise NonFinite(f"state blew up at t={t}")
            break
        if k == steps:
            break
        un = u[rows, l0] * (1 - fr) + u[rows, l0 + 1] * fr
        xn = _advance_x(x, c * u[:, 0], c * un[:, 0], F, lam, dt)
        inflow = (1 - theta) * x[-1] + theta * xn[-1]
        un = np.where(inside, un, inflow)
        un[:, -1] = xn[-1]
        x, u = xn, un

    tr = Trace(
        t=np.array(t_arr),
        U=np.array(U_arr),
        x_l2=np.array(xl),
        u_l2=np.array(ul),
        controller_seconds=np.array(secs),
        snapshots=snaps,
        grid=s,
        r_grid=r,
        config=config.to_dict(),
        diverged=diverged,
        shadow_U=np.array(shadow_U) if shadow is not None else None,
    )
    return tr


class _History:
    """Outlet values ``x(1, t_k)`` on the step grid, zero before ``t = 0``."""

    def __init__(self, dt, steps):
        self.dt = dt
        self.buf = np.zeros(steps + 2)
        self.count = 0

    def push(self, v):
        self.buf[self.count] = v
        self.count += 1

    def __call__(self, tq):
        tq = np.asarray(tq, dtype=float)
        pos = tq / self.dt
        i0 = np.floor(pos).astype(int)
        fr = pos - i0
        i0c = np.clip(i0, 0, self.count - 1)
        i1c = np.clip(i0 + 1, 0, self.count - 1)
        v = (1 - fr) * self.buf[i0c] + fr * self.buf[i1c]
        return np.where(pos < 0.0, 0.0, v)


def simulate_delayed_reference(coeffs, tau, x0, config):
    """Integrate the delayed form with an outlet history buffer.

    The controller sees ``u(s, r, t) = x(1, t - tau(s) (1 - r))``
    reconstructed from the buffer, so both solvers can share controllers.
    """
    coeffs, tau, x0, s, n, nr = _prepare(coeffs, tau, x0, config)
    ctrl = _resolve_controller(config.controller, coeffs, tau, nr)
    h, dr, dt = s[1] - s[0], 1.0 / (nr - 1), config.dt
    r = np.linspace(0.0, 1.0, nr)
    tau_s = tau(s)
    c = coeffs.c
    F = integral_matrix(coeffs.f, h)
    lam = dt / h
    noisy = _NoisyDelay(tau_s, config.noise_sigma, config.noise_seed)
    lag = tau_s[:, None] * (1.0 - r[None, :])
    steps = config.steps
    hist = _History(dt, steps)

    x = x0.copy()
    t_arr, U_arr, xl, ul, secs, snaps = [], [], [], [], [], []
    diverged = False
    for k in range(steps + 1):
        t = k * dt
        hist.push(x[-1])
        u = hist(t - lag)
        u[:, -1] = x[-1]
        ts = noisy()
        t0 = time.perf_counter()
        U = float(ctrl(ts, x, u))
        secs.append(time.perf_counter() - t0)
        x[0] = U
        t_arr.append(t)
        U_arr.append(U)
        xl.append(l2(x, h))
        ul.append(l2(u, (h, dr)))
        if k % config.snapshot_stride == 0 or k == steps:
            snaps.append(PlantState(x.copy(), u.copy(), t))
        if not np.isfinite(xl[-1]) or xl[-1] > BLOWUP:
            diverged = True
            log.warning("blow-up at t=%.4g, trace truncated", t)
            if config.raise_on_blowup:
                raise NonFinite(f"state blew up at t={t}")
            break
        if k == steps:
            break
        # x(1, t + dt - tau) is in the buffer unless tau < dt
        u0_next = hist(np.minimum(t + dt - tau_s, t))
        x = _advance_x(x, c * u[:, 0], c * u0_next, F, lam, dt)
    return Trace(
        t=np.array(t_arr),
        U=np.array(U_arr),
        x_l2=np.array(xl),
        u_l2=np.array(ul),
        controller_seconds=np.array(secs),
        snapshots=snaps,
        grid=s,
        r_grid=r,
        config=config.to_dict(),
        diverged=diverged,
    )
