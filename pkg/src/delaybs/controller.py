"""Two-branch backstepping feedback and the forward transformation.

With ``qe(s) = g^{-1}(s)`` for ``s < gbar`` and ``qe(s) = 1`` otherwise,
both cases of the transformation collapse into one formula::

    z(s) = x(s) - int_s^1 K(s,q) x(q) dq
           - int_s^1 c(q) int_0^{min(tau(q), q-s)} K(s+p, q) u(q, p/tau(q)) dp dq
           + int_s^{qe(s)} c(q) u(q, (q-s)/tau(q)) dq

and the control is the boundary value ``x(0) = U`` that makes ``z(0) = 0``.  For D1 delays ``tau(q) >= q`` everywhere, so
``min(tau(q), q) = q`` and ``qe(0) = 1``; for D2 delays the upper limit
of the single integral is ``g^{-1}(0)``.

The transformation is linear in ``(x, u)``; a :class:`ControlLaw` stores
the quadrature weights once per ``(K, tau, c)`` and applies them.
"""

import time
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .coefficients import D2, make_delay
from .errors import GridMismatch, InsufficientSnapshots, RegionGeometry
from .kernel import solve_kernel
from .quadrature import linear_index, segment_points, trapz_weights, uniform_trapz_weights


def _row(i, s, K, tau_nodes, c_nodes, c_fn, tau, qe, h, dr, n, nr):
    """Weights of ``x(s_i) - z(s_i)`` on ``x`` (length n) and ``u.ravel()``."""
    N = n - 1
    wx = np.zeros(n)
    js = np.arange(i, n)
    wq = uniform_trapz_weights(js.size, h)
    wx[js] = wq * K[i, js]

    ui, uw = [], []
    # double integral
    for jj, j in enumerate(js):
        if wq[jj] == 0.0 or c_nodes[j] == 0.0:
            continue
        b = min(tau_nodes[j], s[j] - s[i])
        if b <= 0.0:
            continue
        p = segment_points(0.0, b, h)
        wp = trapz_weights(p)
        kpos = (s[i] + p) / h
        k0 = np.minimum(np.floor(kpos + 1e-9).astype(int), j - 1)
        k0 = np.maximum(k0, 0)
        fk = np.clip(kpos - k0, 0.0, 1.0)
        kv = (1 - fk) * K[k0, j] + fk * K[np.minimum(k0 + 1, j), j]
        r = np.clip(p / tau_nodes[j], 0.0, 1.0)
        l0, fr = linear_index(r, dr, nr)
        coef = wq[jj] * c_nodes[j] * wp * kv
        ui.append(j * nr + l0)
        uw.append(coef * (1 - fr))
        ui.append(j * nr + l0 + 1)
        uw.append(coef * fr)

    # single integral, enters x - z with a minus sign
    if qe > s[i]:
        p = segment_points(s[i], qe, h)
        wp = trapz_weights(p)
        tq = tau(p)
        r = np.clip((p - s[i]) / tq, 0.0, 1.0)
        cq = c_fn(p)
        j0, fs = linear_index(p, h, n)
        l0, fr = linear_index(r, dr, nr)
        coef = -wp * cq
        for dj, ws in ((0, 1 - fs), (1, fs)):
            for dl, wr in ((0, 1 - fr), (1, fr)):
                ui.append((j0 + dj) * nr + l0 + dl)
                uw.append(coef * ws * wr)
    if ui:
        ui = np.concatenate(ui)
        uw = np.concatenate(uw)
    else:
        ui = np.zeros(0, int)
        uw = np.zeros(0)
    return wx, ui, uw


class ControlLaw:
    """Exact feedback for one ``(K, tau, c)`` triple on a fixed grid.

    ``nr`` is the number of nodes in the delay-line variable ``r``.
    """

    def __init__(self, kernel, tau, coeffs, nr=None):
        self.kernel = kernel
        self.tau = tau
        self.coeffs = coeffs
        self.n = kernel.n
        self.nr = self.n if nr is None else int(nr)
        self.h = kernel.h
        self.dr = 1.0 / (self.nr - 1)
        self.s = kernel.grid
        self.region = tau.region
        if tau.region == D2:
            ps = tau.map.p_star
            if ps is None or not (0.0 <= ps <= 1.0):
                raise RegionGeometry("g^{-1}(0) unavailable for a D2 delay")
            self.g_inv0 = ps
        else:
            self.g_inv0 = None
        self.gbar = tau.map.gbar
        self._tau_nodes = tau(self.s)
        self._c_nodes = coeffs.c_fn(self.s)
        self.gain_x, self.gain_u = self._gains(0)
        self._Tx = None
        self._Tu = None

    def _qe(self, s):
        if self.region == D2 and s < self.gbar:
            return self.tau.map.inverse(s)
        return 1.0

    def _gains(self, i):
        wx, ui, uw = _row(
            i, self.s, self.kernel.K, self._tau_nodes, self._c_nodes, self.coeffs.c_fn,
            self.tau, self._qe(self.s[i]), self.h, self.dr, self.n, self.nr,
        )
        gu = np.bincount(ui, weights=uw, minlength=self.n * self.nr) if ui.size else np.zeros(self.n * self.nr)
        return wx, gu

    def _check(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape != (self.n,) or u.shape != (self.n, self.nr):
            raise GridMismatch(f"expected x{(self.n,)} and u{(self.n, self.nr)}, got {x.shape} and {u.shape}")
        return x, u

    def __call__(self, x, u):
        # x(0) is the control itself, so U = g0 U + rest is solved for U
        x, u = self._check(x, u)
        rest = self.gain_x[1:] @ x[1:] + self.gain_u @ u.ravel()
        return float(rest / (1.0 - self.gain_x[0]))

    def raw(self, x, u):
        """The quadrature with ``x(0)`` read from the data instead of solved for."""
        x, u = self._check(x, u)
        return float(self.gain_x @ x + self.gain_u @ u.ravel())

    def _build_transform(self):
        rows_x = np.zeros((self.n, self.n))
        ri, ci, vi = [], [], []
        for i in range(self.n):
            wx, ui, uw = _row(
                i, self.s, self.kernel.K, self._tau_nodes, self._c_nodes, self.coeffs.c_fn,
                self.tau, self._qe(self.s[i]), self.h, self.dr, self.n, self.nr,
            )
            rows_x[i] = wx
            ri.append(np.full(ui.size, i))
            ci.append(ui)
            vi.append(uw)
        self._Tx = rows_x
        self._Tu = sparse.csr_matrix(
            (np.concatenate(vi), (np.concatenate(ri), np.concatenate(ci))), shape=(self.n, self.n * self.nr)
        )

    def transform(self, x, u):
        x, u = self._check(x, u)
        if self._Tx is None:
            self._build_transform()
        return x - self._Tx @ x - self._Tu @ u.ravel()


def build_law(coeffs, tau, nr=None, **kernel_kw):
    """Solve the kernel and assemble the control law in one call."""
    kg = solve_kernel(coeffs, tau, **kernel_kw)
    return ControlLaw(kg, tau, coeffs, nr=nr)


def analytic_control(law, x, u):
    return law(x, u)


@dataclass
class TargetSnapshot:
    z: np.ndarray
    z0: float
    transport_residual: float


def forward_transform(law, x, u, x_prev=None, u_prev=None, dt=None, norm="weak"):
    """Target state ``z``; the residual needs the previous snapshot and ``dt``."""
    z = law.transform(x, u)
    res = 0.0
    if x_prev is not None:
        zp = law.transform(x_prev, u_prev)
        res = _residual_norm(_transport_residual(zp, z, dt, law.h), law.h, norm)
    return TargetSnapshot(z=z, z0=abs(float(z[0])), transport_residual=res)


def _transport_residual(z_prev, z_next, dt, h):
    return (z_next[1:] - z_prev[1:]) / dt + (z_prev[1:] - z_prev[:-1]) / h


def _residual_norm(r, h, norm):
    if norm == "l2":
        return float(np.sqrt(np.sum(r**2) * h))
    if norm == "sup":
        return float(np.max(np.abs(r)))
    if norm == "weak":
        # conservation form: sup_s |d/dt int_0^s z + z(s) - z(0)|
        return float(np.max(np.abs(np.cumsum(r) * h)))
    raise ValueError(f"unknown norm {norm!r}")


def target_residual(trace, law, t_min=0.0, norm="weak"):
    """Discrete residual of ``z_t + z_s = 0`` between consecutive snapshots.

    ``norm`` is ``"l2"`` or ``"sup"`` over interior nodes, or ``"weak"``:
    the sup over ``s`` of the residual integrated from 0 to ``s``, i.e.
    the flux balance on ``[0, s]``.  Closed-loop states carry transported
    jumps whenever ``x0(0) != U(0)``; pointwise residuals of a jump do not
    shrink under refinement, the weak one does.

    Returns ``(times, residual, z0)``; ``residual[k]`` belongs to the
    interval starting at ``times[k]`` and ``z0`` holds ``z(0)`` at every
    snapshot.
    """
    snaps = trace.snapshots
    if len(snaps) < 2:
        raise InsufficientSnapshots("need at least two snapshots")
    zs = [law.transform(sn.x, sn.u) for sn in snaps]
    times, res = [], []
    for k in range(len(snaps) - 1):
        t0, t1 = snaps[k].t, snaps[k + 1].t
        if t0 < t_min - 1e-12:
            continue
        r = _transport_residual(zs[k], zs[k + 1], t1 - t0, law.h)
        times.append(t0)
        res.append(_residual_norm(r, law.h, norm))
    z0 = np.array([z[0] for z in zs])
    return np.array(times), np.array(res), z0


class AnalyticController:
    """Controller callback ``(tau_samples, x, u) -> U`` backed by a :class:`ControlLaw`.

    With ``recompute=True`` the kernel and gains are rebuilt on every call
    (the operator evaluated from scratch); when the supplied delay samples
    differ from the nominal ones a tabulated delay is built from them.
    """

    def __init__(self, coeffs, tau, nr=None, recompute=False, **kernel_kw):
        self.coeffs = coeffs
        self.tau = tau
        self.nr = nr
        self.recompute = recompute
        self.kernel_kw = kernel_kw
        self.law = None if recompute else build_law(coeffs, tau, nr=nr, **kernel_kw)
        self.calls = 0
        self.seconds = 0.0

    def __call__(self, tau_samples, x, u):
        t0 = time.perf_counter()
        if self.recompute:
            tau = self.tau
            if tau_samples is not None and not np.array_equal(tau_samples, tau.samples):
                # measured samples may be noisy; only the kernel solve can reject them
                tau = make_delay("tabulated", {"values": np.asarray(tau_samples)}, tau.grid, validate=False)
            law = build_law(self.coeffs, tau, nr=self.nr, **self.kernel_kw)
        else:
            law = self.law
        out = law(x, u)
        self.seconds += time.perf_counter() - t0
        self.calls += 1
        return out


class ZeroController:
    def __call__(self, tau_samples, x, u):
        return 0.0
