"""Two-branch backstepping kernel on the triangle 0 <= s <= q <= 1.

Branch 1 (``q - s <= tau(1)``) solves

    K1 = Psi1(K1) - Xi1

and, for D2 delays, branch 2 (``q - s > tau(1)``) solves

    K2 = Psi1(K) - Xi1 - Xi2 + Psi21(K1) + Psi22(K2)

with ``sigma = s + 1 - q`` and

    Psi1(K)(s,q)   = int_s^sigma int_theta^{theta+q-s} K(theta,r) f(r, theta+q-s) dr dtheta
    Xi1(s,q)       = int_q^1 f(theta+s-q, theta) dtheta
    Psi21(K1)      = int_{g^-1(sigma)}^{psi} c(p) K1(sigma + tau(p), p) dp
    Psi22(K2)      = int_{psi}^1 c(p) K2(sigma + tau(p), p) dp
    psi            = g^-1(min(gbar, sigma + tau(1)))
    Xi2(sigma)     = c(g^-1(sigma)) / g'(g^-1(sigma))

Both are solved by successive approximation.  In the diagonal layout
``D[m, k] = K(k h, (k + m) h)`` every node of ``Psi1`` and ``Xi1`` falls on
the grid, so those terms are exact trapezoid sums.  The branch-2 ``c``
terms depend on ``sigma`` only and are read with piecewise-linear
interpolation restricted to the triangle.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .coefficients import D1, D2
from .errors import DegenerateSlope, GeometryError, NoConvergence, SingleBranch
from .quadrature import revcumtrapz, segment_points, trapz_weights, tri_interp_weights

log = logging.getLogger(__name__)

TOL_K = 1e-8
MAX_ITER = 200


@dataclass(frozen=True, eq=False)
class KernelGrid:
    h: float
    grid: np.ndarray
    K: np.ndarray  # K[i, j] = K(s_i, q_j), zero below the diagonal
    K1: np.ndarray  # branch-1 solution on the whole triangle
    branch: np.ndarray  # 1 or 2 on the triangle, 0 below the diagonal
    region: str
    tau1: float
    iterations: int
    residual: float
    residual_history: tuple = field(repr=False, default=())

    @property
    def n(self):
        return self.grid.size

    @property
    def valid(self):
        i, j = np.indices(self.K.shape)
        return j >= i

    @property
    def sup(self):
        return float(np.abs(self.K[self.valid]).max())

    def __call__(self, s, q):
        idx, w = tri_interp_weights(s, q, self.h, self.n)
        return np.sum(self.K.ravel()[idx] * w, axis=1)

    def to_csv(self, path):
        N = self.n - 1
        with open(path, "w") as fh:
            fh.write("s,q,branch,K\n")
            for i in range(N + 1):
                for j in range(i, N + 1):
                    fh.write(
                        f"{self.grid[i]:.17g},{self.grid[j]:.17g},{int(self.branch[i, j])},{self.K[i, j]:.17g}\n"
                    )

    def sidecar(self, kbar=None):
        return {
            "h": self.h,
            "n": int(self.n),
            "region": self.region,
            "tau1": self.tau1,
            "iterations": int(self.iterations),
            "residual": float(self.residual),
            "sup_K": self.sup,
            "K_bar": kbar,
        }

    def write(self, csv_path, json_path, kbar=None):
        self.to_csv(csv_path)
        with open(json_path, "w") as fh:
            json.dump(self.sidecar(kbar), fh, indent=2)


def _to_diag(K):
    n = K.shape[0]
    D = np.zeros_like(K)
    for m in range(n):
        k = np.arange(n - m)
        D[m, : n - m] = K[k, k + m]
    return D


def _to_square(D):
    n = D.shape[0]
    K = np.zeros_like(D)
    for m in range(n):
        k = np.arange(n - m)
        K[k, k + m] = D[m, : n - m]
    return K


def _psi1_operator(f, h):
    """Sparse map from ``K.ravel()`` to ``G[m, k]`` (diagonal layout).

    ``G_m(theta_k) = int_0^{m h} K(theta_k, theta_k + rho) f(theta_k + rho, theta_k + m h) d rho``
    """
    n = f.shape[0]
    rows, cols, vals = [], [], []
    for m in range(1, n):
        k = np.arange(n - m)
        l = np.arange(m + 1)
        w = np.full(m + 1, h)
        w[0] = w[-1] = 0.5 * h
        kk, ll = np.meshgrid(k, l, indexing="ij")
        rows.append((m * n + kk).ravel())
        cols.append((kk * n + kk + ll).ravel())
        vals.append((w[None, :] * f[kk + ll, kk + m]).ravel())
    if not rows:
        return sparse.csr_matrix((n * n, n * n))
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n)
    )


def _xi1(f, h):
    n = f.shape[0]
    F = np.zeros_like(f)
    for m in range(n):
        k = np.arange(n - m)
        F[m, : n - m] = f[k, k + m]
    return revcumtrapz(F, h)


def _branch2_terms(coeffs, tau, h, n, rows):
    """Quadrature plan for the ``sigma``-only branch-2 terms.

    Returns ``(xi2, plan1, plan2)``; each plan is ``(row, idx, w)`` so that
    the integral on diagonal ``row`` is ``sum(w * K.ravel()[idx])`` summed
    per row.  Plan 1 reads ``K1`` and plan 2 the composite kernel.
    """
    gmap = tau.map
    g1 = gmap.g1
    t1 = tau.tau1
    xi2 = np.zeros(n)
    parts = {1: ([], [], []), 2: ([], [], [])}
    for m in rows:
        sigma = 1.0 - m * h
        if sigma > g1:
            raise GeometryError(f"sigma={sigma} beyond g(1)={g1} on a branch-2 diagonal")
        a = gmap.inverse(max(sigma, gmap.g0))
        lev = min(g1, sigma + t1)
        psi = 1.0 if lev >= g1 else gmap.inverse(lev)
        xi2[m] = float(coeffs.c_fn(a)) / float(gmap.derivative(np.array([a]))[0])
        for which, (lo, hi) in ((1, (a, psi)), (2, (psi, 1.0))):
            if hi - lo <= 0:
                continue
            p = segment_points(lo, hi, h)
            w = trapz_weights(p) * coeffs.c_fn(p)
            sp = sigma + tau(p)
            dq = p - sp  # = g(p) - sigma >= 0
            if np.any(dq < -1e-8) or np.any(sp < -1e-8):
                raise GeometryError(f"kernel read outside the triangle on diagonal {m}")
            idx, wt = tri_interp_weights(np.clip(sp, 0, 1), p, h, n)
            r, i_, ww = parts[which]
            r.append(np.full(idx.shape, m))
            i_.append(idx)
            ww.append(wt * w[:, None])
    plans = []
    for which in (1, 2):
        r, i_, ww = parts[which]
        if r:
            plans.append((np.concatenate(r).ravel(), np.concatenate(i_).ravel(), np.concatenate(ww).ravel()))
        else:
            plans.append((np.zeros(0, int), np.zeros(0, int), np.zeros(0)))
    return xi2, plans[0], plans[1]


def _apply_plan(plan, Kflat, n):
    r, idx, w = plan
    return np.bincount(r, weights=w * Kflat[idx], minlength=n)


def _picard(step, D0, tol, max_iter, label):
    D = D0
    history = []
    damping = 1.0
    prev_update = None
    for it in range(1, max_iter + 1):
        new = step(D)
        upd = new - D
        res = float(np.abs(upd).max())
        history.append(res)
        if not np.isfinite(res):
            raise NoConvergence(f"{label}: non-finite iterate at iteration {it}")
        if (
            damping == 1.0
            and it > 3
            and prev_update is not None
            and res > history[-2]
            and float(np.sum(upd * prev_update)) < 0
        ):
            log.info("%s: residual oscillates at iteration %d, damping 0.5", label, it)
            damping = 0.5
        D = D + damping * upd
        prev_update = upd
        if res <= tol:
            return D, it, res, history
    raise NoConvergence(f"{label}: residual {history[-1]:.3e} > {tol:.1e} after {max_iter} iterations")


def solve_kernel(coeffs, tau, h=None, tol_K=TOL_K, max_iter=MAX_ITER, max_h=0.05):
    """Solve the kernel equations on the grid of ``coeffs``.

    ``h`` defaults to the spacing of ``coeffs.grid``; when given, the
    coefficients are resampled onto ``1/round(1/h)``.  Spacings above
    ``max_h`` are refused; only timing studies should raise it.
    """
    if h is not None:
        n = int(round(1.0 / h)) + 1
        if n != coeffs.grid.size:
            coeffs = coeffs.on_grid(n)
    n = coeffs.grid.size
    h = 1.0 / (n - 1)
    if h > max_h + 1e-12:
        raise ValueError(f"kernel grid spacing {h} exceeds {max_h}")
    f = coeffs.f
    G = _psi1_operator(f, h)
    xi1 = _xi1(f, h)

    def psi1(D):
        Gd = (G @ _to_square(D).ravel()).reshape(n, n)
        return revcumtrapz(Gd, h)

    def step1(D):
        return psi1(D) - xi1

    D1_, it1, res1, hist1 = _picard(step1, np.zeros((n, n)), tol_K, max_iter, "branch 1")
    K1 = _to_square(D1_)

    t1 = tau.tau1
    m_b = min(int(np.floor(t1 / h + 1e-9)), n - 1)
    diag = np.arange(n)
    i, j = np.indices((n, n))
    branch = np.where(j >= i, np.where(j - i <= m_b, 1, 2), 0)

    if tau.region == D1 or m_b >= n - 1:
        return KernelGrid(h, coeffs.grid, K1.copy(), K1, np.where(j >= i, 1, 0), tau.region, t1, it1, res1, tuple(hist1))

    rows2 = diag[diag > m_b]
    xi2, plan1, plan2 = _branch2_terms(coeffs, tau, h, n, rows2)
    H1 = _apply_plan(plan1, K1.ravel(), n)
    upper = (diag > m_b)[:, None]

    def step2(D):
        Kc = _to_square(D)
        h2 = H1 + _apply_plan(plan2, Kc.ravel(), n) - xi2
        new = psi1(D) - xi1 + h2[:, None]
        out = np.where(upper, new, D1_)
        return np.where(diag[None, :] <= (n - 1 - diag)[:, None], out, 0.0)

    D2_, it2, res2, hist2 = _picard(step2, D1_.copy(), tol_K, max_iter, "branch 2")
    K = _to_square(D2_)
    return KernelGrid(
        h, coeffs.grid, K, K1, branch, tau.region, t1, it1 + it2, max(res1, res2), tuple(hist1 + hist2)
    )


@dataclass(frozen=True)
class KernelBound:
    w: float
    W0: float
    K_bar: float


def kernel_bound(coeffs, tau, slopes="global"):
    """Analytic bound ``|K| <= (1/w) W0 exp(w (c_bar + f_bar))``.

    ``slopes="global"`` takes ``sup|tau'|`` and ``inf g'`` over ``[0, 1]``;
    ``"delayed"`` measures them on ``[p*, 1]`` only, the part of the delay
    the kernel equations read, which admits delays steeper than 1 where
    ``tau(s) > s``.
    """
    if slopes == "global":
        dtb, gmin = tau.dtau_bar, tau.map.gprime_min
    elif slopes == "delayed":
        rb = tau.restricted_bounds()
        dtb, gmin = rb["dtau"], rb["gp_min"]
    else:
        raise ValueError(f"slopes must be 'global' or 'delayed', got {slopes!r}")
    if dtb >= 1.0:
        raise DegenerateSlope(f"sup|tau'| = {dtb} >= 1")
    w = max(1.0, 1.0 / gmin)
    W0 = coeffs.c_bar / (1.0 - dtb) + coeffs.f_bar
    return KernelBound(w, W0, W0 / w * float(np.exp(w * (coeffs.c_bar + coeffs.f_bar))))


def branch_boundary_gap(kg):
    """Max ``|K|`` jump between grid neighbours across ``q - s = tau(1)``."""
    if kg.region == D1:
        raise SingleBranch("D1 kernel has no second branch")
    D = _to_diag(kg.K)
    n = kg.n
    m_b = int(np.floor(kg.tau1 / kg.h + 1e-9))
    if m_b + 1 > n - 1:
        raise SingleBranch("branch 2 has no grid nodes")
    k = np.arange(n - m_b - 1)
    return float(np.max(np.abs(D[m_b, k] - D[m_b + 1, k])))
