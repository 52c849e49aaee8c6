"""Trapezoid rules with off-grid limits and interpolation helpers.

Every integral in the kernel solver, the controller and the target
transformation goes through these helpers, so that all of them share the
same discretisation (limits that fall between nodes get a partial cell).
"""

import numpy as np

_EPS = 1e-12


def segment_points(a, b, h):
    """Points ``a``, every grid node ``k*h`` strictly inside ``(a, b)``, ``b``."""
    if b < a:
        raise ValueError(f"empty segment [{a}, {b}]")
    k0 = int(np.floor(a / h + _EPS)) + 1
    k1 = int(np.ceil(b / h - _EPS)) - 1
    inner = np.arange(k0, k1 + 1) * h
    inner = inner[(inner > a + _EPS * h) & (inner < b - _EPS * h)]
    return np.concatenate(([a], inner, [b]))


def trapz_weights(points):
    """Weights of the composite trapezoid rule on a sorted point list."""
    points = np.asarray(points, dtype=float)
    w = np.zeros_like(points)
    if points.size < 2:
        return w
    dp = np.diff(points)
    w[:-1] += 0.5 * dp
    w[1:] += 0.5 * dp
    return w


def uniform_trapz_weights(n, h):
    """Trapezoid weights on ``n`` equally spaced nodes."""
    w = np.full(n, h, dtype=float)
    if n == 1:
        return np.zeros(1)
    w[0] = w[-1] = 0.5 * h
    return w


def revcumtrapz(rows, h):
    """Row-wise ``int_{x_k}^{end}`` by trapezoid, for rows padded with zeros.

    Row ``m`` of ``rows`` is valid on columns ``0..n-1-m`` (the diagonal
    layout used by the kernel solver); entries past that are ignored.
    """
    n = rows.shape[1]
    m = np.arange(rows.shape[0])[:, None]
    k = np.arange(n - 1)[None, :]
    cells = 0.5 * h * (rows[:, :-1] + rows[:, 1:])
    cells = np.where(k <= n - 2 - m, cells, 0.0)
    out = np.zeros_like(rows)
    out[:, :-1] = np.cumsum(cells[:, ::-1], axis=1)[:, ::-1]
    return out


def linear_index(x, h, n):
    """Left node index and fraction for linear interpolation on ``n`` nodes."""
    x = np.asarray(x, dtype=float)
    pos = np.clip(x / h, 0.0, n - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n - 2)
    return i0, pos - i0


def tri_interp_weights(s, q, h, n):
    """Piecewise-linear interpolation weights on the triangle 0<=s<=q<=1.

    The grid is the ``n x n`` node array ``K[i, j] = K(i*h, j*h)``.  Cells
    are split along lines of constant ``q - s`` and constant ``q`` so the
    triangle edges ``s = q`` and ``q = 1`` are element edges and no value
    outside the triangle is ever read.  Returns ``(flat_index, weight)``,
    each of shape ``(len(s), 3)``, indexing ``K.ravel()``.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    q = np.atleast_1d(np.asarray(q, dtype=float))
    N = n - 1
    kf = np.clip(s / h, 0.0, N)
    mf = np.clip((q - s) / h, 0.0, N)
    over = kf + mf - N
    mf = np.where(over > 0, mf - over, mf)  # clamp onto the hypotenuse

    m0 = np.minimum(np.floor(mf + 1e-9).astype(int), N)
    k0 = np.minimum(np.floor(kf + 1e-9).astype(int), N)
    m0 = np.clip(m0, 0, N)
    k0 = np.clip(k0, 0, N)
    fm = np.clip(mf - m0, 0.0, 1.0)
    fk = np.clip(kf - k0, 0.0, 1.0)

    def flat(mm, kk):
        return kk * n + (kk + mm)

    idx = np.zeros((s.size, 3), dtype=int)
    w = np.zeros((s.size, 3))

    on_hyp = m0 + k0 >= N
    interior = ~on_hyp
    lower = interior & ((fm + fk <= 1.0) | (m0 + k0 >= N - 1))
    upper = interior & ~lower

    # lower triangle (m0,k0), (m0+1,k0), (m0,k0+1)
    i = lower
    idx[i, 0] = flat(m0[i], k0[i])
    idx[i, 1] = flat(m0[i] + 1, k0[i])
    idx[i, 2] = flat(m0[i], k0[i] + 1)
    w[i, 0] = 1.0 - fm[i] - fk[i]
    w[i, 1] = fm[i]
    w[i, 2] = fk[i]

    # upper triangle (m0+1,k0+1), (m0,k0+1), (m0+1,k0)
    i = upper
    idx[i, 0] = flat(m0[i] + 1, k0[i] + 1)
    idx[i, 1] = flat(m0[i], k0[i] + 1)
    idx[i, 2] = flat(m0[i] + 1, k0[i])
    w[i, 0] = fm[i] + fk[i] - 1.0
    w[i, 1] = 1.0 - fm[i]
    w[i, 2] = 1.0 - fk[i]

    # on q = 1: linear along the edge between (m0, N-m0) and (m0+1, N-m0-1)
    i = on_hyp
    mh = np.minimum(mf[i], N)
    a = np.minimum(np.floor(mh).astype(int), N - 1)
    t = mh - a
    idx[i, 0] = flat(a, N - a)
    idx[i, 1] = flat(a + 1, N - a - 1)
    idx[i, 2] = flat(a, N - a)
    w[i, 0] = 1.0 - t
    w[i, 1] = t
    w[i, 2] = 0.0
    return idx, w
