"""Hot numeric kernels.

Each kernel has a plain-numpy implementation (``*_np``) and, when numba is
active, a jit-compiled sibling. The unsuffixed public names point at the
flavor selected by ``NESTED_EIG_BACKEND`` (see :mod:`nested_eig.backend`).
Kernels are pure array functions: no Python objects, no RNG, no I/O.
"""

import numpy as np

from .backend import USE_NUMBA, jit

__all__ = [
    "logmeanexp",
    "pk_forward_one",
    "solve_lower_rows",
    "residual_quads",
    "ex1_forward_batch",
    "pk_forward_batch",
    "pk_jacobian",
]


# ---------------------------------------------------------------------------
# numpy flavor
# ---------------------------------------------------------------------------

def logmeanexp_np(x):
    """log(mean(exp(x))) for a 1-D array, stable under large negative values.

    Returns -inf when every entry is -inf (an all-dead batch of weights).
    """
    m = np.max(x)
    if not np.isfinite(m):
        if m == -np.inf:
            return -np.inf
        return m  # propagate +inf / nan
    return m + np.log(np.mean(np.exp(x - m)))


def solve_lower_rows_np(L, X):
    """Solve L w = x for each row x of X; returns the stacked rows w."""
    # L is lower triangular (d, d), X is (m, d).
    import scipy.linalg

    return scipy.linalg.solve_triangular(L, X.T, lower=True).T


def residual_quads_np(WG, wsum, wss, n_e):
    """Sum of squared whitened residuals per candidate model output.

    For whitened outputs ``wg`` (rows of WG), whitened-data column sum
    ``wsum`` and total squared norm ``wss`` over the n_e observations,
    each quadratic is ``wss - 2 wg.wsum + n_e |wg|^2``.
    """
    return wss - 2.0 * WG @ wsum + n_e * np.einsum("ij,ij->i", WG, WG)


def ex1_forward_batch_np(xi, TH, PH):
    """Batched linear two-channel map (xi*theta, (1-xi)*phi)."""
    m = TH.shape[0]
    out = np.empty((m, 2))
    out[:, 0] = xi * TH[:, 0]
    out[:, 1] = (1.0 - xi) * PH[:, 0]
    return out


def pk_forward_batch_np(xis, TH, PH, dose):
    """Batched one-compartment concentration curve at sampling times xis.

    TH columns are (absorption rate, elimination rate); PH holds the
    volume of distribution.
    """
    th1 = TH[:, 0:1]
    th2 = TH[:, 1:2]
    vol = PH[:, 0:1]
    amp = (dose / vol) * th1 / (th1 - th2)
    return amp * (np.exp(-np.outer(TH[:, 1], xis)) - np.exp(-np.outer(TH[:, 0], xis)))


def pk_forward_one_np(xis, th1, th2, vol, dose):
    """Concentration curve at one parameter point."""
    amp = (dose / vol) * th1 / (th1 - th2)
    return amp * (np.exp(-th2 * xis) - np.exp(-th1 * xis))


def pk_jacobian_np(xis, th1, th2, vol, dose):
    """Jacobian of the concentration curve wrt (th1, th2, vol) at one point."""
    d = th1 - th2
    e1 = np.exp(-th1 * xis)
    e2 = np.exp(-th2 * xis)
    diff = e2 - e1
    pref = dose / vol
    out = np.empty((xis.shape[0], 3))
    out[:, 0] = pref * (-th2 * diff / d**2 + th1 * xis * e1 / d)
    out[:, 1] = pref * (th1 * diff / d**2 - th1 * xis * e2 / d)
    out[:, 2] = -(pref / vol) * th1 / d * diff
    return out


# ---------------------------------------------------------------------------
# numba flavor (loop style; compiled only when the backend is active)
# ---------------------------------------------------------------------------

def _logmeanexp_loops(x):
    n = x.shape[0]
    m = -np.inf
    for i in range(n):
        if x[i] > m:
            m = x[i]
    if m == -np.inf or not np.isfinite(m):
        return m
    acc = 0.0
    for i in range(n):
        acc += np.exp(x[i] - m)
    return m + np.log(acc / n)


def _solve_lower_rows_loops(L, X):
    m, d = X.shape
    W = np.empty((m, d))
    for i in range(m):
        for j in range(d):
            acc = X[i, j]
            for k in range(j):
                acc -= L[j, k] * W[i, k]
            W[i, j] = acc / L[j, j]
    return W


def _residual_quads_loops(WG, wsum, wss, n_e):
    m, d = WG.shape
    out = np.empty(m)
    for i in range(m):
        dot = 0.0
        nrm = 0.0
        for j in range(d):
            dot += WG[i, j] * wsum[j]
            nrm += WG[i, j] * WG[i, j]
        out[i] = wss - 2.0 * dot + n_e * nrm
    return out


def _ex1_forward_batch_loops(xi, TH, PH):
    m = TH.shape[0]
    out = np.empty((m, 2))
    for i in range(m):
        out[i, 0] = xi * TH[i, 0]
        out[i, 1] = (1.0 - xi) * PH[i, 0]
    return out


def _pk_forward_batch_loops(xis, TH, PH, dose):
    m = TH.shape[0]
    d = xis.shape[0]
    out = np.empty((m, d))
    for i in range(m):
        th1 = TH[i, 0]
        th2 = TH[i, 1]
        amp = (dose / PH[i, 0]) * th1 / (th1 - th2)
        for j in range(d):
            out[i, j] = amp * (np.exp(-th2 * xis[j]) - np.exp(-th1 * xis[j]))
    return out


def _pk_forward_one_loops(xis, th1, th2, vol, dose):
    d = xis.shape[0]
    out = np.empty(d)
    amp = (dose / vol) * th1 / (th1 - th2)
    for j in range(d):
        out[j] = amp * (np.exp(-th2 * xis[j]) - np.exp(-th1 * xis[j]))
    return out


def _pk_jacobian_loops(xis, th1, th2, vol, dose):
    d = th1 - th2
    n = xis.shape[0]
    pref = dose / vol
    out = np.empty((n, 3))
    for j in range(n):
        e1 = np.exp(-th1 * xis[j])
        e2 = np.exp(-th2 * xis[j])
        diff = e2 - e1
        out[j, 0] = pref * (-th2 * diff / d**2 + th1 * xis[j] * e1 / d)
        out[j, 1] = pref * (th1 * diff / d**2 - th1 * xis[j] * e2 / d)
        out[j, 2] = -(pref / vol) * th1 / d * diff
    return out


logmeanexp_nb = jit(_logmeanexp_loops)
pk_forward_one_nb = jit(_pk_forward_one_loops)
solve_lower_rows_nb = jit(_solve_lower_rows_loops)
residual_quads_nb = jit(_residual_quads_loops)
ex1_forward_batch_nb = jit(_ex1_forward_batch_loops)
pk_forward_batch_nb = jit(_pk_forward_batch_loops)
pk_jacobian_nb = jit(_pk_jacobian_loops)

if USE_NUMBA:
    pk_forward_one = pk_forward_one_nb
    logmeanexp = logmeanexp_nb
    solve_lower_rows = solve_lower_rows_nb
    residual_quads = residual_quads_nb
    ex1_forward_batch = ex1_forward_batch_nb
    pk_forward_batch = pk_forward_batch_nb
    pk_jacobian = pk_jacobian_nb
else:
    pk_forward_one = pk_forward_one_np
    logmeanexp = logmeanexp_np
    solve_lower_rows = solve_lower_rows_np
    residual_quads = residual_quads_np
    ex1_forward_batch = ex1_forward_batch_np
    pk_forward_batch = pk_forward_batch_np
    pk_jacobian = pk_jacobian_np
