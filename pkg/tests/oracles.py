"""Independent reference implementations used as test oracles.

These deliberately avoid the package's own helpers: loops, brute force and
grid search instead of closed forms.
"""

from __future__ import annotations

import numpy as np


def rtn_reference(w, bits):
    """Plain-Python RTN per the textbook formulas."""
    w = [float(v) for v in w]
    qmax = 2**bits - 1
    lo, hi = min(w), max(w)
    if hi == lo:
        return [0] * len(w), 0.0, lo
    s = (hi - lo) / qmax
    z = round(-lo / s)
    q = [min(max(round(v / s + z), 0), qmax) for v in w]
    return q, s, -s * z


def grid_affine_fit(q: np.ndarray, w: np.ndarray, alpha: np.ndarray, iters: int = 60, n: int = 11):
    """Zoomed grid search for argmin_{s,m} sum alpha (s q + m - w)^2.

    Vectorized over leading axes.  The offset is searched as ``c = m + s*qc``
    with ``qc`` the unweighted code midpoint, which keeps the search box
    roughly axis-aligned.  Returns (s, m, error) with the error evaluated from
    residuals at the final grid point.
    """
    q = q.astype(np.float64)
    lead = q.shape[:-1]
    qc = 0.5 * (q.max(axis=-1) + q.min(axis=-1))
    span_w = np.maximum(w.max(axis=-1) - w.min(axis=-1), 1e-300)
    span_q = np.maximum(q.max(axis=-1) - q.min(axis=-1), 1.0)
    s0 = np.zeros(lead)
    c0 = 0.5 * (w.max(axis=-1) + w.min(axis=-1))
    hs = 4.0 * span_w / span_q
    hc = 2.0 * span_w
    # moments of the quadratic, used only to rank grid points
    A = alpha.sum(-1)
    dq = q - qc[..., None]
    Sqq = (alpha * dq * dq).sum(-1)
    Sq = (alpha * dq).sum(-1)
    Sqw = (alpha * dq * w).sum(-1)
    Sw = (alpha * w).sum(-1)
    t = np.linspace(-1.0, 1.0, n)
    for _ in range(iters):
        S = s0[..., None, None] + hs[..., None, None] * t[:, None]
        C = c0[..., None, None] + hc[..., None, None] * t[None, :]
        E = (S * S * Sqq[..., None, None] + 2 * S * C * Sq[..., None, None] + C * C * A[..., None, None]
             - 2 * S * Sqw[..., None, None] - 2 * C * Sw[..., None, None])
        flat = E.reshape(*lead, n * n).argmin(-1)
        i, j = np.divmod(flat, n)
        s0 = s0 + hs * t[i]
        c0 = c0 + hc * t[j]
        step = 2.0 / (n - 1)
        hs = hs * 2 * step
        hc = hc * 2 * step
    m = c0 - s0 * qc
    r = s0[..., None] * q + m[..., None] - w
    return s0, m, (alpha * r * r).sum(-1)


def brute_kquant(w: np.ndarray, bits: int, factors: np.ndarray, rel_tie: float = 1e-9):
    """Every candidate scale, grid-search refit, best by error.

    Candidates whose errors agree within ``rel_tie`` are treated as tied; ties go
    to the factor nearest 1.0, then the smaller factor.  Returns
    (chosen factor per row, error per row, all candidate errors).
    """
    w = np.asarray(w, dtype=np.float64)
    b = w.shape[1]
    qmax = 2**bits - 1
    alpha = np.sqrt((w**2).sum(1, keepdims=True) / b) + np.abs(w)
    lo = w.min(1)
    s_rtn = (w.max(1) - lo) / qmax
    errs = np.empty((len(factors), w.shape[0]))
    for k, f in enumerate(factors):
        s = s_rtn * f
        z = np.rint(-lo / s)
        q = np.clip(np.rint(w / s[:, None] + z[:, None]), 0, qmax)
        _, _, errs[k] = grid_affine_fit(q, w, alpha)
    best = errs.min(0)
    chosen = np.empty(w.shape[0])
    for r in range(w.shape[0]):
        tied = [k for k in range(len(factors)) if errs[k, r] <= best[r] * (1 + rel_tie) + 1e-300]
        k = min(tied, key=lambda k: (abs(factors[k] - 1.0), factors[k]))
        chosen[r] = factors[k]
    return chosen, errs[[list(factors).index(c) for c in chosen], range(w.shape[0])], errs


def edit_distance_recursive(ref: tuple, hyp: tuple) -> int:
    """Unmemoized recursion; fine for lengths up to ~6."""
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min(
        edit_distance_recursive(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
        edit_distance_recursive(ref[1:], hyp) + 1,
        edit_distance_recursive(ref, hyp[1:]) + 1,
    )


def naive_matmul(x, w):
    n, k = len(x), len(w)
    m = len(w[0])
    return [[sum(x[i][t] * w[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def lstm_step_reference(x, h, c, w_ih, w_hh, b):
    """Single LSTM cell step, gate order (i, f, g, o), written element by element."""
    d = len(h)
    gates = [b[j] + sum(x[i] * w_ih[i][j] for i in range(len(x))) + sum(h[i] * w_hh[i][j] for i in range(d))
             for j in range(4 * d)]
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))  # noqa: E731
    c_new = [sig(gates[d + j]) * c[j] + sig(gates[j]) * np.tanh(gates[2 * d + j]) for j in range(d)]
    h_new = [sig(gates[3 * d + j]) * np.tanh(c_new[j]) for j in range(d)]
    return np.array(h_new), np.array(c_new)
