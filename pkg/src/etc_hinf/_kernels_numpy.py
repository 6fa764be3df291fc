"""Hot fixed-point loops, pure-numpy reference implementations.

Every function here is written in the numba-compatible subset of numpy so
that :mod:`etc_hinf._kernels_numba` can compile the exact same source with
``@njit``.  Status codes: 0 converged, 1 infeasible (gamma^2 I - P lost
positive definiteness), 2 max_iter reached.
"""

import numpy as np

# scale-aware positive definiteness: min eig > PD_TOL_COEFF * max(1, ||X||_F)
PD_TOL_COEFF = 1e-10


def _fro(x):
    return np.sqrt(np.sum(x * x))


def pbar_loop(a, b, q, r, gamma2, tol_fix, max_iter):
    """Iterate P <- F_c(F_a(P)) from P=0 for the gamma-game Riccati equation."""
    n = a.shape[0]
    eye = np.eye(n)
    p = np.zeros((n, n))
    it = 0
    while it < max_iter:
        gap = gamma2 * eye - p
        evals = np.linalg.eigvalsh(gap)
        if evals[0] <= PD_TOL_COEFF * max(1.0, _fro(gap)):
            return 1, p, it
        s = p + p @ np.linalg.solve(gap, p)
        s = 0.5 * (s + s.T)
        bsb = r + b.T @ s @ b
        sba = b.T @ s @ a
        p_next = a.T @ s @ a + q - sba.T @ np.linalg.solve(bsb, sba)
        p_next = 0.5 * (p_next + p_next.T)
        step = _fro(p_next - p)
        denom = max(1.0, _fro(p))
        p = p_next
        it += 1
        if step <= tol_fix * denom:
            return 0, p, it
    return 2, p, it


def plq_loop(a, b, q, r, tol_fix, max_iter):
    """Value iteration P <- F_c(P) from P=0 (standard LQR Riccati fixed point)."""
    n = a.shape[0]
    p = np.zeros((n, n))
    it = 0
    while it < max_iter:
        bsb = r + b.T @ p @ b
        sba = b.T @ p @ a
        p_next = a.T @ p @ a + q - sba.T @ np.linalg.solve(bsb, sba)
        p_next = 0.5 * (p_next + p_next.T)
        step = _fro(p_next - p)
        denom = max(1.0, _fro(p))
        p = p_next
        it += 1
        if step <= tol_fix * denom:
            return 0, p, it
    return 2, p, it


def m_ladder_loop(a, q, gamma2, pbar, h_max):
    """Open-loop ladder M_{k+1} = F_o(F_a(M_k)) with M_1 = pbar.

    Fills ``out[k]`` with M_{k+1} for k in 0..count-1.  Stops early (count <
    h_max+1) when gamma^2 I - M_k is not positive definite, which blocks the
    next F_a application; the offending M_k is still stored.
    """
    n = a.shape[0]
    eye = np.eye(n)
    out = np.zeros((h_max + 1, n, n))
    out[0] = pbar
    m = pbar.copy()
    count = 1
    for _ in range(h_max):
        gap = gamma2 * eye - m
        evals = np.linalg.eigvalsh(gap)
        if evals[0] <= PD_TOL_COEFF * max(1.0, _fro(gap)):
            return count, out
        fa = m + m @ np.linalg.solve(gap, m)
        fa = 0.5 * (fa + fa.T)
        m = a.T @ fa @ a + q
        m = 0.5 * (m + m.T)
        out[count] = m
        count += 1
    return count, out
