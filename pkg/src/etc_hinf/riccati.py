"""Riccati operators, fixed points, attenuation ladders, gains, and
eigen-directions for the discrete-time H-infinity game.

Conventions used throughout:

* the plant is ``x+ = A x + B u + w`` with stage cost ``x'Qx + u'Ru``;
* ``F_a(P) = P + P (g^2 I - P)^{-1} P`` (disturbance maximization),
  ``F_c(P) = A'PA + Q - A'PB (B'PB + R)^{-1} B'PA`` (control minimization),
  ``F_o(P) = A'PA + Q`` (open loop, no control);
* ``pbar`` is the fixed point of ``P = F_c(F_a(P))`` reached from ``P = 0``;
* the ladder ``M_1 = pbar``, ``M_{k+1} = F_o(F_a(M_k))`` defines the
  attenuation boundary for period-h sampling: ``gamma_h`` is the infimum of
  gammas with ``g^2 I - M_h > 0``.  Python lists index the ladder from 0,
  so ``ladder[k]`` holds ``M_{k+1}``.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import backend
from .errors import (
    AssumptionFourViolated,
    AssumptionOneViolated,
    GammaInfeasible,
    NotBracketed,
    NotConverged,
    NumericalFailure,
    ZetaNotReached,
)

DEFAULT_TOL_FIXPOINT = 1e-12
DEFAULT_MAX_ITER = 100_000
DEFAULT_TOL_GAMMA = 1e-6
DEFAULT_GAMMA_CAP = 1e6
PD_TOL_COEFF = 1e-10  # scale-aware: min eig > coeff * max(1, ||X||_F)


def sym(x):
    """Symmetrize to suppress floating-point asymmetry drift."""
    return 0.5 * (x + x.T)


def min_eig(x):
    """Smallest eigenvalue of the symmetric part of ``x``."""
    return float(np.linalg.eigvalsh(sym(x))[0])


def is_pd(x):
    """Scale-aware positive definiteness test."""
    return min_eig(x) > PD_TOL_COEFF * max(1.0, float(np.linalg.norm(x, "fro")))


def _as_matrix(value, rows, cols, name):
    m = np.asarray(value, dtype=float)
    if m.shape != (rows, cols):
        raise AssumptionOneViolated(
            "%s must have shape (%d, %d), got %s" % (name, rows, cols, m.shape)
        )
    return np.ascontiguousarray(m)


@dataclass(frozen=True)
class SystemModel:
    """Plant data (A, B, Q, R) with assumption-1 certificates.

    The disturbance enters with identity gain, so its dimension equals the
    state dimension.  ``Q`` plays the role of C2'C2 and ``R`` of D21'D21
    with the cross term zero.
    """

    a: np.ndarray
    b: np.ndarray
    q: np.ndarray
    r: np.ndarray

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def m(self):
        return self.b.shape[1]

    @staticmethod
    def from_matrices(a, b, q, r, check=True, rank_tol=1e-9):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        n = a.shape[0]
        b = np.asarray(b, dtype=float)
        if b.ndim == 1:
            b = b.reshape(n, -1)
        m = b.shape[1]
        a = _as_matrix(a, n, n, "A")
        b = _as_matrix(b, n, m, "B")
        q = _as_matrix(q, n, n, "Q")
        r = _as_matrix(r, m, m, "R")
        sysm = SystemModel(a=a, b=b, q=q, r=r)
        if check:
            sysm.validate(rank_tol=rank_tol)
        return sysm

    def validate(self, rank_tol=1e-9):
        """Raise AssumptionOneViolated unless Q >= 0, R > 0, (A,B)
        controllable and (A, C2) observable."""
        if np.linalg.norm(self.q - self.q.T) > 1e-12 * max(1.0, np.linalg.norm(self.q)):
            raise AssumptionOneViolated("Q must be symmetric")
        if np.linalg.norm(self.r - self.r.T) > 1e-12 * max(1.0, np.linalg.norm(self.r)):
            raise AssumptionOneViolated("R must be symmetric")
        if min_eig(self.q) < -1e-9 * max(1.0, np.linalg.norm(self.q, "fro")):
            raise AssumptionOneViolated("Q must be positive semidefinite")
        if min_eig(self.r) <= PD_TOL_COEFF * max(1.0, np.linalg.norm(self.r, "fro")):
            raise AssumptionOneViolated("R must be positive definite")
        ctrb = np.hstack(
            [np.linalg.matrix_power(self.a, i) @ self.b for i in range(self.n)]
        )
        if np.linalg.matrix_rank(ctrb, tol=rank_tol) < self.n:
            raise AssumptionOneViolated("(A, B) is not controllable")
        # factor Q = C2'C2 through its eigendecomposition for the observability test
        evals, evecs = np.linalg.eigh(sym(self.q))
        keep = evals > max(rank_tol, 0.0)
        c2 = (np.sqrt(evals[keep])[:, None] * evecs[:, keep].T)
        if c2.size == 0:
            raise AssumptionOneViolated("(A, C2) is not observable (Q = 0)")
        obsv = np.vstack([c2 @ np.linalg.matrix_power(self.a, i) for i in range(self.n)])
        if np.linalg.matrix_rank(obsv, tol=rank_tol) < self.n:
            raise AssumptionOneViolated("(A, C2) is not observable")


def f_a(p, gamma):
    """Disturbance-maximization map ``P + P (g^2 I - P)^{-1} P``."""
    p = sym(np.asarray(p, dtype=float))
    n = p.shape[0]
    gap = gamma * gamma * np.eye(n) - p
    if not is_pd(gap):
        raise GammaInfeasible(
            "gamma^2 I - P is not positive definite (min eig %.3e)" % min_eig(gap)
        )
    return sym(p + p @ np.linalg.solve(gap, p))


def f_c(sysm, p):
    """Control-minimization Riccati map ``A'PA + Q - A'PB (B'PB+R)^{-1} B'PA``."""
    p = sym(np.asarray(p, dtype=float))
    bsb = sysm.r + sysm.b.T @ p @ sysm.b
    sba = sysm.b.T @ p @ sysm.a
    try:
        correction = sba.T @ np.linalg.solve(bsb, sba)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("B'PB + R solve failed: %s" % exc) from exc
    return sym(sysm.a.T @ p @ sysm.a + sysm.q - correction)


def f_o(sysm, p):
    """Open-loop propagation ``A'PA + Q``."""
    p = sym(np.asarray(p, dtype=float))
    return sym(sysm.a.T @ p @ sysm.a + sysm.q)


@dataclass(frozen=True)
class RiccatiSolveResult:
    feasible: bool
    pbar: Optional[np.ndarray]
    iterations: int


def solve_pbar(sysm, gamma, tol_fixpoint=DEFAULT_TOL_FIXPOINT, max_iter=DEFAULT_MAX_ITER):
    """Fixed point of ``P = F_c(F_a(P))`` from ``P = 0``.

    Returns a feasible result when the monotone iteration converges with
    ``gamma^2 I - P`` staying positive definite, an infeasible result when
    some iterate breaks that condition (no policy attains this gamma), and
    raises NotConverged if max_iter runs out first.
    """
    if gamma <= 0.0:
        return RiccatiSolveResult(False, None, 0)
    code, p, iters = backend.kernels().pbar_loop(
        sysm.a, sysm.b, sysm.q, sysm.r, float(gamma) ** 2,
        float(tol_fixpoint), int(max_iter),
    )
    if code == 0:
        return RiccatiSolveResult(True, p, iters)
    if code == 1:
        return RiccatiSolveResult(False, None, iters)
    raise NotConverged(
        "pbar iteration at gamma=%.9g stopped after %d iterations" % (gamma, iters)
    )


def solve_plq(sysm, tol=DEFAULT_TOL_FIXPOINT, max_iter=DEFAULT_MAX_ITER):
    """Standard LQR Riccati fixed point (the gamma -> infinity limit of pbar)."""
    code, p, iters = backend.kernels().plq_loop(
        sysm.a, sysm.b, sysm.q, sysm.r, float(tol), int(max_iter)
    )
    if code != 0:
        raise NotConverged("LQ Riccati iteration stopped after %d iterations" % iters)
    return p


def synth_gains(sysm, gamma, pbar):
    """State-feedback gain and worst-disturbance map for a feasible gamma.

    Returns ``(K, L)`` with ``u = K x`` and the disturbance maximizer
    ``w = L (A x + B u)`` where ``L = (g^2 I - pbar)^{-1} pbar``.
    """
    fa = f_a(pbar, gamma)  # raises GammaInfeasible at the boundary
    bsb = sysm.r + sysm.b.T @ fa @ sysm.b
    k = -np.linalg.solve(bsb, sysm.b.T @ fa @ sysm.a)
    gap = gamma * gamma * np.eye(sysm.n) - sym(pbar)
    l = np.linalg.solve(gap, sym(pbar))
    return k, l


@dataclass(frozen=True)
class LadderResult:
    """Prefix of the M-ladder.  ``ms[k]`` is M_{k+1}; ``infeasible_at`` is the
    1-based index of the first M whose gap matrix blocked the next step."""

    ms: List[np.ndarray]
    infeasible_at: Optional[int]

    @property
    def complete(self):
        return self.infeasible_at is None


def m_ladder(sysm, gamma, pbar, h_max):
    """Ladder ``M_1 = pbar``, ``M_{k+1} = F_o(F_a(M_k))`` up to M_{h_max+1}.

    The final stored matrix may itself violate ``g^2 I - M > 0`` (that is
    exactly the matrix whose negative eigenvalue the adversary needs); the
    preceding ones cannot, since each F_a application requires it.
    """
    count, stack = backend.kernels().m_ladder_loop(
        sysm.a, sysm.q, float(gamma) ** 2, sym(np.asarray(pbar, dtype=float)), int(h_max)
    )
    ms = [stack[i].copy() for i in range(count)]
    infeasible_at = None if count == h_max + 1 else count
    return LadderResult(ms=ms, infeasible_at=infeasible_at)


# The pbar iteration slows down only inside a ~1e-5-wide band around the
# feasibility boundary (the convergence rate tends to 1 there).  Probes that
# cannot be certified within this budget are counted infeasible, which biases
# the bisection by less than the band width.
DEFAULT_PROBE_MAX_ITER = 10_000


def _gamma_feasible(sysm, gamma, h, tol_fixpoint, max_iter):
    """Joint predicate: pbar exists and gamma^2 I - M_h > 0."""
    try:
        res = solve_pbar(sysm, gamma, tol_fixpoint, max_iter)
    except NotConverged:
        return False
    if not res.feasible:
        return False
    if h == 1:
        return True  # M_1 = pbar and its gap condition is the pbar feasibility
    ladder = m_ladder(sysm, gamma, res.pbar, h - 1)
    if len(ladder.ms) < h:
        return False
    return is_pd(gamma * gamma * np.eye(sysm.n) - ladder.ms[h - 1])


def gamma_h(sysm, h, tol_gamma=DEFAULT_TOL_GAMMA, gamma_cap=DEFAULT_GAMMA_CAP,
            tol_fixpoint=DEFAULT_TOL_FIXPOINT, probe_max_iter=DEFAULT_PROBE_MAX_ITER,
            lo=0.0):
    """Smallest attenuation bound achievable with period-h sampling.

    Bisection over the joint feasibility predicate; the upper bracket is
    doubled from 1 until feasible, capped at gamma_cap.
    """
    if h < 1:
        raise ValueError("h must be >= 1")
    hi = max(1.0, 2.0 * lo)
    while not _gamma_feasible(sysm, hi, h, tol_fixpoint, probe_max_iter):
        hi *= 2.0
        if hi > gamma_cap:
            raise NotBracketed("no feasible gamma below cap %.3g for h=%d" % (gamma_cap, h))
    while hi - lo > tol_gamma:
        mid = 0.5 * (lo + hi)
        if _gamma_feasible(sysm, mid, h, tol_fixpoint, probe_max_iter):
            hi = mid
        else:
            lo = mid
    return hi


def gamma_table(sysm, h_max, **kwargs):
    """gamma_h for h = 1..h_max, reusing each level as the next lower bracket."""
    out = []
    lo = 0.0
    for h in range(1, h_max + 1):
        g = gamma_h(sysm, h, lo=lo, **kwargs)
        out.append(g)
        lo = max(0.0, g - 10.0 * kwargs.get("tol_gamma", DEFAULT_TOL_GAMMA))
    return out


def worst_direction(sysm, gamma, h, pbar=None,
                    tol_fixpoint=DEFAULT_TOL_FIXPOINT, max_iter=DEFAULT_MAX_ITER):
    """Unit eigenvector of the smallest (negative) eigenvalue of g^2 I - M_{h+1}.

    Valid for gamma strictly between gamma_h and gamma_{h+1}; the sign is
    normalized so the first nonzero component is positive.
    """
    if pbar is None:
        res = solve_pbar(sysm, gamma, tol_fixpoint, max_iter)
        if not res.feasible:
            raise GammaInfeasible("gamma=%.9g below gamma_1" % gamma)
        pbar = res.pbar
    ladder = m_ladder(sysm, gamma, pbar, h)
    if len(ladder.ms) < h + 1:
        raise GammaInfeasible(
            "ladder infeasible at M_%d; gamma=%.9g is not above gamma_%d"
            % (ladder.infeasible_at, gamma, h)
        )
    gap = sym(gamma * gamma * np.eye(sysm.n) - ladder.ms[h])
    evals, evecs = np.linalg.eigh(gap)
    lam = float(evals[0])
    if lam >= 0.0:
        raise AssumptionFourViolated(
            "gamma^2 I - M_{h+1} has min eig %.3e >= 0 at gamma=%.9g, h=%d"
            % (lam, gamma, h)
        )
    v = evecs[:, 0].copy()
    v /= np.linalg.norm(v)
    scale = np.max(np.abs(v))
    for comp in v:
        if abs(comp) > 1e-9 * scale:
            if comp < 0.0:
                v = -v
            break
    return lam, v


@dataclass(frozen=True)
class ZetaResult:
    """Finite-game ladder matching ``x' pbar x`` within beta at index q."""

    q: int
    gs: List[np.ndarray]       # G_0 .. G_q
    lbars: List[np.ndarray]    # Lbar_1 .. Lbar_q


def g_ladder_zeta(sysm, gamma, pbar, x, beta, q_max=10_000, plq=None,
                  tol_fixpoint=DEFAULT_TOL_FIXPOINT, max_iter=DEFAULT_MAX_ITER):
    """G-ladder ``G_0 = P_LQ``, ``G_{k+1} = F_c(F_a(G_k))`` with stopping rule
    ``|x'G_q x - x'pbar x| < beta``; also returns the disturbance maps
    ``Lbar_k = (g^2 I - G_{k-1})^{-1} G_{k-1}`` consumed by the terminal phase."""
    if beta <= 0.0:
        raise ValueError("beta must be > 0")
    if plq is None:
        plq = solve_plq(sysm, tol_fixpoint, max_iter)
    x = np.asarray(x, dtype=float).reshape(-1)
    target = float(x @ sym(pbar) @ x)
    eye = np.eye(sysm.n)
    g = sym(plq)
    gs = [g]
    lbars = []
    q = 0
    while abs(float(x @ g @ x) - target) >= beta:
        if q >= q_max:
            raise ZetaNotReached("q_max=%d reached; beta=%.3e too small" % (q_max, beta))
        gap = gamma * gamma * eye - g
        lbars.append(np.linalg.solve(gap, g))
        g = f_c(sysm, f_a(g, gamma))
        gs.append(g)
        q += 1
    return ZetaResult(q=q, gs=gs, lbars=lbars)


@dataclass(frozen=True)
class RiccatiBundle:
    """gamma-indexed cache of everything the policies and the adversary need.

    ``window_l_gains[j-1]`` is the disturbance gain for the j-th step after
    a probing kick: the maximizer of the h-step open-window game whose
    stage values walk the M-ladder back down to pbar, so the last in-window
    step (j = h) uses the plain gain ``l_gain``.  For h = 1 the window
    policy and the plain policy coincide.
    """

    gamma: float
    pbar: np.ndarray
    k_gain: np.ndarray
    l_gain: np.ndarray
    fa_pbar: np.ndarray
    u_weight: np.ndarray            # R + B' F_a(pbar) B
    h: Optional[int] = None
    m_ladder: Optional[List[np.ndarray]] = None   # M_1 .. M_{h+1}
    v_dir: Optional[np.ndarray] = None
    lambda_min: Optional[float] = None
    window_l_gains: Optional[List[np.ndarray]] = None

    @property
    def gap(self):
        """gamma^2 I - pbar (positive definite by construction)."""
        return self.gamma ** 2 * np.eye(self.pbar.shape[0]) - self.pbar

    def probe_gain(self, offset):
        """Disturbance gain at the given step offset from a transmission:
        ladder gains inside the kick window, the plain gain outside it."""
        if offset < 1:
            raise ValueError("offset counts steps after the transmission, >= 1")
        if self.window_l_gains is not None and offset <= len(self.window_l_gains):
            return self.window_l_gains[offset - 1]
        return self.l_gain


def make_bundle(sysm, gamma, h=None, tol_fixpoint=DEFAULT_TOL_FIXPOINT,
                max_iter=DEFAULT_MAX_ITER):
    """Solve, synthesize and (when ``h`` is given) attach the ladder pieces.

    With ``h`` set, gamma must lie in (gamma_h, gamma_{h+1}) so that the
    worst direction exists; without it only the gains are cached.
    """
    res = solve_pbar(sysm, gamma, tol_fixpoint, max_iter)
    if not res.feasible:
        raise GammaInfeasible("gamma=%.9g is below the h=1 feasibility boundary" % gamma)
    k, l = synth_gains(sysm, gamma, res.pbar)
    fa = f_a(res.pbar, gamma)
    u_weight = sym(sysm.r + sysm.b.T @ fa @ sysm.b)
    ladder = None
    v = None
    lam = None
    window_gains = None
    if h is not None:
        lam, v = worst_direction(sysm, gamma, h, pbar=res.pbar,
                                 tol_fixpoint=tol_fixpoint, max_iter=max_iter)
        ladder = m_ladder(sysm, gamma, res.pbar, h).ms
        eye = np.eye(sysm.n)
        # gain for step j in 1..h inverts gamma^2 I - M_{h+1-j}, which is
        # positive definite exactly because gamma > gamma_h
        window_gains = [
            np.linalg.solve(gamma * gamma * eye - ladder[h - j], ladder[h - j])
            for j in range(1, h + 1)
        ]
    return RiccatiBundle(gamma=float(gamma), pbar=res.pbar, k_gain=k, l_gain=l,
                         fa_pbar=fa, u_weight=u_weight, h=h,
                         m_ladder=ladder, v_dir=v, lambda_min=lam,
                         window_l_gains=window_gains)
