"""Worst-case disturbance generator.

Against any snapshot-capable controller/scheduler pair, the policy drives
the closed loop to one of two verdicts: the attenuation bound gamma is
violated, or the average transmission rate is at least 1/h.  The policy
works on the running certificate

    eta_t = sum_{j<t} (z_j'z_j - g^2 w_j'w_j) + x_t' pbar x_t,

checked at every transmission time:

* eta > 0: switch to the terminal phase (finite-game ladder disturbance for
  q steps, then zero forever) which locks in a positive total;
* otherwise probe, by counterfactual simulation, how long the pair would
  stay silent under the game-optimal disturbance; if no longer than h,
  apply it as is; if longer, add the largest feasible kick along the worst
  direction that keeps the pair silent, which buys a guaranteed certificate
  increase and bounds how often this branch can occur.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import riccati, simcore
from .errors import AssumptionFiveViolated, SnapshotUnsupported
from .riccati import make_bundle, solve_plq
from .simcore import ClosedLoop, DisturbanceSource, run_closed_loop, trace_metrics

EPS_REFINE_TOL = 1e-6

ATTENUATION_VIOLATED = "AttenuationViolated"
RATE_AT_LEAST_INVERSE_H = "RateAtLeastInverseH"
INCONCLUSIVE_AT_HORIZON = "InconclusiveAtHorizon"


@dataclass
class AdversaryConfig:
    gamma: float
    h: int
    w0: np.ndarray
    eps_bar: float
    eps_low: float
    horizon_cap: int = 100_000
    grid_points: int = 201
    rate_tol: float = 1e-3
    zeta_q_max: int = 10_000
    b_source: str = "oracle"          # 'oracle' (quadratic fit) or 'closed'
    tol_fixpoint: float = riccati.DEFAULT_TOL_FIXPOINT
    max_iter: int = riccati.DEFAULT_MAX_ITER

    def __post_init__(self):
        self.w0 = np.asarray(self.w0, dtype=float).reshape(-1)
        if not np.any(self.w0):
            raise ValueError("w0 must be nonzero")
        if not (self.eps_bar >= self.eps_low > 0.0):
            raise ValueError("need eps_bar >= eps_low > 0")
        if self.h < 1:
            raise ValueError("h must be >= 1")
        if self.b_source not in ("oracle", "closed"):
            raise ValueError("b_source must be 'oracle' or 'closed'")


@dataclass
class KickEvent:
    """One occurrence of the perturbed branch, kept for audit."""

    t: int
    eps: float
    eps_inf: float
    eps_sup: float
    a: float
    b: float
    c: float
    x: np.ndarray
    controls: List[np.ndarray]


@dataclass
class AdversaryVerdict:
    outcome: str
    ratio: float
    rate: float
    rate_tail: float
    eta_final: float
    zsum: float                      # sum z'z - g^2 w'w over the trace
    probe_failures: int
    delta_bound: int
    trace: simcore.Trace
    terminal_time: Optional[int] = None
    terminal_q: Optional[int] = None
    events: List[KickEvent] = field(default_factory=list)

    def to_json_dict(self, trace_csv=None):
        return {
            "outcome": self.outcome,
            "ratio": self.ratio,
            "rate": self.rate,
            "eta_final": self.eta_final,
            "probe_failures": self.probe_failures,
            "delta_bound": self.delta_bound,
            "trace_csv": trace_csv,
        }


class KickWindow:
    """Disturbance policy for a kicked silent window.

    Given the open-loop controls the pair will apply while silent, this is
    the exact maximizer of the window certificate
    ``sum_{j=0..h}(z'z - g^2 w'w) + x_{h+1}' pbar x_{h+1}`` over the
    disturbances at offsets 1..h (the kick step itself plays the plain gain
    plus ``eps * v``).  The stage values walk the M-ladder backward, and
    the scheduled controls enter through an affine feed-forward; for h = 1
    the policy degenerates to the plain stationary gain.
    """

    def __init__(self, sysm, bundle, u_sched):
        h = bundle.h
        if h is None or bundle.m_ladder is None:
            raise ValueError("kick window needs a bundle with a ladder")
        if len(u_sched) < h + 1:
            raise ValueError("need the h+1 scheduled controls of the window")
        self.sysm = sysm
        self.bundle = bundle
        self.u_sched = [np.asarray(u, dtype=float).reshape(-1) for u in u_sched[:h + 1]]
        g2 = bundle.gamma ** 2
        eye = np.eye(sysm.n)
        a_mat, b_mat = sysm.a, sysm.b
        # backward affine recursion: f_j is the linear term of the value at
        # offset j; S_{j+1} = M_{h+1-j} comes from the bundle ladder
        shifts = [None] * (h + 1)          # shifts[j] applies at offset j
        f_next = np.zeros(sysm.n)
        for j in range(h, 0, -1):
            s_next = bundle.m_ladder[h - j]            # M_{h+1-j}
            gap = g2 * eye - s_next
            ginv_f = np.linalg.solve(gap, f_next)
            shifts[j] = ginv_f
            fa_s = s_next + s_next @ np.linalg.solve(gap, s_next)
            f_next = a_mat.T @ (fa_s @ (b_mat @ self.u_sched[j]) + g2 * ginv_f)
        self._shifts = shifts

    def w(self, offset, drift, eps=0.0):
        """Disturbance at the given offset past the kicked transmission."""
        if offset == 0:
            out = self.bundle.l_gain @ drift
            if eps != 0.0:
                out = out + eps * self.bundle.v_dir
            return out
        if offset <= self.bundle.h:
            return self.bundle.probe_gain(offset) @ drift + self._shifts[offset]
        return self.bundle.l_gain @ drift


def inter_transmission_time(sysm, loop, bundle, x_t, t, u_t, eps,
                            collect=0, step_cap=100_000, window=None):
    """Steps until the pair's next transmission when probed from (x_t, t).

    Snapshots the pair, simulates the probing disturbance until the
    scheduler or its cap triggers, restores the pair, and returns the step
    count plus the first ``collect`` controls the pair applied.  With
    ``window=None`` the plain stationary gain is used throughout (the
    flavor that decides the branch); passing a :class:`KickWindow` probes
    the policy a kicked segment would actually apply.
    """
    for obj in (loop.snapshot, loop.restore):
        if not callable(obj):
            raise SnapshotUnsupported("pair does not support snapshot/restore")
    snap = loop.snapshot()
    try:
        controls = [np.asarray(u_t, dtype=float).reshape(-1)]
        drift = sysm.a @ x_t + sysm.b @ controls[0]
        if window is None:
            x = drift + bundle.l_gain @ drift
            if eps != 0.0:
                x = x + eps * bundle.v_dir
        else:
            x = drift + window.w(0, drift, eps)
        tt = t + 1
        while True:
            sigma, u = loop.process(tt, x)
            if sigma:
                tau = tt - t
                break
            controls.append(np.asarray(u, dtype=float).reshape(-1))
            drift = sysm.a @ x + sysm.b @ controls[-1]
            if window is None:
                x = drift + bundle.l_gain @ drift
            else:
                x = drift + window.w(tt - t, drift)
            tt += 1
            if tt - t > step_cap:
                raise RuntimeError("probe exceeded step cap; scheduler never triggers")
    finally:
        loop.restore(snap)
    return tau, controls[:collect]


def epsilon_set(sysm, loop, bundle, x_t, t, u_t, h, eps_bar, grid_points=201,
                window=None):
    """Infimum and supremum of the kick sizes that keep the pair silent
    beyond h steps, over [-eps_bar, eps_bar].

    Scans a uniform grid and refines each boundary by bisection against the
    nearest failing neighbor, returning qualifying endpoints.  ``nonempty``
    reports whether eps = 0 qualifies.
    """
    def qualifies(eps):
        tau, _ = inter_transmission_time(sysm, loop, bundle, x_t, t, u_t, eps,
                                         window=window)
        return tau > h

    grid = np.linspace(-eps_bar, eps_bar, int(grid_points))
    flags = [qualifies(e) for e in grid]
    nonempty = qualifies(0.0)
    if not any(flags):
        if not nonempty:
            raise AssumptionFiveViolated(x_t, t, "no qualifying eps on the grid")
        # only eps = 0 qualifies, below grid resolution
        return 0.0, 0.0, True

    def refine(lo, hi, lo_ok):
        """Bisect a qualifying/failing bracket; return the qualifying end."""
        good, bad = (lo, hi) if lo_ok else (hi, lo)
        while abs(bad - good) > EPS_REFINE_TOL:
            mid = 0.5 * (good + bad)
            if qualifies(mid):
                good = mid
            else:
                bad = mid
        return good

    idx = [i for i, ok in enumerate(flags) if ok]
    i_lo, i_hi = idx[0], idx[-1]
    eps_inf = grid[i_lo] if i_lo == 0 else refine(grid[i_lo - 1], grid[i_lo], False)
    eps_sup = grid[i_hi] if i_hi == len(grid) - 1 else refine(grid[i_hi], grid[i_hi + 1], True)
    return float(eps_inf), float(eps_sup), bool(nonempty)


def _ff1_value(sysm, bundle, h, x_t, u_list, eps, window=None):
    """Certificate change over h+1 kicked-window steps with fixed controls:
    sum_{j=0..h}(z'z - g^2 w'w) + x_{h+1}' pbar x_{h+1} - x_0' pbar x_0."""
    if window is None:
        window = KickWindow(sysm, bundle, u_list)
    g2 = bundle.gamma ** 2
    x = np.asarray(x_t, dtype=float).reshape(-1)
    x0 = x
    total = 0.0
    for j in range(h + 1):
        u = np.asarray(u_list[j], dtype=float).reshape(-1)
        drift = sysm.a @ x + sysm.b @ u
        w = window.w(j, drift, eps if j == 0 else 0.0)
        total += simcore.stage_cost(sysm, x, u) - g2 * float(w @ w)
        x = drift + w
    total += float(x @ bundle.pbar @ x) - float(x0 @ bundle.pbar @ x0)
    return total


def ff1_coeffs_oracle(sysm, bundle, h, x_t, u_list):
    """Quadratic coefficients of the kick-size response, by brute force.

    The certificate change is exactly quadratic in the kick size, so three
    evaluations at eps in {0, +1, -1} determine it up to roundoff.
    """
    window = KickWindow(sysm, bundle, u_list)
    j0 = _ff1_value(sysm, bundle, h, x_t, u_list, 0.0, window)
    jp = _ff1_value(sysm, bundle, h, x_t, u_list, 1.0, window)
    jm = _ff1_value(sysm, bundle, h, x_t, u_list, -1.0, window)
    a = 0.5 * (jp + jm) - j0
    b = 0.5 * (jp - jm)
    c = j0
    return a, b, c


def ff1_coeffs_closed(sysm, bundle, h, x_t, u_list):
    """Closed-form coefficients via the backward window-game recursion.

    The window value after the kick is quadratic-plus-affine in the state
    (the controls are fixed): S_j walks the M-ladder backward from pbar,
    the affine part carries the control forcing.  Substituting
    ``x_{t+1} = (I+L)(A x_t + B u_0) + eps v`` gives the exact quadratic
    in the kick size without simulating, so this is an independent check
    of the brute-force fit.
    """
    if bundle.lambda_min is None or bundle.lambda_min >= 0.0:
        from .errors import AssumptionFourViolated

        raise AssumptionFourViolated("bundle has no negative ladder eigenvalue")
    a_mat, b_mat, q_mat, r_mat = sysm.a, sysm.b, sysm.q, sysm.r
    g2 = bundle.gamma ** 2
    eye = np.eye(sysm.n)
    x0 = np.asarray(x_t, dtype=float).reshape(-1)
    us = [np.asarray(u, dtype=float).reshape(-1) for u in u_list]
    # backward pass over j = h .. 1: value x'S_j x + 2 f_j'x + c_j of the
    # remaining maximization with terminal pbar; S_j = M_{h+2-j}
    s_next = bundle.pbar
    f_next = np.zeros(sysm.n)
    c_next = 0.0
    for j in range(h, 0, -1):
        u = us[j]
        gap = g2 * eye - s_next
        fa_s = s_next + s_next @ np.linalg.solve(gap, s_next)
        ginv_f = np.linalg.solve(gap, f_next)
        bu = b_mat @ u
        s_j = q_mat + a_mat.T @ fa_s @ a_mat
        f_j = a_mat.T @ (fa_s @ bu + g2 * ginv_f)
        c_j = (c_next + float(u @ r_mat @ u) + float(bu @ fa_s @ bu)
               + 2.0 * g2 * float(ginv_f @ bu) + float(f_next @ ginv_f))
        s_next, f_next, c_next = 0.5 * (s_j + s_j.T), f_j, c_j
    s1, f1, c1 = s_next, f_next, c_next
    # kick step: w_t = L m0 + eps v, x_{t+1} = (I+L) m0 + eps v
    u0 = us[0]
    m0 = a_mat @ x0 + b_mat @ u0
    lm0 = bundle.l_gain @ m0
    x1_0 = m0 + lm0
    v = bundle.v_dir
    a_coef = -float(v @ ((g2 * eye - bundle.m_ladder[h]) @ v))
    b_coef = 2.0 * (-g2 * float(v @ lm0) + float(v @ (s1 @ x1_0)) + float(f1 @ v))
    c_coef = (simcore.stage_cost(sysm, x0, u0) - g2 * float(lm0 @ lm0)
              + float(x1_0 @ s1 @ x1_0) + 2.0 * float(f1 @ x1_0) + c1
              - float(x0 @ bundle.pbar @ x0))
    return a_coef, b_coef, c_coef


class AdversarySource(DisturbanceSource):
    """Algorithm state machine exposed as a disturbance source.

    Needs the live loop handle for counterfactual probing; all probing goes
    through snapshot/restore so the real pair never observes it.
    """

    def __init__(self, cfg, bundle, plq=None):
        self.cfg = cfg
        self.bundle = bundle
        self._plq = plq
        self.mode = "probing"
        self.acc = 0.0                  # sum_{j<t} z'z - g^2 w'w
        self.n_failures = 0
        self.events = []
        self.eta_at = {}
        self.eta_final = None
        self.terminal_time = None
        self.terminal_q = None
        self._lbars = []
        self._t_now = -1
        self._seg_start = None          # last transmission time
        self._seg_eps = 0.0             # kick applied at the segment start
        self._seg_window = None         # KickWindow of the current segment

    def bind(self, sysm, loop):
        self.sysm = sysm
        self.loop = loop
        if self._plq is None:
            self._plq = solve_plq(sysm, self.cfg.tol_fixpoint, self.cfg.max_iter)

    def w_step(self, t, x, u, sigma):
        self._t_now = t
        if t == 0:
            w = self.cfg.w0
            self.acc += simcore.stage_cost(self.sysm, x, u) - self.bundle.gamma ** 2 * float(w @ w)
            return w
        if self.mode == "probing" and sigma == 1:
            eta_t = self.acc + float(x @ self.bundle.pbar @ x)
            self.eta_at[t] = eta_t
            if eta_t > 0.0:
                self._enter_terminal(t, x, eta_t)
            else:
                self._seg_start = t
                self._seg_eps, self._seg_window = self._choose_kick(t, x, u)
        if self.mode == "terminal":
            w = self._terminal_w(t, x, u)
        else:
            drift = self.sysm.a @ x + self.sysm.b @ u
            if sigma == 1:
                if self._seg_window is not None:
                    w = self._seg_window.w(0, drift, self._seg_eps)
                else:
                    w = self.bundle.l_gain @ drift
            elif self._seg_window is not None:
                # a kicked segment follows its window maximizer; the plain
                # branch stays on the stationary game-optimal gain
                w = self._seg_window.w(t - self._seg_start, drift)
            else:
                w = self.bundle.l_gain @ drift
        self.acc += simcore.stage_cost(self.sysm, x, u) - self.bundle.gamma ** 2 * float(w @ w)
        return w

    def _choose_kick(self, t, x, u):
        """Pick the kick for the segment starting at transmission (x, t);
        returns (eps, window) with window None on the plain branch."""
        cfg = self.cfg
        tau0, controls = inter_transmission_time(
            self.sysm, self.loop, self.bundle, x, t, u, 0.0, collect=cfg.h + 1,
        )
        if tau0 <= cfg.h:
            return 0.0, None
        self.n_failures += 1
        window = KickWindow(self.sysm, self.bundle, controls)
        eps_inf, eps_sup, _ = epsilon_set(
            self.sysm, self.loop, self.bundle, x, t, u, cfg.h, cfg.eps_bar,
            cfg.grid_points, window=window,
        )
        coeffs = ff1_coeffs_oracle if cfg.b_source == "oracle" else ff1_coeffs_closed
        a, b, c = coeffs(self.sysm, self.bundle, cfg.h, x, controls)
        eps = eps_sup if b >= 0.0 else eps_inf
        slack = 10.0 * EPS_REFINE_TOL
        if abs(eps) < cfg.eps_low - slack:
            raise AssumptionFiveViolated(
                x, t, "qualifying set [%.3g, %.3g] does not reach eps_low=%.3g"
                % (eps_inf, eps_sup, cfg.eps_low)
            )
        self.events.append(KickEvent(t=t, eps=eps, eps_inf=eps_inf, eps_sup=eps_sup,
                                     a=a, b=b, c=c, x=np.array(x),
                                     controls=[np.array(c_) for c_ in controls]))
        return eps, window

    def _enter_terminal(self, t, x, eta_t):
        zeta = riccati.g_ladder_zeta(
            self.sysm, self.bundle.gamma, self.bundle.pbar, x, eta_t / 2.0,
            q_max=self.cfg.zeta_q_max, plq=self._plq,
            tol_fixpoint=self.cfg.tol_fixpoint, max_iter=self.cfg.max_iter,
        )
        self.mode = "terminal"
        self.terminal_time = t
        self.terminal_q = zeta.q
        self.eta_final = eta_t
        self._lbars = zeta.lbars

    def _terminal_w(self, t, x, u):
        j = t - self.terminal_time
        if j >= self.terminal_q:
            return np.zeros(self.sysm.n)
        # at offset j the remaining game has q - j stages: use Lbar_{q-j}
        lbar = self._lbars[self.terminal_q - j - 1]
        return lbar @ (self.sysm.a @ x + self.sysm.b @ u)

    def exhausted(self):
        return (self.mode == "terminal"
                and self._t_now - self.terminal_time >= self.terminal_q)


def run_adversary(sysm, controller, scheduler, cfg):
    """Run the disturbance generator against the pair and return a verdict."""
    bundle = make_bundle(sysm, cfg.gamma, cfg.h,
                         tol_fixpoint=cfg.tol_fixpoint, max_iter=cfg.max_iter)
    source = AdversarySource(cfg, bundle)
    # w0 is emitted by the source itself so its certificate accounting sees t=0
    trace = run_closed_loop(sysm, controller, scheduler, source,
                            horizon=cfg.horizon_cap, gamma_for_eta=cfg.gamma)
    metrics = trace_metrics(trace, gamma=cfg.gamma, pbar=bundle.pbar)
    zsum = metrics.z2_total - cfg.gamma ** 2 * metrics.w2_total
    alpha = (-bundle.lambda_min) * cfg.eps_low ** 2
    delta = int(math.ceil(float(cfg.w0 @ (bundle.gap @ cfg.w0)) / alpha))
    eta_final = (source.eta_final if source.eta_final is not None
                 else simcore.eta(trace, len(trace), bundle.pbar, cfg.gamma))
    common = dict(ratio=metrics.ratio, rate=metrics.rate, rate_tail=metrics.rate_tail,
                  eta_final=eta_final, zsum=zsum, probe_failures=source.n_failures,
                  delta_bound=delta, trace=trace, events=source.events)
    if source.mode == "terminal":
        return AdversaryVerdict(outcome=ATTENUATION_VIOLATED,
                                terminal_time=source.terminal_time,
                                terminal_q=source.terminal_q, **common)
    if (metrics.rate_tail >= 1.0 / cfg.h - cfg.rate_tol
            and source.n_failures < delta):
        return AdversaryVerdict(outcome=RATE_AT_LEAST_INVERSE_H, **common)
    return AdversaryVerdict(outcome=INCONCLUSIVE_AT_HORIZON, **common)


@dataclass
class A5Report:
    gamma: float
    h: int
    eps_low: float
    samples_checked: int
    violations: List[dict]

    def to_json_dict(self):
        return {
            "gamma": self.gamma,
            "h": self.h,
            "eps_low": self.eps_low,
            "samples_checked": self.samples_checked,
            "violations": self.violations,
            "violation_count": len(self.violations),
        }


def check_assumption5(sysm, make_pair, gamma, h, eps_low, n_samples=20,
                      radius=2.0, seed=0, grid_points=21, pilot_horizon=60,
                      pilot_w0=None):
    """Empirical regularity check of the probing map.

    For each sampled transmission state: if the unperturbed probe already
    triggers within h steps, the state passes; otherwise every kick size in
    [-eps_low, eps_low] (on a grid) must also stay silent beyond h.
    ``make_pair`` builds a fresh (controller, scheduler) pair per sample so
    probes cannot interfere.
    """
    bundle = make_bundle(sysm, gamma, h)
    rng = np.random.default_rng(seed)
    violations = []
    checked = 0

    def probe_point(loop, x, t, u_t):
        tau0, controls = inter_transmission_time(sysm, loop, bundle, x, t, u_t,
                                                 0.0, collect=h + 1)
        if tau0 <= h:
            return
        window = KickWindow(sysm, bundle, controls)
        for eps in np.linspace(-eps_low, eps_low, int(grid_points)):
            tau, _ = inter_transmission_time(sysm, loop, bundle, x, t, u_t,
                                             float(eps), window=window)
            if tau <= h:
                violations.append({
                    "xi": [float(v) for v in np.atleast_1d(x)],
                    "t": int(t),
                    "eps": float(eps),
                    "tau": int(tau),
                })

    # ball samples placed at a synthetic transmission at t = 1
    for _ in range(int(n_samples)):
        xi = rng.normal(size=sysm.n)
        norm = np.linalg.norm(xi)
        if norm > 0:
            xi = xi / norm * radius * rng.uniform(0.05, 1.0)
        controller, scheduler = make_pair()
        loop = ClosedLoop(sysm, controller, scheduler)
        loop.begin(np.zeros(sysm.n))
        u_t = loop.force_transmission(1, xi)
        checked += 1
        probe_point(loop, xi, 1, u_t)

    # states harvested from a pilot run under the unperturbed probe
    controller, scheduler = make_pair()
    loop = ClosedLoop(sysm, controller, scheduler)
    source = simcore.ProbingSource(bundle, eps=0.0)
    source.bind(sysm, loop)
    loop.begin(np.zeros(sysm.n))
    x = np.zeros(sysm.n)
    w0 = (np.asarray(pilot_w0, dtype=float).reshape(-1) if pilot_w0 is not None
          else np.eye(sysm.n)[:, 0])
    for t in range(int(pilot_horizon)):
        sigma, u = loop.process(t, x)
        if sigma == 1:
            checked += 1
            probe_point(loop, x, t, u)
        w = w0 if t == 0 else source.w_step(t, x, u, sigma)
        x = simcore.step(sysm, x, np.asarray(u).reshape(-1), w)
        if float(np.linalg.norm(x)) < simcore.QUIET_NORM:
            break
    return A5Report(gamma=float(gamma), h=int(h), eps_low=float(eps_low),
                    samples_checked=checked, violations=violations)
