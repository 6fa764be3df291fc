"""Closed-loop execution, trace recording, and performance accounting.

A run couples four agents around the plant ``x+ = A x + B u + w``:

* the scheduler decides at each t >= 1 whether the state is transmitted
  (sigma_t = 1 is forced at t = 1 and whenever the elapsed time since the
  last transmission reaches the scheduler's cap);
* the controller sees only transmitted states and the elapsed counter;
* the disturbance source sees everything (it models the adversary).

``ClosedLoop`` owns the information-window bookkeeping and exposes
snapshot/restore so a disturbance policy can probe the pair's future
reaction without perturbing the real run.
"""

import csv
import math
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .errors import (
    DegenerateTrace,
    HorizonTooSmall,
    PolicyDimensionMismatch,
)

QUIET_NORM = 1e-9  # state considered decayed once below this norm


def step(sysm, x, u, w):
    """One plant step ``A x + B u + w`` (identity disturbance gain)."""
    return sysm.a @ x + sysm.b @ u + w


def stage_cost(sysm, x, u):
    """Instantaneous output energy ``x'Qx + u'Ru``."""
    return float(x @ sysm.q @ x + u @ sysm.r @ u)


@dataclass(frozen=True)
class StepRecord:
    t: int
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    sigma: int
    stage_z2: float
    stage_w2: float


@dataclass
class Trace:
    """Time-indexed record of a closed-loop run plus the final state."""

    records: List[StepRecord]
    x_final: np.ndarray
    n: int
    m: int

    def __len__(self):
        return len(self.records)

    @property
    def transmission_times(self):
        return [r.t for r in self.records if r.sigma == 1]

    def state(self, t):
        """State at time t, for t in 0..len (len gives the final state)."""
        if t == len(self.records):
            return self.x_final
        return self.records[t].x

    def sigma_array(self):
        return np.array([r.sigma for r in self.records], dtype=int)

    def stage_arrays(self):
        z2 = np.array([r.stage_z2 for r in self.records])
        w2 = np.array([r.stage_w2 for r in self.records])
        return z2, w2

    def reconstruction_residual(self, sysm):
        """Max relative residual of ``x_{t+1} - (A x_t + B u_t + w_t)``."""
        worst = 0.0
        for rec in self.records:
            nxt = self.state(rec.t + 1)
            pred = step(sysm, rec.x, rec.u, rec.w)
            scale = max(1.0, float(np.linalg.norm(nxt)))
            worst = max(worst, float(np.linalg.norm(nxt - pred)) / scale)
        return worst


def eta(trace, t, pbar, gamma):
    """Running certificate sum_{j<t}(z_j'z_j - g^2 w_j'w_j) + x_t' pbar x_t."""
    if t < 0 or t > len(trace):
        raise IndexError("t=%d outside trace of length %d" % (t, len(trace)))
    acc = 0.0
    for rec in trace.records[:t]:
        acc += rec.stage_z2 - gamma * gamma * rec.stage_w2
    x = trace.state(t)
    return acc + float(x @ pbar @ x)


def eta_series(trace, pbar, gamma):
    """eta at every t in 0..len(trace) computed incrementally."""
    out = np.empty(len(trace) + 1)
    acc = 0.0
    for t, rec in enumerate(trace.records):
        out[t] = acc + float(rec.x @ pbar @ rec.x)
        acc += rec.stage_z2 - gamma * gamma * rec.stage_w2
    out[len(trace)] = acc + float(trace.x_final @ pbar @ trace.x_final)
    return out


@dataclass(frozen=True)
class Metrics:
    z2_total: float
    w2_total: float
    ratio: float
    rate: float
    rate_tail: float
    hbar_avg: float
    eta_at: Dict[int, float]


def trace_metrics(trace, gamma=None, pbar=None):
    """Totals, attenuation ratio, and empirical transmission rates.

    The limsup in the rate definition is approximated by the full-horizon
    mean; the tail-window mean (last quarter) is reported alongside to
    expose transients.
    """
    if len(trace) == 0:
        raise DegenerateTrace("empty trace")
    z2, w2 = trace.stage_arrays()
    z2_total = float(np.sum(z2))
    w2_total = float(np.sum(w2))
    if w2_total <= 0.0:
        raise DegenerateTrace("zero disturbance energy; attenuation ratio undefined")
    sig = trace.sigma_array()
    rate = float(np.mean(sig))
    tail = sig[-max(1, len(sig) // 4):]
    rate_tail = float(np.mean(tail))
    eta_at = {}
    if pbar is not None and gamma is not None:
        series = eta_series(trace, pbar, gamma)
        eta_at = {t: float(series[t]) for t in trace.transmission_times}
    return Metrics(
        z2_total=z2_total,
        w2_total=w2_total,
        ratio=z2_total / w2_total,
        rate=rate,
        rate_tail=rate_tail,
        hbar_avg=(math.inf if rate == 0.0 else 1.0 / rate),
        eta_at=eta_at,
    )


class DisturbanceSource:
    """Base disturbance policy: w_t as a function of everything observable."""

    def bind(self, sysm, loop):
        """Called once before the run with the plant and the live loop."""

    def w_step(self, t, x, u, sigma):
        raise NotImplementedError

    def exhausted(self):
        """True once the source has committed to w = 0 forever."""
        return False


class ZeroSource(DisturbanceSource):
    def bind(self, sysm, loop):
        self._n = sysm.n

    def w_step(self, t, x, u, sigma):
        return np.zeros(self._n)

    def exhausted(self):
        return True


class FileSource(DisturbanceSource):
    """Replays a fixed disturbance sequence (rows of w)."""

    def __init__(self, w_sequence):
        self._w = [np.asarray(row, dtype=float).reshape(-1) for row in w_sequence]

    def bind(self, sysm, loop):
        for row in self._w:
            if row.shape != (sysm.n,):
                raise PolicyDimensionMismatch(
                    "disturbance rows must have length %d" % sysm.n
                )
        self._n = sysm.n

    def w_step(self, t, x, u, sigma):
        if t < len(self._w):
            return self._w[t]
        return np.zeros(self._n)

    def exhausted(self):
        return False


class ProbingSource(DisturbanceSource):
    """Stationary game-optimal disturbance ``w = L (A x + B u)`` with an
    optional fixed kick ``eps * v`` injected at every transmission step.

    This mirrors the adversary's plain branch; the kicked multi-step window
    maximizer lives in the adversary, which knows the pair's scheduled
    controls."""

    def __init__(self, bundle, eps=0.0):
        self._bundle = bundle
        self._eps = float(eps)
        if eps != 0.0 and bundle.v_dir is None:
            raise ValueError("probing with eps != 0 needs a bundle with a worst direction")

    def bind(self, sysm, loop):
        self._sysm = sysm

    def w_step(self, t, x, u, sigma):
        w = self._bundle.l_gain @ (self._sysm.a @ x + self._sysm.b @ u)
        if sigma == 1 and self._eps != 0.0:
            w = w + self._eps * self._bundle.v_dir
        return w


class ClosedLoop:
    """Controller/scheduler interconnection with window bookkeeping.

    The mutable state (controller estimate, information window, last
    transmission time) is what `snapshot`/`restore` capture; schedulers are
    stateless given the window.
    """

    def __init__(self, sysm, controller, scheduler):
        self.sysm = sysm
        self.controller = controller
        self.scheduler = scheduler
        self.hbar = getattr(scheduler, "hbar", None)
        self._win_x = []
        self._win_u = []
        self._s_last = None
        self._began = False

    def begin(self, x0):
        self.controller.reset()
        self._win_x = [np.array(x0, dtype=float)]
        self._win_u = []
        self._s_last = None
        self._began = True

    @property
    def s_last(self):
        return self._s_last

    def elapsed(self, t):
        return None if self._s_last is None else t - self._s_last

    def process(self, t, x):
        """Decide sigma_t, update the controller, and return (sigma, u_t).

        Maintains the window I_t = states since the last transmission so
        the next decision sees it; call exactly once per time step (real or
        counterfactual).
        """
        if not self._began:
            raise RuntimeError("ClosedLoop.process before begin()")
        x = np.asarray(x, dtype=float).reshape(-1)
        if t == 0:
            sigma = 0
        elif t == 1:
            sigma = 1  # the scheduler is assumed to transmit at t = 1
        else:
            r = self.elapsed(t)
            if self.hbar is not None and r is not None and r >= self.hbar:
                sigma = 1
            else:
                sigma = int(
                    self.scheduler.decide(
                        t=t, x=x, r=r, window_states=self._win_x,
                        window_controls=self._win_u, controller=self.controller,
                    )
                )
        if sigma:
            u = self.controller.advance(x)
            self._s_last = t
            self._win_x = [x]
            self._win_u = [u]
        else:
            u = self.controller.advance(None)
            self._win_x.append(x)
            self._win_u.append(u)
        return sigma, u

    def force_transmission(self, t, x):
        """Place the pair at a synthetic transmission state (x, t)."""
        if not self._began:
            self.begin(np.zeros(self.sysm.n))
        x = np.asarray(x, dtype=float).reshape(-1)
        u = self.controller.advance(x)
        self._s_last = t
        self._win_x = [x]
        self._win_u = [u]
        return u

    def snapshot(self):
        from .policies import PolicySnapshot

        return PolicySnapshot(
            fingerprint=self.fingerprint(),
            controller_state=self.controller.state_snapshot(),
            window_states=tuple(np.array(v) for v in self._win_x),
            window_controls=tuple(np.array(v) for v in self._win_u),
            s_last=self._s_last,
        )

    def restore(self, snap):
        from .errors import VersionMismatch

        if snap.fingerprint != self.fingerprint():
            raise VersionMismatch(
                "snapshot taken from a differently parameterized pair"
            )
        self.controller.state_restore(snap.controller_state)
        self._win_x = [np.array(v) for v in snap.window_states]
        self._win_u = [np.array(v) for v in snap.window_controls]
        self._s_last = snap.s_last
        self._began = True

    def fingerprint(self):
        return (
            self.controller.fingerprint(),
            getattr(self.scheduler, "fingerprint", lambda: repr(self.scheduler))(),
        )


def run_closed_loop(sysm, controller, scheduler, source, horizon,
                    gamma_for_eta=None, w0=None, stop_when_quiet=True):
    """Execute t = 0..horizon-1 and record everything.

    ``w0`` overrides the source at t = 0 (the run starts from x_0 = 0, so
    x_1 = w_0 carries the initial excitation).  The run ends early only
    when the source reports exhaustion and the state has decayed.
    """
    if horizon < 1:
        raise HorizonTooSmall("horizon must be >= 1")
    if controller.m != sysm.m or controller.n != sysm.n:
        raise PolicyDimensionMismatch("controller dimensions do not match the system")
    loop = ClosedLoop(sysm, controller, scheduler)
    source.bind(sysm, loop)
    x = np.zeros(sysm.n)
    loop.begin(x)
    records = []
    for t in range(horizon):
        sigma, u = loop.process(t, x)
        if t == 0 and w0 is not None:
            w = np.asarray(w0, dtype=float).reshape(-1)
            if w.shape != (sysm.n,):
                raise PolicyDimensionMismatch("w0 must have length %d" % sysm.n)
        else:
            w = np.asarray(source.w_step(t, x, u, sigma), dtype=float).reshape(-1)
        records.append(StepRecord(
            t=t, x=x.copy(), u=np.asarray(u, dtype=float).reshape(-1).copy(),
            w=w.copy(), sigma=int(sigma),
            stage_z2=stage_cost(sysm, x, u), stage_w2=float(w @ w),
        ))
        x = step(sysm, x, np.asarray(u, dtype=float).reshape(-1), w)
        if stop_when_quiet and source.exhausted() and float(np.linalg.norm(x)) < QUIET_NORM:
            break
    return Trace(records=records, x_final=x, n=sysm.n, m=sysm.m)


# --- trace CSV (the package's on-disk interchange format) -----------------

def _fmt(x):
    return "%.17g" % float(x)


def write_trace_csv(path, trace, gamma=None, pbar=None):
    """One row per step: t, state, control, disturbance, sigma, stage costs,
    running eta (nan when no gamma/pbar was supplied)."""
    if gamma is not None and pbar is not None:
        etas = eta_series(trace, pbar, gamma)
    else:
        etas = None
    header = (
        ["t"]
        + ["x_%d" % i for i in range(trace.n)]
        + ["u_%d" % i for i in range(trace.m)]
        + ["w_%d" % i for i in range(trace.n)]
        + ["sigma", "stage_z2", "stage_w2", "eta"]
    )
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for idx, rec in enumerate(trace.records):
            row = (
                [str(rec.t)]
                + [_fmt(v) for v in rec.x]
                + [_fmt(v) for v in rec.u]
                + [_fmt(v) for v in rec.w]
                + [str(rec.sigma), _fmt(rec.stage_z2), _fmt(rec.stage_w2),
                   _fmt(etas[idx]) if etas is not None else "nan"]
            )
            wr.writerow(row)


def read_trace_csv(path):
    """Parse a trace CSV back into column arrays (dict of numpy arrays)."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [row for row in rd if row]
    n = sum(1 for name in header if name.startswith("x_"))
    m = sum(1 for name in header if name.startswith("u_"))
    data = np.array([[float(v) for v in row] for row in rows])
    out = {
        "t": data[:, 0].astype(int),
        "x": data[:, 1:1 + n],
        "u": data[:, 1 + n:1 + n + m],
        "w": data[:, 1 + n + m:1 + 2 * n + m],
        "sigma": data[:, 1 + 2 * n + m].astype(int),
        "stage_z2": data[:, 2 + 2 * n + m],
        "stage_w2": data[:, 3 + 2 * n + m],
        "eta": data[:, 4 + 2 * n + m],
    }
    return out
