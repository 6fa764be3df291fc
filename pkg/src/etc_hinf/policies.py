"""Controllers and schedulers with a uniform stateful interface.

Controllers hold the certainty-equivalent estimate ``xhat`` which resets to
the transmitted state and propagates open-loop between transmissions:

* hold controller: ``u = K xhat``, ``xhat+ = (A + B K) xhat``;
* game-predictive controller: ``u = K xhat`` with the worst-case propagation
  ``xhat+ = (I + L)(A + B K) xhat`` so that between transmissions the
  control replays the game-optimal sequence from the last received state.

Schedulers are stateless functions of the information window (states since
the last transmission plus the controls the known controller applied), so
pair snapshots reduce to the controller estimate plus the window.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import (
    GainUnavailable,
    InsufficientHistory,
    PolicyDimensionMismatch,
    Uninitialized,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PolicySnapshot:
    """Opaque copy of a pair's mutable state; restoring it and replaying the
    same inputs reproduces the same outputs bit for bit."""

    fingerprint: tuple
    controller_state: tuple
    window_states: Tuple[np.ndarray, ...]
    window_controls: Tuple[np.ndarray, ...]
    s_last: Optional[int]


class _PredictiveController:
    """Shared estimate machinery: u_t = K xhat_t with a linear propagation."""

    def __init__(self, k_gain, prop):
        self.k_gain = np.atleast_2d(np.asarray(k_gain, dtype=float))
        self.prop = np.atleast_2d(np.asarray(prop, dtype=float))
        self.m, self.n = self.k_gain.shape
        if self.prop.shape != (self.n, self.n):
            raise PolicyDimensionMismatch("propagation matrix must be n x n")
        self._xhat = None

    def reset(self):
        self._xhat = np.zeros(self.n)

    def advance(self, x_received):
        """Update xhat for the current step and return u_t.

        ``x_received`` is the transmitted state when sigma_t = 1, else None.
        """
        if self._xhat is None:
            raise Uninitialized("controller used before reset()")
        if x_received is None:
            self._xhat = self.prop @ self._xhat
        else:
            self._xhat = np.asarray(x_received, dtype=float).reshape(-1).copy()
        return self.k_gain @ self._xhat

    def peek(self):
        """Estimate the controller would hold now without a transmission."""
        if self._xhat is None:
            raise Uninitialized("controller used before reset()")
        return self.prop @ self._xhat

    def scheduled_controls(self, x_received, count):
        """Controls this policy will apply at offsets 0..count-1 after
        receiving ``x_received``, assuming no further transmission."""
        xhat = np.asarray(x_received, dtype=float).reshape(-1)
        out = []
        for _ in range(count):
            out.append(self.k_gain @ xhat)
            xhat = self.prop @ xhat
        return out

    def state_snapshot(self):
        return (None if self._xhat is None else self._xhat.copy(),)

    def state_restore(self, state):
        (xhat,) = state
        self._xhat = None if xhat is None else xhat.copy()

    def fingerprint(self):
        return (type(self).__name__, self.k_gain.tobytes(), self.prop.tobytes())


class HoldController(_PredictiveController):
    """u = K xhat with the nominal closed-loop propagation (A + B K)."""

    def __init__(self, sysm, k_gain):
        k = np.atleast_2d(np.asarray(k_gain, dtype=float))
        prop = sysm.a + sysm.b @ k
        if np.max(np.abs(np.linalg.eigvals(prop))) >= 1.0:
            logger.warning("hold controller: A + BK is not Schur (spectral radius %.4f)",
                           np.max(np.abs(np.linalg.eigvals(prop))))
        super().__init__(k, prop)


class GamePredictiveController(_PredictiveController):
    """u = K_gamma xhat with the worst-case propagation (I+L)(A+BK)."""

    def __init__(self, sysm, bundle):
        k = bundle.k_gain
        acl = sysm.a + sysm.b @ k
        prop = acl + bundle.l_gain @ acl
        super().__init__(k, prop)
        self.bundle = bundle


class PeriodicScheduler:
    """Transmit when t is an integer multiple of h (t = 1 is forced by the
    loop, matching the convention that transmissions start at s_0 = 1)."""

    def __init__(self, h):
        if h < 1:
            raise ValueError("h must be >= 1")
        self.h = int(h)
        self.hbar = int(h)

    def decide(self, t, x, r, window_states, window_controls, controller):
        return 1 if t % self.h == 0 else 0

    def fingerprint(self):
        return ("PeriodicScheduler", self.h)


class PatternScheduler:
    """Repeats a cyclic 0/1 schedule; bit index 0 applies at t = 0."""

    def __init__(self, bits):
        bits = str(bits)
        if not bits or set(bits) - {"0", "1"} or "1" not in bits:
            raise ValueError("pattern must be a nonempty 0/1 string with at least one 1")
        self.bits = bits
        self.hbar = self.max_gap(bits)

    @staticmethod
    def max_gap(bits):
        """Largest cyclic distance between consecutive ones."""
        ones = [i for i, b in enumerate(bits) if b == "1"]
        gaps = [(ones[(i + 1) % len(ones)] - ones[i]) % len(bits) or len(bits)
                for i in range(len(ones))]
        return max(gaps)

    def decide(self, t, x, r, window_states, window_controls, controller):
        return int(self.bits[t % len(self.bits)])

    def fingerprint(self):
        return ("PatternScheduler", self.bits)


class ThresholdScheduler:
    """Transmit once the prediction error energy ``e'Xe`` exceeds rho,
    where ``e = x_t - xhat_t`` against the paired controller's estimate."""

    def __init__(self, x_weight, rho, hbar):
        self.x_weight = np.atleast_2d(np.asarray(x_weight, dtype=float))
        if rho <= 0.0:
            raise ValueError("rho must be > 0")
        self.rho = float(rho)
        self.hbar = int(hbar)

    def decide(self, t, x, r, window_states, window_controls, controller):
        if r is not None and r >= self.hbar:
            return 1
        e = x - controller.peek()
        return 1 if float(e @ self.x_weight @ e) > self.rho else 0

    def fingerprint(self):
        return ("ThresholdScheduler", self.x_weight.tobytes(), self.rho, self.hbar)


def g_value(sysm, bundle, states, controls, weight_mode="direct", current_u=None):
    """Accumulated trigger value over one inter-transmission window.

    ``states`` is the window [x_s .. x_t] (the last entry is the current
    state), ``controls`` the controls actually applied at s..t-1.  The
    control mismatch at time t uses the post-transmission hypothesis
    ``u_t = K x_t`` unless ``current_u`` overrides it.  Disturbances are
    reconstructed from the window, never observed directly.

    Weight modes for the disturbance-deviation term:

    * ``direct``: added with weight (g^2 I - pbar) -- reproduces the known
      scalar one-step coefficient;
    * ``inverse``: subtracted with weight (g^2 I - pbar)^{-1}.
    """
    if len(states) < 2:
        raise InsufficientHistory("need at least two states since the last transmission")
    if len(controls) != len(states) - 1:
        raise InsufficientHistory("need one control per inter-transmission step")
    if bundle is None:
        raise GainUnavailable("trigger requires a Riccati bundle")
    a, b = sysm.a, sysm.b
    k = bundle.k_gain
    acl = a + b @ k
    prop = acl + bundle.l_gain @ acl
    gap = bundle.gap
    x_s = np.asarray(states[0], dtype=float)
    total = 0.0
    # control-mismatch terms, j = 1 .. t - s (prediction from x_s)
    pred = x_s.copy()
    for j in range(1, len(states)):
        pred = prop @ pred
        u_star = k @ pred
        if j < len(states) - 1:
            u_actual = np.asarray(controls[j], dtype=float)
        else:
            u_actual = (k @ np.asarray(states[-1], dtype=float)
                        if current_u is None else np.asarray(current_u, dtype=float))
        du = u_actual - u_star
        total += float(du @ bundle.u_weight @ du)
    # disturbance-deviation terms, k = s .. t-1 (reconstructed w)
    for i in range(len(states) - 1):
        xi = np.asarray(states[i], dtype=float)
        ui = np.asarray(controls[i], dtype=float)
        drift = a @ xi + b @ ui
        w_rec = np.asarray(states[i + 1], dtype=float) - drift
        dev = w_rec - bundle.l_gain @ drift
        if weight_mode == "direct":
            total += float(dev @ gap @ dev)
        elif weight_mode == "inverse":
            total -= float(dev @ np.linalg.solve(gap, dev))
        else:
            raise ValueError("weight_mode must be 'direct' or 'inverse'")
    return total


class GameTriggerScheduler:
    """Transmit at t=1, at the cap, or when the accumulated trigger value
    goes positive; zero on trajectories that follow the game-optimal
    disturbance under the paired game-predictive controller."""

    def __init__(self, sysm, bundle, hbar, weight_mode="direct", g_tol_coeff=1e-12):
        if bundle is None:
            raise GainUnavailable("game trigger requires a Riccati bundle")
        self.sysm = sysm
        self.bundle = bundle
        self.hbar = int(hbar)
        self.weight_mode = weight_mode
        # strict positivity up to roundoff noise in the reconstructed w
        self.g_tol_coeff = float(g_tol_coeff)

    def decide(self, t, x, r, window_states, window_controls, controller):
        if t == 1:
            return 1
        if r is not None and r >= self.hbar:
            return 1
        states = list(window_states) + [x]
        g = g_value(self.sysm, self.bundle, states, list(window_controls),
                    weight_mode=self.weight_mode)
        # relative noise floor: the trigger value is quadratic in the window
        # data, and reconstructed disturbances carry roundoff of that scale
        scale = max(float(s @ s) for s in states)
        return 1 if g > self.g_tol_coeff * scale else 0

    def fingerprint(self):
        return ("GameTriggerScheduler", self.bundle.gamma, self.hbar, self.weight_mode)


class DeadbandWrappedScheduler:
    """Scheduler modification enforcing the probing-regularity assumption:
    transmissions are suppressed on windows whose reconstructed disturbances
    match the probing pattern (kick of size |eps| <= eps_low along the worst
    direction at the transmission step, the window maximizer afterwards);
    otherwise defers to the wrapped scheduler.  The cap decision is never
    suppressed.

    The in-window reference disturbances need the controls scheduled over
    the silent window, which the wrapper predicts from the paired
    controller (on a silent window prediction and reality coincide).
    """

    def __init__(self, inner, sysm, bundle, eps_low, tol_match=1e-9):
        if bundle.v_dir is None:
            raise GainUnavailable("deadband wrapper needs a bundle with a worst direction")
        self.inner = inner
        self.sysm = sysm
        self.bundle = bundle
        self.eps_low = float(eps_low)
        self.tol_match = float(tol_match)
        self.hbar = inner.hbar

    def _reference_window(self, x_s, controller):
        from .adversary import KickWindow

        h = self.bundle.h
        u_sched = controller.scheduled_controls(np.asarray(x_s, dtype=float), h + 1)
        return KickWindow(self.sysm, self.bundle, u_sched)

    def _matches_probe(self, states, controls, controller):
        a, b = self.sysm.a, self.sysm.b
        v = self.bundle.v_dir
        ref = self._reference_window(states[0], controller)
        for i in range(len(states) - 1):
            drift = a @ np.asarray(states[i]) + b @ np.asarray(controls[i])
            w_rec = np.asarray(states[i + 1]) - drift
            dev = w_rec - ref.w(i, drift)
            if i == 0:
                eps_hat = float(v @ dev)
                if abs(eps_hat) > self.eps_low + self.tol_match:
                    return False
                if float(np.linalg.norm(dev - eps_hat * v)) > self.tol_match:
                    return False
            else:
                if float(np.linalg.norm(dev)) > self.tol_match:
                    return False
        return True

    def decide(self, t, x, r, window_states, window_controls, controller):
        if r is not None and r >= self.hbar:
            return 1
        states = list(window_states) + [x]
        if len(states) >= 2 and self._matches_probe(states, list(window_controls),
                                                    controller):
            return 0
        return self.inner.decide(t=t, x=x, r=r, window_states=window_states,
                                 window_controls=window_controls, controller=controller)

    def fingerprint(self):
        return ("DeadbandWrappedScheduler", self.inner.fingerprint(),
                self.bundle.gamma, self.eps_low, self.tol_match)
