"""Exception hierarchy shared across the package."""


class EtcHinfError(Exception):
    """Base class for all package errors."""


class ConfigError(EtcHinfError):
    """Invalid or inconsistent run configuration."""


class GammaInfeasible(EtcHinfError):
    """gamma^2 I - P lost positive definiteness; gamma is below the feasibility boundary."""


class NumericalFailure(EtcHinfError):
    """A linear solve or factorization failed; upstream invariants are broken."""


class NotConverged(EtcHinfError):
    """Fixed-point iteration hit max_iter with residual above tolerance."""


class NotBracketed(EtcHinfError):
    """No feasible upper bound for the gamma bisection below the cap."""


class AssumptionOneViolated(ConfigError):
    """(A,B) not controllable, (A,C2) not observable, or R not positive definite."""


class AssumptionFourViolated(EtcHinfError):
    """gamma^2 I - M_{h+1} has no negative eigenvalue at this (gamma, h)."""


class AssumptionFiveViolated(EtcHinfError):
    """The qualifying epsilon set at a probe point does not cover [-eps_low, eps_low]."""

    def __init__(self, xi, t, detail=""):
        self.xi = xi
        self.t = t
        super().__init__(
            "assumption-5 witness at t=%d, xi=%s%s"
            % (t, xi, (": " + detail) if detail else "")
        )


class ZetaNotReached(EtcHinfError):
    """G-ladder hit q_max before matching the target quadratic value."""


class PolicyDimensionMismatch(ConfigError):
    """Controller/scheduler dimensions do not match the system."""


class HorizonTooSmall(ConfigError):
    """Closed-loop horizon must be at least 2 (w0 is injected at t=0)."""


class Uninitialized(EtcHinfError):
    """Policy used before reset/initialization."""


class GainUnavailable(EtcHinfError):
    """Scheduler requires Riccati gains that were not provided."""


class InsufficientHistory(EtcHinfError):
    """Trigger value needs at least two states since the last transmission."""


class VersionMismatch(EtcHinfError):
    """Snapshot restored onto a differently parameterized policy."""


class SnapshotUnsupported(EtcHinfError):
    """Counterfactual probing requires snapshot/restore support."""


class DegenerateTrace(EtcHinfError):
    """Metrics undefined: the recorded disturbance energy is zero."""
