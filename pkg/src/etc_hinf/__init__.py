"""Discrete-time H-infinity event-triggered control toolkit.

Riccati machinery for attenuation ladders and optimal periodic gains,
event-triggered controller/scheduler pairs with counterfactual
snapshot/restore, and the worst-case disturbance generator that drives any
pair to an attenuation violation or a periodic-rate certificate.
"""

from .adversary import (
    A5Report,
    AdversaryConfig,
    AdversaryVerdict,
    KickWindow,
    check_assumption5,
    epsilon_set,
    ff1_coeffs_closed,
    ff1_coeffs_oracle,
    inter_transmission_time,
    run_adversary,
)
from .policies import (
    DeadbandWrappedScheduler,
    GamePredictiveController,
    GameTriggerScheduler,
    HoldController,
    PatternScheduler,
    PeriodicScheduler,
    PolicySnapshot,
    ThresholdScheduler,
    g_value,
)
from .riccati import (
    RiccatiBundle,
    SystemModel,
    f_a,
    f_c,
    f_o,
    g_ladder_zeta,
    gamma_h,
    gamma_table,
    m_ladder,
    make_bundle,
    solve_pbar,
    solve_plq,
    synth_gains,
    worst_direction,
)
from .simcore import (
    ClosedLoop,
    FileSource,
    Metrics,
    ProbingSource,
    Trace,
    ZeroSource,
    eta,
    eta_series,
    read_trace_csv,
    run_closed_loop,
    stage_cost,
    step,
    trace_metrics,
    write_trace_csv,
)

__version__ = "0.1.0"
