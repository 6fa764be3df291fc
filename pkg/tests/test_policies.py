import numpy as np
import numpy.testing as npt
import pytest

from etc_hinf import policies, riccati, simcore
from etc_hinf.errors import InsufficientHistory, VersionMismatch

GAMMA = 1.4748


@pytest.fixture(scope="module")
def scalar_bundle(scalar_sys):
    return riccati.make_bundle(scalar_sys, GAMMA, h=1)


class TestControllers:
    def test_u_at_transmission(self, scalar_sys, scalar_bundle):
        ctrl = policies.GamePredictiveController(scalar_sys, scalar_bundle)
        ctrl.reset()
        u = ctrl.advance(np.array([1.0]))
        npt.assert_allclose(u, scalar_bundle.k_gain @ np.array([1.0]))

    def test_game_predictive_one_step(self, scalar_sys, scalar_bundle):
        # u after one silent step: K (I+L)(A+BK) x_s; with the paper gains
        # this is about -0.4625
        ctrl = policies.GamePredictiveController(scalar_sys, scalar_bundle)
        ctrl.reset()
        ctrl.advance(np.array([1.0]))
        u = ctrl.advance(None)
        assert abs(u[0] - (-0.4625)) / 0.4625 < 1e-2

    def test_hold_propagation(self, scalar_sys, scalar_bundle):
        k = scalar_bundle.k_gain
        ctrl = policies.HoldController(scalar_sys, k)
        ctrl.reset()
        ctrl.advance(np.array([2.0]))
        u = ctrl.advance(None)
        acl = (scalar_sys.a + scalar_sys.b @ k)[0, 0]
        assert u[0] == pytest.approx(k[0, 0] * acl * 2.0)

    def test_zero_state_zero_u(self, scalar_sys, scalar_bundle):
        ctrl = policies.GamePredictiveController(scalar_sys, scalar_bundle)
        ctrl.reset()
        ctrl.advance(np.array([0.0]))
        for _ in range(4):
            assert ctrl.advance(None)[0] == 0.0

    def test_hold_unstable_warns(self, scalar_sys, caplog):
        import logging

        with caplog.at_level(logging.WARNING):
            policies.HoldController(scalar_sys, [[0.5]])  # A+BK = 1.5
        assert any("not Schur" in r.message for r in caplog.records)

    def test_scheduled_controls(self, scalar_sys, scalar_bundle):
        ctrl = policies.GamePredictiveController(scalar_sys, scalar_bundle)
        seq = ctrl.scheduled_controls(np.array([1.0]), 3)
        prop = (np.eye(1) + scalar_bundle.l_gain) @ (
            scalar_sys.a + scalar_sys.b @ scalar_bundle.k_gain)
        npt.assert_allclose(seq[1], scalar_bundle.k_gain @ prop @ np.array([1.0]))


class TestSchedulers:
    def test_periodic(self, scalar_sys, scalar_bundle):
        sched = policies.PeriodicScheduler(3)
        ctrl = policies.GamePredictiveController(scalar_sys, scalar_bundle)
        for t in (3, 6, 9):
            assert sched.decide(t=t, x=np.zeros(1), r=1, window_states=[],
                                window_controls=[], controller=ctrl) == 1
        for t in (2, 4, 5, 7, 8):
            assert sched.decide(t=t, x=np.zeros(1), r=1, window_states=[],
                                window_controls=[], controller=ctrl) == 0

    def test_pattern_rate(self, scalar_sys, scalar_bundle):
        sched = policies.PatternScheduler("100101010")
        assert sched.hbar == 3
        ctrl = policies.GamePredictiveController(scalar_sys, scalar_bundle)
        hits = sum(
            sched.decide(t=t, x=np.zeros(1), r=1, window_states=[],
                         window_controls=[], controller=ctrl)
            for t in range(9 * 4))
        assert hits == 4 * 4

    def test_pattern_validation(self):
        for bad in ("", "000", "012"):
            with pytest.raises(ValueError):
                policies.PatternScheduler(bad)

    def test_threshold_reduces_to_w_magnitude(self, scalar_sys, scalar_bundle):
        # scalar pair with cap 2: deciding at r=1 compares the previous
        # disturbance against the threshold
        k = scalar_bundle.k_gain
        ctrl = policies.HoldController(scalar_sys, k)
        sched = policies.ThresholdScheduler([[1.0]], rho=0.04, hbar=2)
        for w_prev, expect in ((0.21, 1), (0.1999, 0), (0.19, 0), (-0.25, 1)):
            ctrl.reset()
            u = ctrl.advance(np.array([1.0]))
            x_next = simcore.step(scalar_sys, np.array([1.0]), u, np.array([w_prev]))
            got = sched.decide(t=2, x=x_next, r=1, window_states=[np.array([1.0])],
                               window_controls=[u], controller=ctrl)
            assert got == expect

    def test_threshold_trigger_invariant_under_joint_scaling(self, scalar_sys, scalar_bundle):
        k = scalar_bundle.k_gain
        for c in (1.0, 7.5):
            ctrl = policies.HoldController(scalar_sys, k)
            sched = policies.ThresholdScheduler([[c * 1.0]], rho=c * 0.04, hbar=2)
            ctrl.reset()
            u = ctrl.advance(np.array([1.0]))
            x_next = simcore.step(scalar_sys, np.array([1.0]), u, np.array([0.21]))
            assert sched.decide(t=2, x=x_next, r=1, window_states=[np.array([1.0])],
                                window_controls=[u], controller=ctrl) == 1


class TestGValue:
    def test_zero_on_probing_manifold(self, scalar_sys, scalar_bundle):
        ctrl = policies.GamePredictiveController(scalar_sys, scalar_bundle)
        sched = policies.GameTriggerScheduler(scalar_sys, scalar_bundle, hbar=4)
        source = simcore.ProbingSource(scalar_bundle, eps=0.0)
        trace = simcore.run_closed_loop(scalar_sys, ctrl, sched, source,
                                        horizon=20, w0=np.array([1.0]))
        # transmissions only at t=1 and the forced cap
        gaps = np.diff(trace.transmission_times)
        assert np.all(gaps == 4)
        # direct evaluation on a manifold window
        s = trace.transmission_times[1]
        states = [trace.records[s].x, trace.records[s + 1].x, trace.records[s + 2].x]
        controls = [trace.records[s].u, trace.records[s + 1].u]
        g = policies.g_value(scalar_sys, scalar_bundle, states, controls)
        assert abs(g) <= 1e-9

    def test_scalar_trigger_coefficient(self, scalar_sys, scalar_bundle):
        # reparametrized one-step trigger: G(x, w) = coeff * (w - l(1+k)x)^2
        k = scalar_bundle.k_gain[0, 0]
        rt = scalar_bundle.u_weight[0, 0]
        gap = scalar_bundle.gap[0, 0]
        rng = np.random.default_rng(0)
        for _ in range(10):
            x_s = float(rng.normal())
            w = float(rng.normal())
            u_s = k * x_s
            x1 = x_s + u_s + w
            g = policies.g_value(scalar_sys, scalar_bundle,
                                 [np.array([x_s]), np.array([x1])],
                                 [np.array([u_s])])
            dev = w - scalar_bundle.l_gain[0, 0] * (x_s + u_s)
            coeff = k * rt * k + gap
            assert abs(g - coeff * dev * dev) <= 1e-9 * max(1.0, abs(g))
        assert abs(coeff - 18.0815) / 18.0815 < 1e-2

    def test_inverse_mode_matches_literal_weight(self, scalar_sys, scalar_bundle):
        k = scalar_bundle.k_gain[0, 0]
        x_s, w = 0.7, 0.9
        u_s = k * x_s
        x1 = x_s + u_s + w
        g = policies.g_value(scalar_sys, scalar_bundle,
                             [np.array([x_s]), np.array([x1])],
                             [np.array([u_s])], weight_mode="inverse")
        dev = w - scalar_bundle.l_gain[0, 0] * (x_s + u_s)
        coeff = k * scalar_bundle.u_weight[0, 0] * k - 1.0 / scalar_bundle.gap[0, 0]
        assert abs(g - coeff * dev * dev) <= 1e-9 * max(1.0, abs(g))

    def test_homogeneity(self, third_sys):
        bundle = riccati.make_bundle(third_sys, 14.0, h=4)
        rng = np.random.default_rng(1)
        x_s = rng.normal(size=3)
        u_s = rng.normal(size=1)
        w = rng.normal(size=3)
        x1 = simcore.step(third_sys, x_s, u_s, w)
        g1 = policies.g_value(third_sys, bundle, [x_s, x1], [u_s])
        alpha = 3.7
        g2 = policies.g_value(third_sys, bundle, [alpha * x_s, alpha * x1],
                              [alpha * u_s])
        assert abs(g2 - alpha ** 2 * g1) <= 1e-9 * max(1.0, abs(g2))

    def test_insufficient_history(self, scalar_sys, scalar_bundle):
        with pytest.raises(InsufficientHistory):
            policies.g_value(scalar_sys, scalar_bundle, [np.zeros(1)], [])


class TestDeadband:
    def make_loop(self, scalar_sys, scalar_bundle, eps_low=0.03):
        ctrl = policies.GamePredictiveController(scalar_sys, scalar_bundle)
        inner = policies.GameTriggerScheduler(scalar_sys, scalar_bundle, hbar=2)
        sched = policies.DeadbandWrappedScheduler(inner, scalar_sys, scalar_bundle,
                                                  eps_low=eps_low)
        loop = simcore.ClosedLoop(scalar_sys, ctrl, sched)
        loop.begin(np.zeros(1))
        return loop

    @pytest.mark.parametrize("eps", [0.0, 0.02, 0.03, -0.03])
    def test_suppresses_matching_kick(self, scalar_sys, scalar_bundle, eps):
        loop = self.make_loop(scalar_sys, scalar_bundle)
        x = np.array([1.0])
        sigma, u = loop.process(1, x)
        assert sigma == 1
        drift = scalar_sys.a @ x + scalar_sys.b @ u
        w = scalar_bundle.l_gain @ drift + eps * scalar_bundle.v_dir
        x2 = drift + w
        sigma2, _ = loop.process(2, x2)
        assert sigma2 == 0

    @pytest.mark.parametrize("eps", [0.0301, -0.05, 0.2])
    def test_defers_off_pattern(self, scalar_sys, scalar_bundle, eps):
        loop = self.make_loop(scalar_sys, scalar_bundle)
        x = np.array([1.0])
        sigma, u = loop.process(1, x)
        drift = scalar_sys.a @ x + scalar_sys.b @ u
        w = scalar_bundle.l_gain @ drift + eps * scalar_bundle.v_dir
        sigma2, _ = loop.process(2, drift + w)
        assert sigma2 == 1  # inner trigger fires on off-pattern deviations

    def test_cap_never_suppressed(self, scalar_sys, scalar_bundle):
        loop = self.make_loop(scalar_sys, scalar_bundle)
        x = np.array([1.0])
        sigma, u = loop.process(1, x)
        drift = scalar_sys.a @ x + scalar_sys.b @ u
        w = scalar_bundle.l_gain @ drift  # on-manifold forever
        x2 = drift + w
        sigma2, u2 = loop.process(2, x2)
        assert sigma2 == 0
        drift2 = scalar_sys.a @ x2 + scalar_sys.b @ u2
        x3 = drift2 + scalar_bundle.l_gain @ drift2
        sigma3, _ = loop.process(3, x3)
        assert sigma3 == 1  # elapsed hit the cap


class TestSnapshotRestore:
    def run_steps(self, loop, sysm, start_t, x, steps, rng):
        out = []
        for i in range(steps):
            sigma, u = loop.process(start_t + i, x)
            out.append((sigma, u.copy()))
            x = simcore.step(sysm, x, u, rng.normal(size=sysm.n) * 0.3)
        return out

    def test_bitwise_replay(self, third_sys):
        bundle = riccati.make_bundle(third_sys, 14.0, h=4)
        ctrl = policies.GamePredictiveController(third_sys, bundle)
        sched = policies.GameTriggerScheduler(third_sys, bundle, hbar=5)
        loop = simcore.ClosedLoop(third_sys, ctrl, sched)
        loop.begin(np.zeros(3))
        x = np.zeros(3)
        rng = np.random.default_rng(11)
        for t in range(6):
            sigma, u = loop.process(t, x)
            x = simcore.step(third_sys, x, u, rng.normal(size=3) * 0.3)
        snap = loop.snapshot()
        seq1 = self.run_steps(loop, third_sys, 6, x.copy(), 5, np.random.default_rng(5))
        loop.restore(snap)
        seq2 = self.run_steps(loop, third_sys, 6, x.copy(), 5, np.random.default_rng(5))
        for (s1, u1), (s2, u2) in zip(seq1, seq2):
            assert s1 == s2
            assert u1.tobytes() == u2.tobytes()

    def test_snapshot_at_init(self, scalar_sys):
        bundle = riccati.make_bundle(scalar_sys, GAMMA, h=1)
        ctrl = policies.GamePredictiveController(scalar_sys, bundle)
        sched = policies.PeriodicScheduler(2)
        loop = simcore.ClosedLoop(scalar_sys, ctrl, sched)
        loop.begin(np.zeros(1))
        snap = loop.snapshot()
        loop.process(1, np.array([1.0]))
        loop.restore(snap)
        sigma, u = loop.process(1, np.array([1.0]))
        assert sigma == 1 and u[0] == pytest.approx(bundle.k_gain[0, 0])

    def test_version_mismatch(self, scalar_sys):
        b1 = riccati.make_bundle(scalar_sys, GAMMA, h=1)
        b2 = riccati.make_bundle(scalar_sys, 1.6, h=1)
        loop1 = simcore.ClosedLoop(
            scalar_sys, policies.GamePredictiveController(scalar_sys, b1),
            policies.PeriodicScheduler(2))
        loop2 = simcore.ClosedLoop(
            scalar_sys, policies.GamePredictiveController(scalar_sys, b2),
            policies.PeriodicScheduler(2))
        loop1.begin(np.zeros(1))
        loop2.begin(np.zeros(1))
        with pytest.raises(VersionMismatch):
            loop2.restore(loop1.snapshot())


class TestGameTriggerPairing:
    def test_never_triggers_before_cap_on_manifold(self, scalar_sys, scalar_bundle):
        ctrl = policies.GamePredictiveController(scalar_sys, scalar_bundle)
        sched = policies.GameTriggerScheduler(scalar_sys, scalar_bundle, hbar=3)
        source = simcore.ProbingSource(scalar_bundle, eps=0.0)
        trace = simcore.run_closed_loop(scalar_sys, ctrl, sched, source,
                                        horizon=30, w0=np.array([1.0]))
        gaps = np.diff(trace.transmission_times)
        assert np.all(gaps == 3)

    def test_triggers_on_off_gamma_probing(self, scalar_sys, scalar_bundle):
        tilde = riccati.make_bundle(scalar_sys, 1.48, h=1)
        ctrl = policies.GamePredictiveController(scalar_sys, scalar_bundle)
        sched = policies.GameTriggerScheduler(scalar_sys, scalar_bundle, hbar=2)
        source = simcore.ProbingSource(tilde, eps=0.0)
        trace = simcore.run_closed_loop(scalar_sys, ctrl, sched, source,
                                        horizon=30, w0=np.array([1.0]))
        assert np.all(trace.sigma_array()[1:] == 1)
