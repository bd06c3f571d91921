"""Controller laws: droop, fitted droop, dual ascent, reference dispatch."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_orpf, two_bus_network
from voltvar.controllers import (
    DEFAULT_DEADBAND,
    ControllerObservation,
    DroopController,
    DroopCurve,
    MlDroopController,
    MlDroopCurve,
    NoController,
    OfoController,
    OfoState,
    OrpfController,
    default_droop_curve,
    droop_eval,
    make_controller,
    mldroop_step,
    ofo_step,
    orpf_solve,
)
from voltvar.grid import build_cigre_lv_residential
from voltvar.powerflow import Injections, SensitivityMatrix, solve


# ---------------------------------------------------------------------------
# Droop
# ---------------------------------------------------------------------------

CURVE = DroopCurve(v1=0.92, v2=0.98, v3=1.02, v4=1.08, q_max=40.0, q_min=-60.0)


class TestDroopCurve:
    def test_unordered_breakpoints_rejected(self):
        with pytest.raises(ValueError, match="ordered"):
            DroopCurve(1.0, 0.98, 1.02, 1.08, 10.0, -10.0)

    def test_box_must_bracket_zero(self):
        with pytest.raises(ValueError, match="bracket 0"):
            DroopCurve(0.92, 0.98, 1.02, 1.08, -5.0, -10.0)

    def test_five_cases(self):
        assert droop_eval(CURVE, 0.90) == 40.0
        assert droop_eval(CURVE, 0.92) == 40.0
        assert droop_eval(CURVE, 0.95) == pytest.approx(40.0 * (0.98 - 0.95) / 0.06)
        assert droop_eval(CURVE, 1.00) == 0.0
        assert droop_eval(CURVE, 1.05) == pytest.approx(-60.0 * (1.05 - 1.02) / 0.06)
        assert droop_eval(CURVE, 1.08) == -60.0
        assert droop_eval(CURVE, 1.20) == -60.0

    def test_continuous_on_fine_grid(self):
        vs = np.linspace(0.88, 1.12, 4801)
        qs = np.array([droop_eval(CURVE, v) for v in vs])
        dv = vs[1] - vs[0]
        max_slope = max(CURVE.q_max / (CURVE.v2 - CURVE.v1), -CURVE.q_min / (CURVE.v4 - CURVE.v3))
        assert np.max(np.abs(np.diff(qs))) <= max_slope * dv + 1e-9

    @given(
        vs=st.lists(st.floats(0.85, 1.15), min_size=4, max_size=4).map(sorted),
        q_max=st.floats(0.1, 100.0),
        q_min=st.floats(-100.0, -0.1),
        a=st.floats(0.8, 1.2),
        b=st.floats(0.8, 1.2),
    )
    @settings(max_examples=200)
    def test_monotone_and_bounded(self, vs, q_max, q_min, a, b):
        curve = DroopCurve(vs[0], vs[1], vs[2], vs[3], q_max, q_min)
        lo, hi = min(a, b), max(a, b)
        q_lo, q_hi = droop_eval(curve, lo), droop_eval(curve, hi)
        assert q_lo >= q_hi  # more voltage never means more injection
        for q in (q_lo, q_hi):
            assert q_min <= q <= q_max
        if vs[1] <= a <= vs[2]:
            assert droop_eval(curve, a) == 0.0

    def test_default_curve_anchors(self):
        c = default_droop_curve(-30.0, 20.0, 0.91, 1.09)
        assert c.v1 == 0.91
        assert c.v2 == 1.0 - DEFAULT_DEADBAND
        assert c.v3 == 1.0 + DEFAULT_DEADBAND
        assert c.v4 == 1.09
        assert c.q_max == 20.0 and c.q_min == -30.0
        # saturation exactly at the limits
        assert droop_eval(c, 0.91) == 20.0
        assert droop_eval(c, 1.09) == -30.0


# ---------------------------------------------------------------------------
# Fitted droop
# ---------------------------------------------------------------------------

ML_CURVE = MlDroopCurve(breakpoints=((0.95, 8.0), (1.0, 8.0), (1.05, -2.0), (1.10, -12.0)))


class TestMlDroopCurve:
    def test_needs_two_breakpoints(self):
        with pytest.raises(ValueError, match="two breakpoints"):
            MlDroopCurve(breakpoints=((1.0, 0.0),))

    def test_beta_range(self):
        for beta in (0.0, -0.1, 1.2):
            with pytest.raises(ValueError, match="beta"):
                MlDroopCurve(breakpoints=((0.9, 1.0), (1.1, -1.0)), beta=beta)

    def test_voltages_strictly_increasing(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            MlDroopCurve(breakpoints=((1.0, 1.0), (1.0, -1.0)))

    def test_box_from_end_ordinates(self):
        assert ML_CURVE.q_max == 8.0
        assert ML_CURVE.q_min == -12.0

    def test_eval_interpolates_and_clamps(self):
        assert ML_CURVE.eval(0.90) == 8.0  # below first knot
        assert ML_CURVE.eval(0.975) == 8.0  # flat segment
        assert ML_CURVE.eval(1.025) == pytest.approx(3.0)
        assert ML_CURVE.eval(1.20) == -12.0  # above last knot

    def test_json_round_trip(self):
        text = ML_CURVE.to_json(inverter_bus=16)
        doc = json.loads(text)
        assert set(doc) == {"inverter_bus", "breakpoints", "beta", "slope_floor"}
        bus, curve = MlDroopCurve.from_json(text)
        assert bus == 16
        assert curve == ML_CURVE


class TestMlDroopStep:
    def test_geometric_convergence_to_curve(self):
        v = 1.06
        target = ML_CURVE.eval(v)
        q = 0.0
        for k in range(1, 11):
            q = mldroop_step(ML_CURVE, q, v)
            expected = target * (1.0 - (1.0 - ML_CURVE.beta) ** k)
            assert q == pytest.approx(expected, abs=1e-12)
        assert abs(q - target) < 1e-6 * abs(target)

    def test_clamped_to_box(self):
        q = mldroop_step(ML_CURVE, 20.0, 0.95)  # raw = 0.2*20 + 0.8*8 = 10.4
        assert q == ML_CURVE.q_max

    @given(q_prev=st.floats(-12.0, 8.0), v=st.floats(0.85, 1.2))
    @settings(max_examples=100)
    def test_stays_in_box(self, q_prev, v):
        q = mldroop_step(ML_CURVE, q_prev, v)
        assert ML_CURVE.q_min <= q <= ML_CURVE.q_max


# ---------------------------------------------------------------------------
# Dual-ascent step
# ---------------------------------------------------------------------------

def _scalar_sensitivity(h_pu_per_kvar: float) -> SensitivityMatrix:
    return SensitivityMatrix(
        h=np.array([[h_pu_per_kvar]]),
        monitored_buses=(1,),
        inverter_buses=(1,),
        operating_point="test",
    )


WIDE = (np.array([-50.0]), np.array([50.0]))


class TestOfoStep:
    def test_hand_computed_overvoltage(self):
        # h = 0.2 p.u./p.u. on s_base 100; v exceeds 1.1 by 0.01, alpha 4.
        state = OfoState.fresh(_scalar_sensitivity(0.002), s_base_kva=100.0, alpha=4.0)
        obs = ControllerObservation(np.array([1.11]), 0.0)
        state, q = ofo_step(state, obs, WIDE, 0.9, 1.1)
        assert state.lambda_max[0] == pytest.approx(0.04)
        assert state.lambda_min[0] == 0.0
        assert q[0] == pytest.approx(-0.8)  # 0.2 * 0.04 p.u. -> kVAr
        # held violation integrates
        state, q = ofo_step(state, obs, WIDE, 0.9, 1.1)
        assert state.lambda_max[0] == pytest.approx(0.08)
        assert q[0] == pytest.approx(-1.6)

    def test_inside_band_stays_zero(self):
        state = OfoState.fresh(_scalar_sensitivity(0.002), s_base_kva=100.0)
        for v in (1.0, 1.05, 0.95, 1.1, 0.9):
            state, q = ofo_step(state, ControllerObservation(np.array([v]), 0.0), WIDE, 0.9, 1.1)
            assert q[0] == 0.0
            assert state.lambda_min[0] == 0.0 and state.lambda_max[0] == 0.0

    def test_box_projection(self):
        state = OfoState.fresh(_scalar_sensitivity(0.002), s_base_kva=100.0, alpha=4.0)
        limits = (np.array([-0.5]), np.array([0.5]))
        state, q = ofo_step(state, ControllerObservation(np.array([1.11]), 0.0), limits, 0.9, 1.1)
        assert q[0] == pytest.approx(-0.5)

    def test_undervoltage_mirror(self):
        state = OfoState.fresh(_scalar_sensitivity(0.002), s_base_kva=100.0, alpha=4.0)
        state, q = ofo_step(state, ControllerObservation(np.array([0.89]), 0.0), WIDE, 0.9, 1.1)
        assert state.lambda_min[0] == pytest.approx(0.04)
        assert q[0] == pytest.approx(0.8)

    def test_duals_decay_after_violation_clears(self):
        state = OfoState.fresh(_scalar_sensitivity(0.002), s_base_kva=100.0, alpha=4.0)
        state, _ = ofo_step(state, ControllerObservation(np.array([1.12]), 0.0), WIDE, 0.9, 1.1)
        lam = state.lambda_max[0]
        state, _ = ofo_step(state, ControllerObservation(np.array([1.09]), 0.0), WIDE, 0.9, 1.1)
        assert 0.0 <= state.lambda_max[0] < lam

    def test_shape_mismatches_rejected(self):
        state = OfoState.fresh(_scalar_sensitivity(0.002), s_base_kva=100.0)
        with pytest.raises(ValueError, match="observation"):
            ofo_step(state, ControllerObservation(np.array([1.0, 1.0]), 0.0), WIDE, 0.9, 1.1)
        with pytest.raises(ValueError, match="one entry per inverter"):
            ofo_step(
                state,
                ControllerObservation(np.array([1.0]), 0.0),
                (np.array([-1.0, -1.0]), np.array([1.0, 1.0])),
                0.9,
                1.1,
            )

    @given(vs=st.lists(st.floats(0.8, 1.2), min_size=1, max_size=20))
    @settings(max_examples=100)
    def test_duals_never_negative(self, vs):
        state = OfoState.fresh(_scalar_sensitivity(0.002), s_base_kva=100.0)
        for v in vs:
            state, q = ofo_step(state, ControllerObservation(np.array([v]), 0.0), WIDE, 0.9, 1.1)
            assert state.lambda_min[0] >= 0.0
            assert state.lambda_max[0] >= 0.0
            assert -50.0 <= q[0] <= 50.0


# ---------------------------------------------------------------------------
# Reference dispatch
# ---------------------------------------------------------------------------

class TestOrpfSolve:
    def test_no_violation_shortcut(self):
        net = two_bus_network(0.1, 0.06)
        w = Injections.zeros(net)
        q, status = orpf_solve(net, w)
        assert status == "optimal"
        np.testing.assert_array_equal(q, [0.0])

    def test_single_inverter_matches_brute_force(self):
        net = two_bus_network(0.1, 0.06, v_max=1.02)
        w = Injections.zeros(net)
        w.p[1] = 60.0  # overvoltage of ~1.7% at the PV bus
        q, status = orpf_solve(net, w)
        assert status == "optimal"
        q_bf, obj_bf = brute_force_orpf(net, w, resolution_kvar=0.1)
        obj = 0.5 * float(q @ q)
        assert obj == pytest.approx(obj_bf, rel=0.01)
        assert q[0] == pytest.approx(q_bf[0], abs=0.1)
        # solution is genuinely feasible on the true power flow
        inj = w.copy()
        inj.q[1] += q[0]
        sol = solve(net, inj)
        assert sol.converged
        assert sol.v_mag[1] <= net.v_max + 1e-6

    def test_infeasible_reports_fallback(self):
        net = two_bus_network(0.1, 0.06, q_cap=1.0, v_max=1.01)
        w = Injections.zeros(net)
        w.p[1] = 80.0
        q, status = orpf_solve(net, w)
        assert status == "infeasible-fallback"
        # best effort: full absorption at the box edge
        assert q[0] == pytest.approx(-1.0, abs=1e-6)

    def test_respects_explicit_limits(self):
        net = two_bus_network(0.1, 0.06, v_max=1.02)
        w = Injections.zeros(net)
        w.p[1] = 60.0
        tight = (np.array([-5.0]), np.array([5.0]))
        q, status = orpf_solve(net, w, limits=tight)
        assert -5.0 - 1e-9 <= q[0] <= 5.0 + 1e-9


# ---------------------------------------------------------------------------
# Controller engine classes
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def feeder():
    return build_cigre_lv_residential()


class TestControllerClasses:
    def test_none_returns_zeros(self, feeder):
        ctrl = NoController(feeder)
        q = ctrl.step(ControllerObservation(np.ones(5), 0.0))
        np.testing.assert_array_equal(q, np.zeros(5))
        assert ctrl.name == "none"

    def test_droop_default_curves_anchor_limits(self, feeder):
        ctrl = DroopController(feeder)
        assert len(ctrl.curves) == 5
        for curve, inv in zip(ctrl.curves, feeder.inverters):
            assert curve.v1 == feeder.v_min
            assert curve.v4 == feeder.v_max
            assert curve.q_max == inv.q_max
            assert curve.q_min == inv.q_min

    def test_droop_uses_own_bus_voltage(self, feeder):
        ctrl = DroopController(feeder)
        v = np.full(5, 1.0)
        v[2] = feeder.v_max  # third inverter saturates, others idle
        q = ctrl.step(ControllerObservation(v, 0.0))
        assert q[2] == feeder.inverters[2].q_min
        assert all(q[i] == 0.0 for i in (0, 1, 3, 4))

    def test_droop_curve_count_enforced(self, feeder):
        with pytest.raises(ValueError, match="one droop curve per inverter"):
            DroopController(feeder, curves=[CURVE])

    def test_mldroop_memory_and_reset(self, feeder):
        curves = [ML_CURVE] * 5
        ctrl = MlDroopController(feeder, curves)
        obs = ControllerObservation(np.full(5, 1.06), 0.0)
        q1 = ctrl.step(obs)
        q2 = ctrl.step(obs)
        assert abs(q2[0] - ML_CURVE.eval(1.06)) < abs(q1[0] - ML_CURVE.eval(1.06))
        ctrl.reset()
        np.testing.assert_array_equal(ctrl.q_prev, np.zeros(5))
        np.testing.assert_array_equal(ctrl.step(obs), q1)

    def test_ofo_monitors_inverter_buses(self, feeder):
        ctrl = OfoController(feeder)
        assert ctrl.monitored == tuple(feeder.inverter_buses)

    def test_ofo_reset_restores_first_step(self, feeder):
        ctrl = OfoController(feeder)
        obs = ControllerObservation(np.full(5, feeder.v_max + 0.01), 0.0)
        q1 = ctrl.step(obs)
        ctrl.step(obs)
        ctrl.reset()
        np.testing.assert_array_equal(ctrl.step(obs), q1)

    def test_orpf_requires_injections(self, feeder):
        ctrl = OrpfController(feeder)
        with pytest.raises(ValueError, match="injection"):
            ctrl.step(ControllerObservation(np.ones(5), 0.0))

    def test_orpf_caches_per_injection(self, feeder, monkeypatch):
        import voltvar.controllers as mod

        calls = []
        real = mod.orpf_solve

        def counting(network, w, **kwargs):
            calls.append(1)
            return real(network, w, **kwargs)

        monkeypatch.setattr(mod, "orpf_solve", counting)
        ctrl = OrpfController(feeder)
        w = Injections.zeros(feeder)
        obs = ControllerObservation(np.ones(5), 0.0)
        q_a = ctrl.step(obs, w=w)
        ctrl.step(obs, w=w)
        assert len(calls) == 1  # unchanged injections reuse the dispatch
        w2 = w.copy()
        w2.p[16] = 120.0
        ctrl.step(obs, w=w2)
        assert len(calls) == 2
        q_a[0] = 99.0  # caller mutation must not poison the cache
        assert ctrl.step(obs, w=w)[0] != 99.0
        assert len(calls) == 3  # w changed back, solved again


class TestMakeController:
    def test_kinds(self, feeder):
        assert isinstance(make_controller(feeder, "none"), NoController)
        assert isinstance(make_controller(feeder, "droop"), DroopController)
        assert isinstance(make_controller(feeder, "ofo", {"h_source": "identity"}), OfoController)
        assert isinstance(make_controller(feeder, "orpf"), OrpfController)

    def test_unknown_kind(self, feeder):
        with pytest.raises(ValueError, match="unknown controller"):
            make_controller(feeder, "bang-bang")

    def test_mldroop_requires_curves(self, feeder):
        with pytest.raises(ValueError, match="fitted curves"):
            make_controller(feeder, "mldroop")
        ctrl = make_controller(feeder, "mldroop", {"curves": [ML_CURVE] * 5})
        assert isinstance(ctrl, MlDroopController)

    def test_ofo_identity_h(self, feeder):
        ctrl = make_controller(feeder, "ofo", {"h_source": "identity"})
        np.testing.assert_allclose(ctrl.h.h, np.eye(5) / feeder.s_base)

    def test_droop_deadband_option(self, feeder):
        ctrl = make_controller(feeder, "droop", {"deadband": 0.05})
        assert ctrl.curves[0].v2 == pytest.approx(0.95)
        assert ctrl.curves[0].v3 == pytest.approx(1.05)
