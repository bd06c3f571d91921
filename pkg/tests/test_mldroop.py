"""Training-data pipeline and constrained curve fitting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import two_bus_network
from voltvar.controllers import MlDroopCurve
from voltvar.grid import build_cigre_lv_residential
from voltvar.mldroop import (
    GRID_MARGIN,
    N_BREAKPOINTS,
    TrainingSet,
    check_curve,
    fit_all,
    fit_curve,
    generate_training_data,
    load_curves,
    save_curves,
)
from voltvar.powerflow import solve
from voltvar.profiles import ProfileSet


# ---------------------------------------------------------------------------
# TrainingSet container and CSV
# ---------------------------------------------------------------------------

def small_training_set() -> TrainingSet:
    return TrainingSet(
        timestamps=np.array([0, 0, 60, 60], dtype=np.int64),
        inverter_bus=np.array([1, 2, 1, 2], dtype=np.int64),
        v_pu=np.array([1.01, 1.02, 1.05, 1.06]),
        q_kvar=np.array([0.0, -1.0, -4.0, -5.5]),
    )


class TestTrainingSet:
    def test_column_lengths_checked(self):
        with pytest.raises(ValueError, match="equal length"):
            TrainingSet(
                np.array([0], dtype=np.int64),
                np.array([1, 2], dtype=np.int64),
                np.array([1.0]),
                np.array([0.0]),
            )

    def test_pairs_for_filters_by_bus(self):
        ts = small_training_set()
        v, q = ts.pairs_for(2)
        np.testing.assert_array_equal(v, [1.02, 1.06])
        np.testing.assert_array_equal(q, [-1.0, -5.5])
        v_none, q_none = ts.pairs_for(7)
        assert len(v_none) == 0 and len(q_none) == 0

    def test_csv_round_trip_exact(self):
        ts = small_training_set()
        text = ts.to_csv()
        back = TrainingSet.from_csv(text)
        np.testing.assert_array_equal(back.timestamps, ts.timestamps)
        np.testing.assert_array_equal(back.inverter_bus, ts.inverter_bus)
        np.testing.assert_array_equal(back.v_pu, ts.v_pu)
        np.testing.assert_array_equal(back.q_kvar, ts.q_kvar)
        assert back.to_csv() == text

    def test_header_enforced(self):
        with pytest.raises(ValueError, match="header"):
            TrainingSet.from_csv("time,bus,v,q\n0,1,1.0,0.0\n")

    def test_field_count_error_carries_line_number(self):
        text = "timestamp,inverter_bus,v_pu,q_kvar\n0,1,1.0,0.0\n60,1,1.0\n"
        with pytest.raises(ValueError, match="line 3"):
            TrainingSet.from_csv(text)

    def test_bad_number_error_carries_line_number(self):
        text = "timestamp,inverter_bus,v_pu,q_kvar\n0,1,one,0.0\n"
        with pytest.raises(ValueError, match="line 2"):
            TrainingSet.from_csv(text)


# ---------------------------------------------------------------------------
# Curve fitting
# ---------------------------------------------------------------------------

V_MIN, V_MAX = 0.95, 1.05
Q_BOX = (-10.0, 8.0)
KNOTS = np.linspace(V_MIN - GRID_MARGIN, V_MAX + GRID_MARGIN, N_BREAKPOINTS)


def truth_curve() -> MlDroopCurve:
    # Constraint-satisfying ground truth on the fitter's own knot grid. End
    # pairs are flat so the interpolant hits the box values exactly at the
    # limits (the knots extend GRID_MARGIN past them).
    ys = [8.0, 8.0, 6.0, 3.0, 0.0, -4.0, -10.0, -10.0, -10.0]
    return MlDroopCurve(breakpoints=tuple(zip(KNOTS.tolist(), ys)))


class TestFitCurve:
    def test_synthesize_and_recover(self):
        truth = truth_curve()
        rng = np.random.default_rng(7)
        v_s = rng.uniform(KNOTS[0], KNOTS[-1], 600)
        q_s = np.array([truth.eval(v) for v in v_s])
        fitted = fit_curve(np.column_stack([v_s, q_s]), Q_BOX, V_MIN, V_MAX)
        grid = np.linspace(KNOTS[0], KNOTS[-1], 241)
        err = np.array([fitted.eval(v) - truth.eval(v) for v in grid])
        assert float(np.sqrt(np.mean(err**2))) < 1e-6

    def test_forced_endpoints_exact(self):
        rng = np.random.default_rng(11)
        v_s = rng.uniform(0.94, 1.06, 200)
        q_s = -40.0 * (v_s - 1.0)  # generic decreasing cloud
        fitted = fit_curve(np.column_stack([v_s, q_s]), Q_BOX, V_MIN, V_MAX)
        assert fitted.eval(V_MIN) == pytest.approx(Q_BOX[1], abs=1e-9)
        assert fitted.eval(V_MAX) == pytest.approx(Q_BOX[0], abs=1e-9)
        assert check_curve(fitted, Q_BOX, V_MIN, V_MAX) == []

    def test_step_target_saturates_slope_floor(self):
        # A near-discontinuous target cannot be matched: the fit must spread
        # the drop across segments at the slope floor instead.
        floor = -300.0
        rng = np.random.default_rng(13)
        v_s = rng.uniform(0.94, 1.06, 500)
        q_s = np.where(v_s < 1.0, Q_BOX[1], Q_BOX[0])
        fitted = fit_curve(np.column_stack([v_s, q_s]), Q_BOX, V_MIN, V_MAX, slope_floor=floor)
        xs = np.array([p[0] for p in fitted.breakpoints])
        ys = np.array([p[1] for p in fitted.breakpoints])
        slopes = np.diff(ys) / np.diff(xs)
        assert np.all(slopes >= floor - 1e-6)
        assert np.all(slopes <= 1e-6)
        assert np.min(slopes) == pytest.approx(floor, abs=1e-3)
        assert check_curve(fitted, Q_BOX, V_MIN, V_MAX) == []

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        pairs = np.column_stack([rng.uniform(0.94, 1.06, 100), rng.uniform(-10, 8, 100)])
        a = fit_curve(pairs, Q_BOX, V_MIN, V_MAX)
        b = fit_curve(pairs.copy(), Q_BOX, V_MIN, V_MAX)
        assert a.breakpoints == b.breakpoints

    def test_input_validation(self):
        good = np.array([[1.0, 0.0], [1.01, -1.0]])
        with pytest.raises(ValueError, match="at least one"):
            fit_curve(np.empty((0, 2)), Q_BOX, V_MIN, V_MAX)
        with pytest.raises(ValueError, match=r"\(n, 2\)"):
            fit_curve(np.array([1.0, 0.0, 1.01]), Q_BOX, V_MIN, V_MAX)
        with pytest.raises(ValueError, match="distinct voltage"):
            fit_curve(np.array([[1.0, 0.0], [1.0, -1.0]]), Q_BOX, V_MIN, V_MAX)
        with pytest.raises(ValueError, match="bracket 0"):
            fit_curve(good, (2.0, 8.0), V_MIN, V_MAX)
        with pytest.raises(ValueError, match="slope_floor"):
            fit_curve(good, Q_BOX, V_MIN, V_MAX, slope_floor=0.0)

    @given(
        seed=st.integers(0, 10_000),
        n=st.integers(5, 60),
        q_hi=st.floats(0.5, 20.0),
        q_lo=st.floats(-20.0, -0.5),
    )
    @settings(max_examples=60, deadline=None)
    def test_fit_always_satisfies_constraints(self, seed, n, q_hi, q_lo):
        rng = np.random.default_rng(seed)
        v_s = rng.uniform(0.94, 1.06, n)
        if len(np.unique(v_s)) < 2:
            return
        q_s = rng.uniform(q_lo, q_hi, n)
        fitted = fit_curve(np.column_stack([v_s, q_s]), (q_lo, q_hi), V_MIN, V_MAX)
        assert check_curve(fitted, (q_lo, q_hi), V_MIN, V_MAX) == []


class TestCheckCurve:
    def test_clean_curve_passes(self):
        assert check_curve(truth_curve(), Q_BOX, V_MIN, V_MAX) == []

    def test_positive_slope_detected(self):
        bad = MlDroopCurve(breakpoints=((0.94, 8.0), (1.0, 8.5), (1.06, -10.0)))
        msgs = check_curve(bad, Q_BOX, V_MIN, V_MAX)
        assert any("positive segment slope" in m for m in msgs)

    def test_slope_floor_breach_detected(self):
        bad = MlDroopCurve(
            breakpoints=((0.94, 8.0), (0.9401, -10.0), (1.06, -10.0)),
            slope_floor=-1500.0,
        )
        msgs = check_curve(bad, Q_BOX, V_MIN, V_MAX)
        assert any("slope below floor" in m for m in msgs)

    def test_box_breach_detected(self):
        bad = MlDroopCurve(breakpoints=((0.94, 12.0), (1.06, -10.0)))
        msgs = check_curve(bad, Q_BOX, V_MIN, V_MAX)
        assert any("outside the reactive box" in m for m in msgs)

    def test_endpoint_misses_detected(self):
        bad = MlDroopCurve(breakpoints=((0.94, 5.0), (1.06, -5.0)))
        msgs = check_curve(bad, Q_BOX, V_MIN, V_MAX)
        assert any("misses (v_min" in m for m in msgs)
        assert any("misses (v_max" in m for m in msgs)


# ---------------------------------------------------------------------------
# fit_all / persistence
# ---------------------------------------------------------------------------

def feeder_training_set(network) -> TrainingSet:
    # Synthetic per-bus clouds from simple box-respecting lines; no dispatch
    # solves needed to exercise fit_all and the file round trip.
    rng = np.random.default_rng(21)
    ts, bus, vv, qq = [], [], [], []
    for inv in network.inverters:
        v_s = rng.uniform(network.v_min, network.v_max, 80)
        span = network.v_max - network.v_min
        frac = (v_s - network.v_min) / span
        q_s = inv.q_max + frac * (inv.q_min - inv.q_max)
        for k, (v, q) in enumerate(zip(v_s, q_s)):
            ts.append(60 * k)
            bus.append(inv.bus)
            vv.append(float(v))
            qq.append(float(q))
    return TrainingSet(
        np.array(ts, dtype=np.int64),
        np.array(bus, dtype=np.int64),
        np.array(vv),
        np.array(qq),
    )


class TestFitAllAndFiles:
    def test_fit_all_and_file_round_trip(self, tmp_path):
        network = build_cigre_lv_residential()
        training = feeder_training_set(network)
        curves = fit_all(network, training)
        assert len(curves) == len(network.inverters)
        for curve, inv in zip(curves, network.inverters):
            assert check_curve(curve, (inv.q_min, inv.q_max), network.v_min, network.v_max) == []

        paths = save_curves(tmp_path, network, curves)
        names = sorted(p.name for p in paths)
        assert names == sorted(f"curve_bus_{inv.bus}.json" for inv in network.inverters)
        loaded = load_curves(tmp_path, network)
        assert loaded == curves

    def test_fit_all_missing_bus_rejected(self):
        network = build_cigre_lv_residential()
        training = small_training_set()  # buses 1 and 2 only
        with pytest.raises(ValueError, match="no training pairs"):
            fit_all(network, training)

    def test_load_curves_missing_file(self, tmp_path):
        network = build_cigre_lv_residential()
        with pytest.raises(FileNotFoundError, match=r"\[11, 15, 16, 17, 18\]"):
            load_curves(tmp_path, network)


# ---------------------------------------------------------------------------
# Training-data generation
# ---------------------------------------------------------------------------

class TestGenerateTrainingData:
    def test_two_bus_sweep(self):
        net = two_bus_network(0.1, 0.06, v_max=1.02)
        n = 6
        pv = np.linspace(0.0, 70.0, n)  # benign through clearly violating
        profiles = ProfileSet(
            timestamps=np.arange(n, dtype=np.int64) * 60,
            buses=[1],
            p_load_kw=np.zeros((n, 1)),
            p_pv_kw=pv.reshape(-1, 1),
        )
        training = generate_training_data(net, profiles)
        assert training.skipped_steps == 0
        assert len(training) == n
        np.testing.assert_array_equal(training.inverter_bus, np.ones(n, dtype=np.int64))

        # benign steps keep q at zero, violating steps absorb
        assert training.q_kvar[0] == 0.0
        assert training.q_kvar[-1] < -1.0
        # recorded voltage must be the post-dispatch value and feasible
        assert np.all(training.v_pu <= net.v_max + 1e-6)

        # spot check: re-running the power flow reproduces the stored voltage
        k = n - 1
        w = profiles.injections_at(net, k)
        w.q[1] += training.q_kvar[k]
        sol = solve(net, w)
        assert sol.v_mag[1] == pytest.approx(training.v_pu[k], abs=1e-12)

    def test_monotone_absorption_with_pv(self):
        net = two_bus_network(0.1, 0.06, v_max=1.02)
        n = 8
        pv = np.linspace(40.0, 75.0, n)
        profiles = ProfileSet(
            timestamps=np.arange(n, dtype=np.int64) * 60,
            buses=[1],
            p_load_kw=np.zeros((n, 1)),
            p_pv_kw=pv.reshape(-1, 1),
        )
        training = generate_training_data(net, profiles)
        q = training.q_kvar
        assert np.all(np.diff(q) <= 1e-6)  # more PV never means less absorption
