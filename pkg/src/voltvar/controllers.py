"""Volt/VAr control laws: piecewise droop, ML-tuned droop, online feedback
optimization (OFO), and the reactive-dispatch reference solver.

All four controllers share one cadence contract: observe voltages, emit one
reactive setpoint per inverter. Droop variants are strictly local (each
inverter sees only its own bus), OFO sees all monitored buses, and the
reference solver additionally receives the full uncontrolled injections.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .grid import Network
from .powerflow import (
    Injections,
    PowerFlowError,
    SensitivityMatrix,
    identity_sensitivity,
    sensitivity,
    solve,
)
from .qp import project_box, solve_box_qp

__all__ = [
    "DroopCurve",
    "MlDroopCurve",
    "OfoState",
    "ControllerObservation",
    "droop_eval",
    "mldroop_step",
    "ofo_step",
    "orpf_solve",
    "default_droop_curve",
    "DEFAULT_ALPHA",
    "DEFAULT_BETA",
    "DEFAULT_DEADBAND",
    "DEFAULT_SLOPE_FLOOR",
    "NoController",
    "DroopController",
    "MlDroopController",
    "OfoController",
    "OrpfController",
    "make_controller",
]

DEFAULT_ALPHA = 4.0  # dual step size, p.u. q per p.u. voltage violation
DEFAULT_BETA = 0.8  # ML-droop low-pass smoothing factor
DEFAULT_DEADBAND = 0.03  # droop deadband half-width, p.u. voltage around 1.0

# Most-negative allowed ML-droop slope, kVAr per p.u. voltage. -4.5 kVAr per
# volt at the 400 V base would be -1800; the default is slightly tighter so
# the filtered closed loop stays stable for the benchmark feeder, where
# lambda_max(H) is 0.40 p.u./p.u.: |(1-beta) - beta*|s|*lambda_max| < 1
# requires |s| below (2-beta)/(beta*0.40) p.u./p.u. ~= 1880 kVAr/p.u.
DEFAULT_SLOPE_FLOOR = -1500.0


# ---------------------------------------------------------------------------
# Droop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DroopCurve:
    """Piecewise-linear Volt/VAr droop with a deadband.

    q_max below v1, ramp to zero on [v1, v2], deadband on [v2, v3], ramp to
    q_min on [v3, v4], q_min above v4.
    """

    v1: float
    v2: float
    v3: float
    v4: float
    q_max: float
    q_min: float

    def __post_init__(self):
        if not (self.v1 <= self.v2 <= self.v3 <= self.v4):
            raise ValueError(f"droop breakpoints must be ordered: {self.v1}, {self.v2}, {self.v3}, {self.v4}")
        if not (self.q_min <= 0.0 <= self.q_max):
            raise ValueError(f"droop q_min {self.q_min} .. q_max {self.q_max} must bracket 0")


def droop_eval(curve: DroopCurve, v: float) -> float:
    """Evaluate the five-case droop map at voltage v (p.u.)."""
    # Deadband first so it wins at breakpoint collisions (zero-width ramps);
    # the remaining ramp branches then cannot divide by zero.
    if curve.v2 <= v <= curve.v3:
        return 0.0
    if v <= curve.v1:
        return curve.q_max
    if v < curve.v2:
        return curve.q_max * (curve.v2 - v) / (curve.v2 - curve.v1)
    if v < curve.v4:
        return curve.q_min * (v - curve.v3) / (curve.v4 - curve.v3)
    return curve.q_min


def default_droop_curve(
    q_min: float,
    q_max: float,
    v_min: float,
    v_max: float,
    deadband: float = DEFAULT_DEADBAND,
) -> DroopCurve:
    """Default droop parametrization anchored to the grid voltage limits.

    Saturation is reached exactly at the limits (v1 = v_min, v4 = v_max), with
    a symmetric deadband around nominal. This mirrors the forced endpoints of
    the ML-tuned curves: full reactive power exactly when a limit is hit.
    """
    return DroopCurve(v_min, 1.0 - deadband, 1.0 + deadband, v_max, q_max, q_min)


# ---------------------------------------------------------------------------
# ML-tuned droop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlDroopCurve:
    """Fitted piecewise-linear Volt/VAr curve with low-pass filtered tracking.

    ``breakpoints`` are (v p.u., q kVAr) knots with non-increasing ordinates;
    every segment slope lies in [slope_floor, 0]. The end ordinates double as
    the reactive box: the fit pins the first knot at q_max and the last at
    q_min, and evaluation holds those values outside the knot range.
    """

    breakpoints: tuple[tuple[float, float], ...]
    beta: float = DEFAULT_BETA
    slope_floor: float = DEFAULT_SLOPE_FLOOR

    def __post_init__(self):
        if len(self.breakpoints) < 2:
            raise ValueError("curve needs at least two breakpoints")
        if not (0.0 < self.beta <= 1.0):
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")
        vs = [v for v, _ in self.breakpoints]
        if any(b <= a for a, b in zip(vs, vs[1:])):
            raise ValueError("breakpoint voltages must be strictly increasing")

    @property
    def q_max(self) -> float:
        return max(q for _, q in self.breakpoints)

    @property
    def q_min(self) -> float:
        return min(q for _, q in self.breakpoints)

    def eval(self, v: float) -> float:
        xs = np.array([p[0] for p in self.breakpoints])
        ys = np.array([p[1] for p in self.breakpoints])
        return float(np.interp(v, xs, ys))

    def to_json(self, inverter_bus: int) -> str:
        doc = {
            "inverter_bus": inverter_bus,
            "breakpoints": [[v, q] for v, q in self.breakpoints],
            "beta": self.beta,
            "slope_floor": self.slope_floor,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> tuple[int, "MlDroopCurve"]:
        doc = json.loads(text)
        curve = cls(
            breakpoints=tuple((float(v), float(q)) for v, q in doc["breakpoints"]),
            beta=float(doc["beta"]),
            slope_floor=float(doc["slope_floor"]),
        )
        return int(doc["inverter_bus"]), curve


def mldroop_step(curve: MlDroopCurve, q_prev: float, v: float) -> float:
    """One filtered ML-droop update: q = (1-beta) q_prev + beta f(v), clamped."""
    q_raw = (1.0 - curve.beta) * q_prev + curve.beta * curve.eval(v)
    return float(np.clip(q_raw, curve.q_min, curve.q_max))


# ---------------------------------------------------------------------------
# Online feedback optimization
# ---------------------------------------------------------------------------

@dataclass
class ControllerObservation:
    """Voltage measurements handed to a controller at one sub-step."""

    v_mag: NDArray[np.float64]
    timestamp: float


@dataclass
class OfoState:
    """Dual-ascent controller state: one dual pair per monitored bus.

    Duals live in per-unit (voltage in p.u., reactive power in p.u. on
    ``s_base_kva``); ``h`` keeps the p.u.-per-kVAr units of the sensitivity
    module and is rescaled internally.
    """

    lambda_min: NDArray[np.float64]
    lambda_max: NDArray[np.float64]
    alpha: float
    h: SensitivityMatrix
    q_prev: NDArray[np.float64]
    s_base_kva: float = 1.0

    @classmethod
    def fresh(cls, h: SensitivityMatrix, s_base_kva: float, alpha: float = DEFAULT_ALPHA) -> "OfoState":
        m, n = h.h.shape
        return cls(np.zeros(m), np.zeros(m), alpha, h, np.zeros(n), s_base_kva)


def ofo_step(
    state: OfoState,
    obs: ControllerObservation,
    limits: tuple[NDArray[np.float64], NDArray[np.float64]],
    v_min: float,
    v_max: float,
) -> tuple[OfoState, NDArray[np.float64]]:
    """One OFO iteration: integrate violations into the duals, project.

    The duals accumulate alpha-weighted violations of each monitored bus
    against [v_min, v_max] and are clipped to stay nonnegative. The
    unconstrained target H'(lambda_min - lambda_max) is then clamped onto the
    reactive-capability box (its exact Euclidean projection). Inputs/outputs
    are kVAr; internally everything is per-unit on ``state.s_base_kva``.
    """
    v = np.asarray(obs.v_mag, dtype=float)
    if v.shape != state.lambda_min.shape:
        raise ValueError(f"observation covers {v.shape} buses, state expects {state.lambda_min.shape}")
    q_lo, q_hi = limits
    q_lo = np.asarray(q_lo, dtype=float)
    q_hi = np.asarray(q_hi, dtype=float)
    if q_lo.shape != state.q_prev.shape or q_hi.shape != state.q_prev.shape:
        raise ValueError("limit vectors must have one entry per inverter")

    lam_min = np.maximum(state.lambda_min + state.alpha * (v_min - v), 0.0)
    lam_max = np.maximum(state.lambda_max + state.alpha * (v - v_max), 0.0)

    h_pu = state.h.h * state.s_base_kva  # p.u. volt per p.u. reactive power
    q_unc_pu = h_pu.T @ (lam_min - lam_max)
    q_pu = project_box(q_unc_pu, q_lo / state.s_base_kva, q_hi / state.s_base_kva)
    q_kvar = q_pu * state.s_base_kva

    new_state = dataclasses.replace(state, lambda_min=lam_min, lambda_max=lam_max, q_prev=q_kvar)
    return new_state, q_kvar


# ---------------------------------------------------------------------------
# Reference reactive dispatch (minimum-norm q subject to voltage limits)
# ---------------------------------------------------------------------------

def orpf_solve(
    network: Network,
    w: Injections,
    limits: tuple[NDArray[np.float64], NDArray[np.float64]] | None = None,
    v_min: float | None = None,
    v_max: float | None = None,
    q0: NDArray[np.float64] | None = None,
    outer_tol_kvar: float = 1e-3,
    residual_tol: float = 1e-9,
    max_outer: int = 20,
    trust_ratio: float = 0.2,
    delta_q: float = 1.0,
) -> tuple[NDArray[np.float64], str]:
    """Minimize 0.5 q'q subject to monitored-bus voltage limits and the box.

    Successive linearization: at each iterate the sensitivity matrix is
    recomputed at the current operating point and the box-constrained
    quadratic subproblem (with a trust region of ``trust_ratio`` times the box
    width) is solved by dual ascent. Iteration stops once q moves less than
    ``outer_tol_kvar`` and the true power-flow violation of the monitored
    constraints is below ``residual_tol``.

    If even full box deployment cannot satisfy the linearized constraints, the
    fallback minimizes the total linearized violation over the box (full
    absorption in the plain overvoltage case) and the status is
    ``infeasible-fallback``; otherwise ``optimal``.
    """
    inv_buses = np.array(network.inverter_buses)
    if limits is None:
        q_min_box = np.array([inv.q_min for inv in network.inverters])
        q_max_box = np.array([inv.q_max for inv in network.inverters])
    else:
        q_min_box = np.asarray(limits[0], dtype=float)
        q_max_box = np.asarray(limits[1], dtype=float)
    v_lo = network.v_min if v_min is None else v_min
    v_hi = network.v_max if v_max is None else v_max

    def pf_at(q_kvar):
        inj = w.copy()
        inj.q[inv_buses] += q_kvar
        sol = solve(network, inj)
        if not sol.converged:
            raise PowerFlowError("reactive dispatch: power flow diverged during iteration")
        return sol, inj

    sol0, _ = pf_at(np.zeros(len(inv_buses)))
    v0 = sol0.v_mag[inv_buses]
    if np.all(v0 <= v_hi) and np.all(v0 >= v_lo):
        return np.zeros(len(inv_buses)), "optimal"

    q = np.zeros(len(inv_buses)) if q0 is None else np.asarray(q0, dtype=float).copy()
    q = project_box(q, q_min_box, q_max_box)
    trust = trust_ratio * (q_max_box - q_min_box)

    sol, inj = pf_at(q)
    for outer in range(1, 2 * max_outer + 1):
        sens = sensitivity(network, inj, delta_q=delta_q)
        h_mat = sens.h  # p.u. per kVAr, rows = inverter buses
        v_cur = sol.v_mag[inv_buses]
        v_off = v_cur - h_mat @ q  # linearized voltage at q = 0

        # Feasibility of the linearization over the full box: H >= 0, so the
        # per-row extremes sit at the box corners.
        v_lowest = v_off + h_mat @ q_min_box
        v_highest = v_off + h_mat @ q_max_box
        if np.any(v_lowest > v_hi + residual_tol) or np.any(v_highest < v_lo - residual_tol):
            q_fb = _violation_fallback(h_mat, v_off, v_lo, v_hi, q_min_box, q_max_box)
            return q_fb, "infeasible-fallback"

        lb = np.maximum(q_min_box, q - trust)
        ub = np.minimum(q_max_box, q + trust)
        sub = solve_box_qp(h_mat, v_off, np.full(len(v_off), v_lo), np.full(len(v_off), v_hi), lb, ub)
        dq = float(np.max(np.abs(sub.q - q)))
        q = sub.q
        sol, inj = pf_at(q)
        v_true = sol.v_mag[inv_buses]
        true_resid = float(max(np.max(v_true - v_hi, initial=0.0), np.max(v_lo - v_true, initial=0.0)))
        if dq < outer_tol_kvar and true_resid <= residual_tol and outer >= 2:
            break
    return q, "optimal"


def _violation_fallback(h_mat, v_off, v_lo, v_hi, q_min_box, q_max_box):
    """Minimize total linearized violation over the box (projected subgradient)."""
    over = v_off + h_mat @ q_min_box > v_hi  # rows still violated at full absorption
    under = v_off + h_mat @ q_max_box < v_lo
    if np.any(over) and not np.any(under):
        return q_min_box.copy()
    if np.any(under) and not np.any(over):
        return q_max_box.copy()

    q = project_box(np.zeros(len(q_min_box)), q_min_box, q_max_box)
    hht = float(np.linalg.eigvalsh(h_mat @ h_mat.T)[-1])
    step = 1.0 / max(hht, 1e-12)
    for _ in range(500):
        v = v_off + h_mat @ q
        grad = h_mat.T @ ((v > v_hi).astype(float) - (v < v_lo).astype(float))
        q = project_box(q - step * grad, q_min_box, q_max_box)
    return q


# ---------------------------------------------------------------------------
# Engine-facing controller objects
# ---------------------------------------------------------------------------

class NoController:
    """Baseline: zero reactive power at all times."""

    name = "none"

    def __init__(self, network: Network):
        self.n = len(network.inverters)

    def reset(self) -> None:
        pass

    def step(self, obs: ControllerObservation, w: Injections | None = None, substep: int = 0):
        return np.zeros(self.n)


class DroopController:
    """Stateless local droop: one curve per inverter, own-bus voltage only."""

    name = "droop"

    def __init__(self, network: Network, curves: list[DroopCurve] | None = None, deadband: float = DEFAULT_DEADBAND):
        if curves is None:
            curves = [
                default_droop_curve(inv.q_min, inv.q_max, network.v_min, network.v_max, deadband)
                for inv in network.inverters
            ]
        if len(curves) != len(network.inverters):
            raise ValueError("need exactly one droop curve per inverter")
        self.curves = curves

    def reset(self) -> None:
        pass

    def step(self, obs: ControllerObservation, w: Injections | None = None, substep: int = 0):
        return np.array([droop_eval(c, obs.v_mag[i]) for i, c in enumerate(self.curves)])


class MlDroopController:
    """Local fitted droop with per-inverter low-pass memory."""

    name = "mldroop"

    def __init__(self, network: Network, curves: list[MlDroopCurve]):
        if len(curves) != len(network.inverters):
            raise ValueError("need exactly one fitted curve per inverter")
        self.curves = curves
        self.q_prev = np.zeros(len(curves))

    def reset(self) -> None:
        self.q_prev = np.zeros(len(self.curves))

    def step(self, obs: ControllerObservation, w: Injections | None = None, substep: int = 0):
        q = np.array(
            [mldroop_step(c, self.q_prev[i], obs.v_mag[i]) for i, c in enumerate(self.curves)]
        )
        self.q_prev = q
        return q


class OfoController:
    """Coordinated dual-ascent controller over the monitored buses."""

    name = "ofo"

    def __init__(
        self,
        network: Network,
        h: SensitivityMatrix | None = None,
        alpha: float = DEFAULT_ALPHA,
        use_identity_h: bool = False,
    ):
        if h is None:
            h = identity_sensitivity(network) if use_identity_h else sensitivity(network)
        self.network = network
        self.h = h
        self.alpha = alpha
        self.monitored = tuple(h.monitored_buses)
        self.q_lo = np.array([inv.q_min for inv in network.inverters])
        self.q_hi = np.array([inv.q_max for inv in network.inverters])
        self.state = OfoState.fresh(h, network.s_base, alpha)

    def reset(self) -> None:
        self.state = OfoState.fresh(self.h, self.network.s_base, self.alpha)

    def step(self, obs: ControllerObservation, w: Injections | None = None, substep: int = 0):
        self.state, q = ofo_step(
            self.state, obs, (self.q_lo, self.q_hi), self.network.v_min, self.network.v_max
        )
        return q


class OrpfController:
    """Model-based reference: re-solves the dispatch when injections change."""

    name = "orpf"

    def __init__(self, network: Network):
        self.network = network
        self._q = np.zeros(len(network.inverters))
        self._w_key: bytes | None = None
        self.last_status = "optimal"

    def reset(self) -> None:
        self._q = np.zeros(len(self.network.inverters))
        self._w_key = None

    def step(self, obs: ControllerObservation, w: Injections | None = None, substep: int = 0):
        if w is None:
            raise ValueError("reference dispatch controller requires the injection vector")
        key = w.p.tobytes() + w.q.tobytes()
        if key != self._w_key:
            self._q, self.last_status = orpf_solve(self.network, w, q0=self._q)
            self._w_key = key
        return self._q.copy()


def make_controller(network: Network, kind: str, options: dict | None = None):
    """Build a controller by name. ``options`` mirrors the CLI controller block."""
    options = dict(options or {})
    if kind == "none":
        return NoController(network)
    if kind == "droop":
        return DroopController(network, curves=options.get("curves"), deadband=options.get("deadband", DEFAULT_DEADBAND))
    if kind == "mldroop":
        curves = options.get("curves")
        if not curves:
            raise ValueError("mldroop controller requires fitted curves (fit-droop output)")
        return MlDroopController(network, curves)
    if kind == "ofo":
        h = options.get("h")
        h_source = options.get("h_source", "computed")
        if h is None:
            if h_source == "identity":
                h = identity_sensitivity(network)
            elif h_source == "computed":
                h = sensitivity(network)
            else:
                with open(h_source, encoding="utf-8") as fh:
                    h = SensitivityMatrix.from_csv(fh.read())
        return OfoController(network, h=h, alpha=options.get("alpha", DEFAULT_ALPHA))
    if kind == "orpf":
        return OrpfController(network)
    raise ValueError(f"unknown controller {kind!r}")
