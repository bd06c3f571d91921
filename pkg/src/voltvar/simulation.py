"""Quasi-static time-series engine and the hosting-capacity sweep.

The engine holds each profile row constant for one profile step and runs the
controller at the faster controller cadence inside it: observe the latest
solved voltages, update the setpoints, re-solve the power flow, record. All
controllers share this inner loop, so droop also iterates toward its
closed-loop fixed point within a held step.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .controllers import ControllerObservation, make_controller
from .grid import Inverter, Network, scale_pv
from .powerflow import Injections, solve
from .profiles import ProfileSet

__all__ = [
    "SimulationConfig",
    "SimulationResult",
    "CapacityResult",
    "SimulationError",
    "apply_scenario",
    "run_timeseries",
    "capacity_sweep",
    "STEADY_TOL_KVAR",
    "MAX_STEADY_SUBSTEPS",
    "FEASIBLE_V_TOL_PU",
]

CONTROLLER_KINDS = ("none", "droop", "mldroop", "ofo", "orpf")

# Sweep steady-state detection. Integral-type controllers approach the binding
# voltage limit asymptotically from the violating side, so a level right at the
# feasibility boundary still carries a small voltage residual when the q-change
# stop fires. At the 1e-7 kVAr stop that residual is below 1e-8 p.u.; the
# feasibility call allows 1e-6 p.u., three decades above the truncation error
# and three below the v gap between adjacent sweep levels. The sub-step budget
# covers the slow dual-ascent tail at boundary levels (about 1000 sub-steps).
STEADY_TOL_KVAR = 1e-7
MAX_STEADY_SUBSTEPS = 2000
FEASIBLE_V_TOL_PU = 1e-6


class SimulationError(RuntimeError):
    """Engine failure; carries the simulated timestamp where it happened."""

    def __init__(self, message: str, timestamp: int | None = None):
        super().__init__(message)
        self.timestamp = timestamp


@dataclass
class SimulationConfig:
    """Engine settings; ``controller_options`` mirrors the config-file block."""

    profile_step_s: int = 60
    controller_step_s: int = 10
    scenario_factor: float = 1.0
    controller: str = "none"
    v_min: float | None = None
    v_max: float | None = None
    controller_options: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.profile_step_s <= 0 or self.controller_step_s <= 0:
            raise ValueError("step sizes must be positive")
        if self.profile_step_s % self.controller_step_s != 0:
            raise ValueError(
                f"controller step {self.controller_step_s} s must divide profile step {self.profile_step_s} s"
            )
        if not self.scenario_factor > 0:
            raise ValueError(f"scenario factor must be positive, got {self.scenario_factor}")
        if self.controller not in CONTROLLER_KINDS:
            raise ValueError(f"unknown controller {self.controller!r}, expected one of {CONTROLLER_KINDS}")


@dataclass
class SimulationResult:
    """One record per controller sub-step; voltages are post-solve."""

    timestamps: NDArray[np.int64]
    bus_ids: tuple[int, ...]
    inverter_buses: tuple[int, ...]
    v_mag: NDArray[np.float64]
    q_kvar: NDArray[np.float64]
    total_p_kw: NDArray[np.float64]
    total_q_kvar: NDArray[np.float64]
    controller: str
    controller_step_s: int

    def __len__(self) -> int:
        return len(self.timestamps)

    def voltage_csv(self) -> str:
        lines = ["timestamp,bus,v_pu"]
        for k in range(len(self.timestamps)):
            t = int(self.timestamps[k])
            for j, b in enumerate(self.bus_ids):
                lines.append(f"{t},{b},{float(self.v_mag[k, j])!r}")
        return "\n".join(lines) + "\n"

    def q_csv(self) -> str:
        lines = ["timestamp,inverter_bus,q_kvar"]
        for k in range(len(self.timestamps)):
            t = int(self.timestamps[k])
            for j, b in enumerate(self.inverter_buses):
                lines.append(f"{t},{b},{float(self.q_kvar[k, j])!r}")
        return "\n".join(lines) + "\n"


@dataclass
class CapacityResult:
    """Hosting-capacity sweep outcome for one controller."""

    controller: str
    level_total_kw: NDArray[np.float64]
    max_v_pu: NDArray[np.float64]
    steady: NDArray[np.bool_]
    capacity_kw: float
    v_max: float

    def __post_init__(self):
        diffs = np.diff(self.level_total_kw)
        if np.any(diffs <= 0):
            raise ValueError("infeed levels must be strictly increasing")

    def to_json(self) -> str:
        doc = {
            "controller": self.controller,
            "capacity_kw": self.capacity_kw,
            "v_max": self.v_max,
            "levels": [
                {
                    "total_kw": float(p),
                    "max_v_pu": float(v),
                    "steady": bool(s),
                }
                for p, v, s in zip(self.level_total_kw, self.max_v_pu, self.steady)
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CapacityResult":
        doc = json.loads(text)
        levels = doc["levels"]
        return cls(
            controller=str(doc["controller"]),
            level_total_kw=np.array([lv["total_kw"] for lv in levels], dtype=float),
            max_v_pu=np.array([lv["max_v_pu"] for lv in levels], dtype=float),
            steady=np.array([lv["steady"] for lv in levels], dtype=bool),
            capacity_kw=float(doc["capacity_kw"]),
            v_max=float(doc["v_max"]),
        )

    def levels_csv(self) -> str:
        lines = ["level_total_kw,max_v_pu,steady"]
        for p, v, s in zip(self.level_total_kw, self.max_v_pu, self.steady):
            lines.append(f"{float(p)!r},{float(v)!r},{int(s)}")
        return "\n".join(lines) + "\n"


def apply_scenario(profiles: ProfileSet, factor: float) -> ProfileSet:
    """Scale the PV columns by ``factor``; loads are untouched."""
    if not factor > 0:
        raise ValueError(f"scenario factor must be positive, got {factor}")
    return ProfileSet(
        profiles.timestamps.copy(),
        list(profiles.buses),
        profiles.p_load_kw.copy(),
        profiles.p_pv_kw * factor,
    )


def _with_limits(network: Network, v_min: float | None, v_max: float | None) -> Network:
    if v_min is None and v_max is None:
        return network
    return dataclasses.replace(
        network,
        v_min=network.v_min if v_min is None else v_min,
        v_max=network.v_max if v_max is None else v_max,
    )


def run_timeseries(
    network: Network,
    profiles: ProfileSet,
    config: SimulationConfig,
    controller=None,
) -> SimulationResult:
    """Simulate the profile series under one controller.

    Returns one record per controller sub-step (count = profile steps times
    profile_step/controller_step). Controllers observe the voltages of the
    previous solve, so a profile-step disturbance shows up in their input one
    sub-step later. Setpoints are clamped to the inverter capability boxes
    before entering the power flow. The scenario factor scales PV production
    and the inverters' active/reactive resources alike. Raises
    :class:`SimulationError` with the simulated timestamp if the power flow
    diverges.
    """
    config.validate()
    if len(profiles) > 1 and profiles.step_s != config.profile_step_s:
        raise ValueError(
            f"profiles are sampled at {profiles.step_s} s but the engine expects {config.profile_step_s} s"
        )
    net = _with_limits(network, config.v_min, config.v_max)
    if config.scenario_factor != 1.0:
        net = scale_pv(net, config.scenario_factor)
    prof = apply_scenario(profiles, config.scenario_factor)
    ctrl = controller if controller is not None else make_controller(net, config.controller, config.controller_options)
    ctrl.reset()

    n_sub = config.profile_step_s // config.controller_step_s
    inv_buses = np.array(net.inverter_buses)
    q_lo = np.array([inv.q_min for inv in net.inverters])
    q_hi = np.array([inv.q_max for inv in net.inverters])
    obs_buses = np.array(getattr(ctrl, "monitored", net.inverter_buses), dtype=int)

    n_steps = len(prof)
    n_rec = n_steps * n_sub
    rec_t = np.zeros(n_rec, dtype=np.int64)
    rec_v = np.zeros((n_rec, net.n_buses))
    rec_q = np.zeros((n_rec, len(inv_buses)))
    rec_p_tot = np.zeros(n_rec)
    rec_q_tot = np.zeros(n_rec)

    w0 = prof.injections_at(net, 0)
    sol = solve(net, w0)
    if not sol.converged:
        raise SimulationError(
            f"power flow diverged at timestamp {int(prof.timestamps[0])} (initial solve)",
            timestamp=int(prof.timestamps[0]),
        )

    r = 0
    for k in range(n_steps):
        w = prof.injections_at(net, k)
        for i in range(n_sub):
            t = int(prof.timestamps[k]) + i * config.controller_step_s
            obs = ControllerObservation(v_mag=sol.v_mag[obs_buses], timestamp=float(t))
            q = np.clip(np.asarray(ctrl.step(obs, w=w, substep=i), dtype=float), q_lo, q_hi)
            inj = w.copy()
            inj.q[inv_buses] += q
            sol = solve(net, inj)
            if not sol.converged:
                raise SimulationError(f"power flow diverged at timestamp {t}", timestamp=t)
            rec_t[r] = t
            rec_v[r] = sol.v_mag
            rec_q[r] = q
            rec_p_tot[r] = w.p.sum()
            rec_q_tot[r] = inj.q.sum()
            r += 1

    return SimulationResult(
        timestamps=rec_t,
        bus_ids=tuple(b.id for b in net.buses),
        inverter_buses=tuple(int(b) for b in inv_buses),
        v_mag=rec_v,
        q_kvar=rec_q,
        total_p_kw=rec_p_tot,
        total_q_kvar=rec_q_tot,
        controller=ctrl.name if hasattr(ctrl, "name") else config.controller,
        controller_step_s=config.controller_step_s,
    )


def _sized_network(network: Network, level_kw: float) -> Network:
    """Resize every inverter to ``level_kw`` peak, preserving its q/p ratios."""
    sized = []
    for inv in network.inverters:
        if inv.p_peak <= 0:
            raise ValueError(f"inverter at bus {inv.bus}: cannot infer q/p ratio from p_peak {inv.p_peak}")
        sized.append(
            Inverter(
                bus=inv.bus,
                p_peak=level_kw,
                q_min=inv.q_min / inv.p_peak * level_kw,
                q_max=inv.q_max / inv.p_peak * level_kw,
            )
        )
    return dataclasses.replace(network, inverters=tuple(sized))


def capacity_sweep(
    network: Network,
    controller: str,
    p_start: float,
    p_end: float,
    p_step: float,
    controller_options: dict | None = None,
    steady_tol_kvar: float = STEADY_TOL_KVAR,
    max_substeps: int = MAX_STEADY_SUBSTEPS,
) -> CapacityResult:
    """Sweep equal per-bus PV infeed and find the largest feasible total.

    At each level every load bus injects ``level`` kW at zero load, with the
    inverters resized to that level (q limits follow each inverter's base q/p
    ratio). The controller starts from rest and iterates sub-steps until its
    setpoints change less than ``steady_tol_kvar``; levels that never settle
    are flagged and excluded. Capacity is the largest settled total infeed
    whose final max voltage stays at or below v_max + FEASIBLE_V_TOL_PU.
    """
    if not (p_start < p_end):
        raise ValueError(f"p_start {p_start} must be below p_end {p_end}")
    if not p_step > 0:
        raise ValueError(f"p_step must be positive, got {p_step}")
    if controller == "mldroop":
        raise ValueError("capacity sweep resizes inverters per level; fitted curves do not transfer")

    n_levels = int(np.floor((p_end - p_start) / p_step + 1e-9)) + 1
    levels = p_start + p_step * np.arange(n_levels)
    load_buses = np.array(network.load_buses)
    n_load = len(load_buses)

    totals = np.zeros(n_levels)
    max_v = np.zeros(n_levels)
    steady = np.zeros(n_levels, dtype=bool)

    for li, level in enumerate(levels):
        net = _sized_network(network, float(level))
        ctrl = make_controller(net, controller, dict(controller_options or {}))
        ctrl.reset()
        obs_buses = np.array(getattr(ctrl, "monitored", net.inverter_buses), dtype=int)
        inv_buses = np.array(net.inverter_buses)
        q_lo = np.array([inv.q_min for inv in net.inverters])
        q_hi = np.array([inv.q_max for inv in net.inverters])

        w = Injections.zeros(net)
        w.p[load_buses] = level
        sol = solve(net, w)
        if not sol.converged:
            raise SimulationError(f"power flow diverged at sweep level {level * n_load:.6g} kW total")

        q = np.zeros(len(inv_buses))
        settled = False
        for it in range(max_substeps):
            obs = ControllerObservation(v_mag=sol.v_mag[obs_buses], timestamp=float(it))
            q_new = np.clip(np.asarray(ctrl.step(obs, w=w, substep=it), dtype=float), q_lo, q_hi)
            dq = float(np.max(np.abs(q_new - q))) if len(q) else 0.0
            q = q_new
            inj = w.copy()
            inj.q[inv_buses] += q
            sol = solve(net, inj)
            if not sol.converged:
                raise SimulationError(f"power flow diverged at sweep level {level * n_load:.6g} kW total")
            if it > 0 and dq < steady_tol_kvar:
                settled = True
                break

        totals[li] = level * n_load
        max_v[li] = float(np.max(sol.v_mag))
        steady[li] = settled

    feasible = steady & (max_v <= network.v_max + FEASIBLE_V_TOL_PU)
    capacity = float(totals[feasible][-1]) if np.any(feasible) else 0.0
    return CapacityResult(
        controller=controller,
        level_total_kw=totals,
        max_v_pu=max_v,
        steady=steady,
        capacity_kw=capacity,
        v_max=network.v_max,
    )
