"""Offline pipeline for the ML-tuned droop: generate optimal-dispatch training
pairs, then fit one constrained piecewise-linear curve per inverter.

The fit is a small constrained least-squares problem in the 9 breakpoint
ordinates: hat-function design matrix, non-positive slopes bounded below by
``slope_floor``, ordinates confined to the reactive box, and the interpolant
pinned to (v_min, q_max) and (v_max, q_min). Solved with the in-package dual
ascent QP. Per-inverter fits are independent; the loops here stay serial.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .controllers import DEFAULT_BETA, DEFAULT_SLOPE_FLOOR, MlDroopCurve, orpf_solve
from .grid import Network
from .powerflow import Injections, PowerFlowError, solve
from .profiles import ProfileSet
from .qp import solve_ls_qp

__all__ = [
    "TrainingSet",
    "generate_training_data",
    "fit_curve",
    "fit_all",
    "check_curve",
    "save_curves",
    "load_curves",
]

logger = logging.getLogger(__name__)

N_BREAKPOINTS = 9
GRID_MARGIN = 0.01  # knot span extends this far past [v_min, v_max], p.u.

_CSV_HEADER = "timestamp,inverter_bus,v_pu,q_kvar"


@dataclass
class TrainingSet:
    """Optimal (voltage, reactive power) pairs, one row per inverter per step."""

    timestamps: NDArray[np.int64]
    inverter_bus: NDArray[np.int64]
    v_pu: NDArray[np.float64]
    q_kvar: NDArray[np.float64]
    skipped_steps: int = 0

    def __post_init__(self):
        n = len(self.timestamps)
        if not (len(self.inverter_bus) == len(self.v_pu) == len(self.q_kvar) == n):
            raise ValueError("training columns must have equal length")

    def __len__(self) -> int:
        return len(self.timestamps)

    def pairs_for(self, bus: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        mask = self.inverter_bus == bus
        return self.v_pu[mask], self.q_kvar[mask]

    def to_csv(self) -> str:
        lines = [_CSV_HEADER]
        for t, b, v, q in zip(self.timestamps, self.inverter_bus, self.v_pu, self.q_kvar):
            lines.append(f"{int(t)},{int(b)},{float(v)!r},{float(q)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainingSet":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != _CSV_HEADER:
            raise ValueError(f"training CSV must start with header {_CSV_HEADER!r}")
        ts, bus, v, q = [], [], [], []
        for i, ln in enumerate(lines[1:], start=2):
            parts = ln.split(",")
            if len(parts) != 4:
                raise ValueError(f"line {i}: expected 4 fields, got {len(parts)}")
            try:
                ts.append(int(parts[0]))
                bus.append(int(parts[1]))
                v.append(float(parts[2]))
                q.append(float(parts[3]))
            except ValueError as exc:
                raise ValueError(f"line {i}: {exc}") from None
        return cls(
            np.array(ts, dtype=np.int64),
            np.array(bus, dtype=np.int64),
            np.array(v, dtype=float),
            np.array(q, dtype=float),
        )


def generate_training_data(
    network: Network,
    profiles: ProfileSet,
    v_min: float | None = None,
    v_max: float | None = None,
) -> TrainingSet:
    """Run the reference dispatch over every profile step and record the result.

    Each step: solve the dispatch for the held injections, re-run the power
    flow with the returned setpoints, and store each inverter's own-bus
    voltage together with its setpoint. Steps whose power flow diverges are
    skipped and counted in ``skipped_steps``.
    """
    inv_buses = np.array(network.inverter_buses)
    ts_out: list[int] = []
    bus_out: list[int] = []
    v_out: list[float] = []
    q_out: list[float] = []
    skipped = 0
    q_warm = np.zeros(len(inv_buses))
    for k in range(len(profiles.timestamps)):
        w = profiles.injections_at(network, k)
        try:
            q_opt, _status = orpf_solve(network, w, v_min=v_min, v_max=v_max, q0=q_warm)
            inj = w.copy()
            inj.q[inv_buses] += q_opt
            sol = solve(network, inj)
            if not sol.converged:
                raise PowerFlowError("power flow did not converge at the dispatched setpoints")
        except PowerFlowError as exc:
            skipped += 1
            logger.warning("skipping step %d (%s): %s", k, profiles.timestamps[k], exc)
            continue
        q_warm = q_opt
        for j, b in enumerate(inv_buses):
            ts_out.append(int(profiles.timestamps[k]))
            bus_out.append(int(b))
            v_out.append(float(sol.v_mag[b]))
            q_out.append(float(q_opt[j]))
    if skipped:
        logger.warning("training data: skipped %d of %d steps", skipped, len(profiles.timestamps))
    return TrainingSet(
        np.array(ts_out, dtype=np.int64),
        np.array(bus_out, dtype=np.int64),
        np.array(v_out, dtype=float),
        np.array(q_out, dtype=float),
        skipped_steps=skipped,
    )


def _hat_rows(v: NDArray[np.float64], knots: NDArray[np.float64]) -> NDArray[np.float64]:
    """Rows of the piecewise-linear interpolation operator: row @ y = interp(v)."""
    v = np.clip(np.asarray(v, dtype=float), knots[0], knots[-1])
    n = len(knots)
    seg = np.clip(np.searchsorted(knots, v, side="right") - 1, 0, n - 2)
    t = (v - knots[seg]) / (knots[seg + 1] - knots[seg])
    rows = np.zeros((len(v), n))
    rows[np.arange(len(v)), seg] = 1.0 - t
    rows[np.arange(len(v)), seg + 1] = t
    return rows


def fit_curve(
    pairs,
    q_box: tuple[float, float],
    v_min: float,
    v_max: float,
    slope_floor: float = DEFAULT_SLOPE_FLOOR,
    beta: float = DEFAULT_BETA,
    n_breakpoints: int = N_BREAKPOINTS,
    ridge: float | None = None,
) -> MlDroopCurve:
    """Constrained least-squares fit of a Volt/VAr curve to (v, q) samples.

    The breakpoint grid is fixed: ``n_breakpoints`` knots equally spaced over
    [v_min - 0.01, v_max + 0.01]. Constraints: every segment slope in
    [slope_floor, 0], ordinates within the box, interpolant exactly q_box max
    at v_min and q_box min at v_max.
    """
    pairs = np.asarray(pairs, dtype=float)
    if pairs.size == 0:
        raise ValueError("fit_curve needs at least one (v, q) sample")
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError("pairs must be an (n, 2) array of (v, q) samples")
    v_s, q_s = pairs[:, 0], pairs[:, 1]
    if len(np.unique(v_s)) < 2:
        raise ValueError("fit_curve needs at least two distinct voltage samples")
    q_lo, q_hi = float(q_box[0]), float(q_box[1])
    if not (q_lo <= 0.0 <= q_hi):
        raise ValueError(f"reactive box [{q_lo}, {q_hi}] must bracket 0")
    if slope_floor >= 0.0:
        raise ValueError("slope_floor must be negative")

    knots = np.linspace(v_min - GRID_MARGIN, v_max + GRID_MARGIN, n_breakpoints)
    n = n_breakpoints
    a_mat = _hat_rows(v_s, knots)
    if ridge is None:
        ridge = 1e-8 * (1.0 + float(np.trace(a_mat.T @ a_mat)) / n)
    c = a_mat.T @ q_s

    dx = np.diff(knots)
    diff = np.zeros((n - 1, n))
    diff[np.arange(n - 1), np.arange(n - 1)] = -1.0
    diff[np.arange(n - 1), np.arange(1, n)] = 1.0
    g_rows = [diff, -diff, np.eye(n), -np.eye(n)]
    h_parts = [
        np.zeros(n - 1),  # y[j+1] - y[j] <= 0
        -slope_floor * dx,  # y[j] - y[j+1] <= -slope_floor dx
        np.full(n, q_hi),
        np.full(n, -q_lo),
    ]
    g_mat = np.vstack(g_rows)
    h_vec = np.concatenate(h_parts)

    a_eq = _hat_rows(np.array([v_min, v_max]), knots)
    b_eq = np.array([q_hi, q_lo])

    # Samples that miss whole knot spans leave A'A rank-deficient and the QP
    # badly conditioned at the base ridge. Escalating the ridge only on
    # failure keeps well-sampled fits unbiased while still returning a valid
    # curve for sparse data (unidentified knots pull toward zero).
    res = None
    for ridge_try, iters in ((ridge, 4000), (ridge * 1e3, 4000), (ridge * 1e6, 60000)):
        p_mat = a_mat.T @ a_mat + ridge_try * np.eye(n)
        res = solve_ls_qp(p_mat, c, g_mat, h_vec, a_eq, b_eq, max_iter=iters)
        if res.converged:
            if ridge_try != ridge:
                logger.warning("curve fit needed ridge %.3e (samples leave knots unidentified)", ridge_try)
            break
    if not res.converged:
        raise RuntimeError(f"curve fit QP did not converge (violation {res.max_violation:.3e} kVAr)")
    y = res.y
    # Snap the forced endpoints to machine precision (least-norm correction).
    resid = b_eq - a_eq @ y
    y = y + a_eq.T @ np.linalg.solve(a_eq @ a_eq.T, resid)

    curve = MlDroopCurve(
        breakpoints=tuple((float(x), float(v)) for x, v in zip(knots, y)),
        beta=beta,
        slope_floor=slope_floor,
    )
    problems = check_curve(curve, (q_lo, q_hi), v_min, v_max)
    if problems:
        raise RuntimeError("fitted curve violates its constraints: " + "; ".join(problems))
    return curve


def check_curve(
    curve: MlDroopCurve,
    q_box: tuple[float, float],
    v_min: float,
    v_max: float,
    tol: float = 1e-6,
) -> list[str]:
    """Constraint audit for a fitted curve; returns human-readable problems."""
    problems = []
    xs = np.array([p[0] for p in curve.breakpoints])
    ys = np.array([p[1] for p in curve.breakpoints])
    slopes = np.diff(ys) / np.diff(xs)
    if np.any(slopes > tol):
        problems.append(f"positive segment slope {float(np.max(slopes)):.3e}")
    if np.any(slopes < curve.slope_floor - tol):
        problems.append(f"slope below floor: {float(np.min(slopes)):.6g} < {curve.slope_floor}")
    q_lo, q_hi = q_box
    if np.any(ys > q_hi + tol) or np.any(ys < q_lo - tol):
        problems.append("breakpoint ordinate outside the reactive box")
    e_top = abs(curve.eval(v_min) - q_hi)
    e_bot = abs(curve.eval(v_max) - q_lo)
    if e_top > tol:
        problems.append(f"curve misses (v_min, q_max) by {e_top:.3e} kVAr")
    if e_bot > tol:
        problems.append(f"curve misses (v_max, q_min) by {e_bot:.3e} kVAr")
    return problems


def fit_all(
    network: Network,
    training: TrainingSet,
    slope_floor: float = DEFAULT_SLOPE_FLOOR,
    beta: float = DEFAULT_BETA,
) -> list[MlDroopCurve]:
    """Fit one curve per inverter from its own training pairs."""
    curves = []
    for inv in network.inverters:
        v_s, q_s = training.pairs_for(inv.bus)
        if len(v_s) == 0:
            raise ValueError(f"no training pairs for inverter bus {inv.bus}")
        curves.append(
            fit_curve(
                np.column_stack([v_s, q_s]),
                (inv.q_min, inv.q_max),
                network.v_min,
                network.v_max,
                slope_floor=slope_floor,
                beta=beta,
            )
        )
    return curves


def save_curves(directory: str | Path, network: Network, curves: list[MlDroopCurve]) -> list[Path]:
    """Write one ``curve_bus_<id>.json`` per inverter into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for inv, curve in zip(network.inverters, curves):
        path = directory / f"curve_bus_{inv.bus}.json"
        path.write_text(curve.to_json(inv.bus) + "\n", encoding="utf-8")
        paths.append(path)
    return paths


def load_curves(directory: str | Path, network: Network) -> list[MlDroopCurve]:
    """Load the per-inverter curve files written by ``save_curves``."""
    directory = Path(directory)
    by_bus = {}
    for path in sorted(directory.glob("curve_bus_*.json")):
        bus, curve = MlDroopCurve.from_json(path.read_text(encoding="utf-8"))
        by_bus[bus] = curve
    missing = [inv.bus for inv in network.inverters if inv.bus not in by_bus]
    if missing:
        raise FileNotFoundError(f"no curve file for inverter buses {missing} in {directory}")
    return [by_bus[inv.bus] for inv in network.inverters]
