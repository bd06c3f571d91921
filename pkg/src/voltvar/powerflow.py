"""Backward-forward sweep power flow for radial networks, plus voltage
sensitivities.

The sweep is expressed in the compact direct form for radial feeders: with the
common-path impedance matrix ``Z`` (ohms of the shared slack-to-bus path,
per-unitized), bus voltages satisfy the fixed point

    V = V0 + Z @ conj(S / V)

for complex injections S (generation positive). One iteration is exactly one
backward current aggregation plus one forward voltage update; convergence is
declared on the max complex power mismatch.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray

from .grid import Network, validate

__all__ = [
    "Injections",
    "PowerFlowSolution",
    "SensitivityMatrix",
    "PowerFlowError",
    "solve",
    "sensitivity",
    "identity_sensitivity",
]

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100


class PowerFlowError(RuntimeError):
    """Raised when a solve that must converge does not."""


@dataclass
class Injections:
    """Bus power injections in kW / kVAr (generation positive).

    Vectors span all buses in id order; slack entries are ignored.
    """

    p: NDArray[np.float64]
    q: NDArray[np.float64]

    @classmethod
    def zeros(cls, network: Network) -> "Injections":
        n = network.n_buses
        return cls(np.zeros(n), np.zeros(n))

    def copy(self) -> "Injections":
        return Injections(self.p.copy(), self.q.copy())


@dataclass
class PowerFlowSolution:
    v_mag: NDArray[np.float64]
    v_ang: NDArray[np.float64]
    converged: bool
    iterations: int
    max_mismatch: float


@dataclass
class SensitivityMatrix:
    """Finite-difference voltage sensitivity dv/dq.

    ``h[i, j]`` is the change of voltage at monitored bus i (p.u.) per kVAr of
    reactive injection at inverter j. All entries are nonnegative on radial LV
    feeders.
    """

    h: NDArray[np.float64]
    monitored_buses: tuple[int, ...]
    inverter_buses: tuple[int, ...]
    operating_point: str

    def to_csv(self) -> str:
        lines = ["bus," + ",".join(str(b) for b in self.inverter_buses)]
        for i, bus in enumerate(self.monitored_buses):
            lines.append(str(bus) + "," + ",".join(repr(float(x)) for x in self.h[i]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, operating_point: str = "loaded-from-csv") -> "SensitivityMatrix":
        rows = [line.split(",") for line in text.strip().splitlines()]
        if not rows or rows[0][0] != "bus":
            raise ValueError("sensitivity CSV must start with a 'bus,<inverter ids>' header")
        inverter_buses = tuple(int(x) for x in rows[0][1:])
        monitored = []
        data = []
        for row in rows[1:]:
            monitored.append(int(row[0]))
            data.append([float(x) for x in row[1:]])
        return cls(np.array(data), tuple(monitored), inverter_buses, operating_point)


@dataclass(frozen=True)
class _Compiled:
    """Per-network solver tables: bus ordering and the path impedance matrix."""

    slack: int
    order: tuple[int, ...]  # non-slack buses in id order
    z: NDArray[np.complex128]  # common-path impedance, p.u., (n-1, n-1)
    y_red: NDArray[np.complex128]  # inverse of z


@lru_cache(maxsize=32)
def _compile(network: Network) -> _Compiled:
    problems = validate(network)
    if problems:
        raise ValueError("invalid network: " + "; ".join(problems))

    n = network.n_buses
    slack = network.slack_bus
    children: dict[int, list[tuple[int, complex]]] = {b.id: [] for b in network.buses}
    z_base = {b.id: b.nominal_v**2 / (network.s_base * 1000.0) for b in network.buses}

    # Orient every branch away from the slack; per-unitize on the to-side base.
    adj: dict[int, list[tuple[int, complex]]] = {b.id: [] for b in network.buses}
    for br in network.branches:
        adj[br.from_bus].append((br.to_bus, complex(br.r, br.x)))
        adj[br.to_bus].append((br.from_bus, complex(br.r, br.x)))
    parent: dict[int, tuple[int, complex]] = {}
    seen = {slack}
    stack = [slack]
    while stack:
        node = stack.pop()
        for nb, z_ohm in adj[node]:
            if nb not in seen:
                seen.add(nb)
                parent[nb] = (node, z_ohm / z_base[nb])
                children[node].append((nb, z_ohm / z_base[nb]))
                stack.append(nb)

    order = tuple(sorted(parent))
    pos = {bus: i for i, bus in enumerate(order)}

    # Path impedance: z[i, j] = sum of branch impedances shared by the
    # slack->i and slack->j paths.
    path: dict[int, list[complex]] = {slack: []}
    queue = [slack]
    branch_of: dict[int, int] = {}  # bus -> index of its upstream branch
    z_list: list[complex] = []
    while queue:
        node = queue.pop()
        for nb, z_pu in children[node]:
            branch_of[nb] = len(z_list)
            z_list.append(z_pu)
            path[nb] = path[node] + [branch_of[nb]]
            queue.append(nb)

    m = len(order)
    incidence = np.zeros((m, len(z_list)))
    for bus in order:
        incidence[pos[bus], path[bus]] = 1.0
    z = incidence @ np.diag(np.array(z_list)) @ incidence.T
    y_red = np.linalg.inv(z)
    return _Compiled(slack=slack, order=order, z=z, y_red=y_red)


def solve(
    network: Network,
    inj: Injections,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> PowerFlowSolution:
    """Solve the power flow at the given injections.

    Returns the converged magnitudes/angles (slack pinned at 1.0 p.u., 0 rad),
    or ``converged=False`` if the mismatch is still above ``tol`` after
    ``max_iter`` sweeps or the iteration leaves the physical branch.
    """
    comp = _compile(network)
    n = network.n_buses
    if len(inj.p) != n or len(inj.q) != n:
        raise ValueError(f"injection vectors must have length {n}, got {len(inj.p)}/{len(inj.q)}")

    idx = np.array(comp.order)
    s = (np.asarray(inj.p, dtype=float)[idx] + 1j * np.asarray(inj.q, dtype=float)[idx]) / network.s_base

    v = np.ones(len(idx), dtype=complex)
    mismatch = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        v_new = 1.0 + comp.z @ np.conj(s / v)
        if not np.all(np.isfinite(v_new)) or np.any(np.abs(v_new) < 0.05):
            return _package(network, comp, v, False, iterations, np.inf)
        v = v_new
        i_inj = comp.y_red @ (v - 1.0)
        mismatch = float(np.max(np.abs(s - v * np.conj(i_inj))))
        if mismatch < tol:
            return _package(network, comp, v, True, iterations, mismatch)
    return _package(network, comp, v, False, iterations, mismatch)


def _package(
    network: Network,
    comp: _Compiled,
    v: NDArray[np.complex128],
    converged: bool,
    iterations: int,
    mismatch: float,
) -> PowerFlowSolution:
    n = network.n_buses
    v_mag = np.ones(n)
    v_ang = np.zeros(n)
    idx = np.array(comp.order)
    v_mag[idx] = np.abs(v)
    v_ang[idx] = np.angle(v)
    return PowerFlowSolution(v_mag, v_ang, converged, iterations, mismatch)


def sensitivity(
    network: Network,
    inj: Injections | None = None,
    delta_q: float = 1.0,
    monitor: str = "inverters",
) -> SensitivityMatrix:
    """Finite-difference sensitivity of voltages to inverter reactive power.

    Column j is ``(v(q + delta_q e_j) - v(q)) / delta_q`` from repeated solves
    around the operating point ``inj`` (no load/generation by default).
    ``monitor`` selects the rows: inverter buses (default) or ``all`` buses.
    """
    if inj is None:
        inj = Injections.zeros(network)
        op = "no-load"
    else:
        op = "custom"
    base = solve(network, inj)
    if not base.converged:
        raise PowerFlowError("sensitivity: base power flow did not converge")

    inverter_buses = network.inverter_buses
    if monitor == "inverters":
        monitored = inverter_buses
    elif monitor == "all":
        monitored = tuple(b.id for b in network.buses)
    else:
        raise ValueError(f"monitor must be 'inverters' or 'all', got {monitor!r}")
    rows = np.array(monitored)

    h = np.zeros((len(monitored), len(inverter_buses)))
    for j, bus in enumerate(inverter_buses):
        pert = inj.copy()
        pert.q[bus] += delta_q
        sol = solve(network, pert)
        if not sol.converged:
            raise PowerFlowError(f"sensitivity: perturbed solve diverged for inverter at bus {bus}")
        h[:, j] = (sol.v_mag[rows] - base.v_mag[rows]) / delta_q
    return SensitivityMatrix(h, monitored, inverter_buses, f"{op} (delta_q={delta_q} kVAr)")


def identity_sensitivity(network: Network) -> SensitivityMatrix:
    """Identity substitute for the measured/computed sensitivity.

    Expressed in the same p.u.-per-kVAr units as :func:`sensitivity` so that
    controllers treating H in per-unit on ``s_base`` see an exact identity.
    """
    buses = network.inverter_buses
    h = np.eye(len(buses)) / network.s_base
    return SensitivityMatrix(h, buses, buses, "identity")
