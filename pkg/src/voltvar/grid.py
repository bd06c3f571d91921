"""Network model for radial low-voltage grids and the CIGRE LV residential feeder.

The network is a plain immutable container: buses, series branches (lines and
the MV/LV transformer), and PV inverters with box reactive-power capability.
Impedances are stored in ohms; the power-flow module converts to per-unit using
``s_base`` and each branch's to-side nominal voltage.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

__all__ = [
    "Bus",
    "Branch",
    "Inverter",
    "Network",
    "CIGRE_NOMINAL_LOAD_KW",
    "DEFAULT_Q_TO_P_RATIO",
    "build_cigre_lv_residential",
    "scale_pv",
    "validate",
    "network_to_json",
    "network_from_json",
    "save_grid",
    "load_grid",
]

# Reactive capability relative to installed PV peak: tan(acos(0.95)), i.e.
# power factor 0.95 at rated active power, a common LV grid-code requirement
# for residential PV.
DEFAULT_Q_TO_P_RATIO = 0.3287


@dataclass(frozen=True)
class Bus:
    """A network node.

    :param id: integer index, unique and contiguous from 0
    :param nominal_v: nominal line-to-line voltage in volts
    :param kind: one of ``slack``, ``junction``, ``load``
    """

    id: int
    nominal_v: float
    kind: str


@dataclass(frozen=True)
class Branch:
    """Series element between two buses.

    ``r``/``x`` are total ohms (per-km value times length for lines). For
    transformer branches the ohms are referred to the to-side (LV) winding and
    ``rating`` holds the rated apparent power in kVA.
    """

    from_bus: int
    to_bus: int
    r: float
    x: float
    kind: str = "line"
    rating: float | None = None


@dataclass(frozen=True)
class Inverter:
    """PV inverter with a box reactive-power capability [q_min, q_max] kVAr."""

    bus: int
    p_peak: float
    q_min: float
    q_max: float


@dataclass(frozen=True)
class Network:
    """Immutable radial network.

    :param buses: tuple of Bus, ids contiguous from 0, exactly one slack
    :param branches: tuple of Branch forming a tree rooted at the slack bus
    :param inverters: tuple of Inverter located at load buses
    :param f_nominal: system frequency in Hz
    :param v_min: lower voltage limit in p.u.
    :param v_max: upper voltage limit in p.u.
    :param s_base: per-unit power base in kVA (transformer rating)
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    inverters: tuple[Inverter, ...]
    f_nominal: float
    v_min: float
    v_max: float
    s_base: float

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def slack_bus(self) -> int:
        for bus in self.buses:
            if bus.kind == "slack":
                return bus.id
        raise ValueError("network has no slack bus")

    @property
    def load_buses(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses if b.kind == "load")

    @property
    def inverter_buses(self) -> tuple[int, ...]:
        return tuple(inv.bus for inv in self.inverters)


# ---------------------------------------------------------------------------
# CIGRE LV residential feeder (European configuration)
# ---------------------------------------------------------------------------
# Constants from the CIGRE Task Force C6.04.02 report "Benchmark Systems for
# Network Integration of Renewable and Distributed Energy Resources" (2014),
# residential subnetwork: conductor data (ohm/km), segment lengths (m), and
# the 20/0.4 kV 500 kVA transformer (vk = 4.123106 %, vkr = 1 % -> LV-referred
# Z = 0.0032 + j0.0128 ohm).

_UG1 = (0.162, 0.0832)  # trunk cable, ohm/km
_UG3 = (0.822, 0.0847)  # service cable, ohm/km

# (from R#, to R#, conductor, length in m); R0 is the MV slack bus.
_CIGRE_LINES = (
    (1, 2, _UG1, 35.0),
    (2, 3, _UG1, 35.0),
    (3, 4, _UG1, 35.0),
    (4, 5, _UG1, 35.0),
    (5, 6, _UG1, 35.0),
    (6, 7, _UG1, 35.0),
    (7, 8, _UG1, 35.0),
    (8, 9, _UG1, 35.0),
    (9, 10, _UG1, 35.0),
    (3, 11, _UG3, 30.0),
    (4, 12, _UG3, 35.0),
    (12, 13, _UG3, 35.0),
    (13, 14, _UG3, 35.0),
    (14, 15, _UG3, 30.0),
    (6, 16, _UG3, 30.0),
    (9, 17, _UG3, 30.0),
    (10, 18, _UG3, 30.0),
)

_TRAFO_RATING_KVA = 500.0
_TRAFO_R_OHM = 0.0032  # LV-referred
_TRAFO_X_OHM = 0.0128

_MV_KV = 20.0
_LV_V = 400.0

# Nominal household connection sizes at the feeder's five connection points.
CIGRE_NOMINAL_LOAD_KW = {11: 15.0, 15: 52.0, 16: 55.0, 17: 35.0, 18: 47.0}

# EN 50160 keeps LV supply voltages within 230 V +/- 10%, i.e. the absolute
# band [207 V, 253 V] phase-to-neutral. The feeder's 400 V line-to-line
# nominal corresponds to 230.94 V phase-to-neutral, so that band maps to
# [0.8963, 1.0955] p.u. on the grid's own base.
_DEFAULT_V_MIN = 0.8963
_DEFAULT_V_MAX = 1.0955


def build_cigre_lv_residential(
    q_to_p_ratio: float = DEFAULT_Q_TO_P_RATIO,
    v_min: float = _DEFAULT_V_MIN,
    v_max: float = _DEFAULT_V_MAX,
) -> Network:
    """Construct the CIGRE LV residential benchmark feeder.

    19 buses: the 20 kV slack (id 0), the LV busbar R1 and feeder buses
    R2..R18 (ids match the R numbering). Five load buses R11/R15/R16/R17/R18
    carry PV inverters sized to the nominal connection values with reactive
    capability ``q_to_p_ratio * p_peak``.
    """
    buses = [Bus(0, _MV_KV * 1000.0, "slack")]
    for rid in range(1, 19):
        kind = "load" if rid in CIGRE_NOMINAL_LOAD_KW else "junction"
        buses.append(Bus(rid, _LV_V, kind))

    branches = [
        Branch(0, 1, _TRAFO_R_OHM, _TRAFO_X_OHM, kind="transformer", rating=_TRAFO_RATING_KVA)
    ]
    for fr, to, (r_km, x_km), length_m in _CIGRE_LINES:
        km = length_m / 1000.0
        branches.append(Branch(fr, to, r_km * km, x_km * km, kind="line"))

    inverters = []
    for rid in sorted(CIGRE_NOMINAL_LOAD_KW):
        p_peak = CIGRE_NOMINAL_LOAD_KW[rid]
        q_cap = q_to_p_ratio * p_peak
        inverters.append(Inverter(rid, p_peak, -q_cap, q_cap))

    return Network(
        buses=tuple(buses),
        branches=tuple(branches),
        inverters=tuple(inverters),
        f_nominal=50.0,
        v_min=v_min,
        v_max=v_max,
        s_base=_TRAFO_RATING_KVA,
    )


def scale_pv(network: Network, factor: float) -> Network:
    """Scale every inverter's active and reactive resources by ``factor``.

    Topology, impedances, and limits are untouched; only p_peak, q_min, q_max
    change. Raises ValueError for non-positive factors.
    """
    if not factor > 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    scaled = tuple(
        dataclasses.replace(
            inv,
            p_peak=inv.p_peak * factor,
            q_min=inv.q_min * factor,
            q_max=inv.q_max * factor,
        )
        for inv in network.inverters
    )
    return dataclasses.replace(network, inverters=scaled)


def validate(network: Network) -> list[str]:
    """Return a list of invariant violations (empty iff the network is valid)."""
    problems: list[str] = []

    ids = [b.id for b in network.buses]
    if sorted(ids) != list(range(len(ids))):
        problems.append(f"bus ids not unique/contiguous from 0: {sorted(ids)}")
    slacks = [b.id for b in network.buses if b.kind == "slack"]
    if len(slacks) != 1:
        problems.append(f"expected exactly one slack bus, found {slacks}")
    for bus in network.buses:
        if bus.kind not in ("slack", "junction", "load"):
            problems.append(f"bus {bus.id}: unknown kind {bus.kind!r}")
        if bus.nominal_v <= 0:
            problems.append(f"bus {bus.id}: nonpositive nominal voltage")

    id_set = set(ids)
    for br in network.branches:
        if br.from_bus not in id_set or br.to_bus not in id_set:
            problems.append(f"branch {br.from_bus}-{br.to_bus}: dangling endpoint")
            continue
        if br.r < 0 or br.x < 0 or (br.r == 0 and br.x == 0):
            problems.append(f"branch {br.from_bus}-{br.to_bus}: invalid impedance r={br.r} x={br.x}")

    # Radiality: tree rooted at the slack (edge count = n - 1 and connected).
    if len(slacks) == 1 and not problems:
        n = len(ids)
        if len(network.branches) != n - 1:
            problems.append(
                f"not radial: {len(network.branches)} branches for {n} buses (expected {n - 1})"
            )
        adj: dict[int, list[int]] = {i: [] for i in ids}
        for br in network.branches:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
        seen = {slacks[0]}
        stack = [slacks[0]]
        while stack:
            node = stack.pop()
            for nb in adj[node]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if len(seen) != n:
            missing = sorted(id_set - seen)
            problems.append(f"not connected: buses {missing} unreachable from slack")

    kinds = {b.id: b.kind for b in network.buses}
    for inv in network.inverters:
        if inv.bus not in id_set:
            problems.append(f"dangling inverter at nonexistent bus {inv.bus}")
        elif kinds[inv.bus] != "load":
            problems.append(f"inverter at bus {inv.bus}: bus kind is {kinds[inv.bus]!r}, not load")
        if not (inv.q_min <= 0.0 <= inv.q_max):
            problems.append(f"inverter at bus {inv.bus}: q_min {inv.q_min} .. q_max {inv.q_max} must bracket 0")

    if not (network.v_min < 1.0 < network.v_max):
        problems.append(f"voltage limits must satisfy v_min < 1.0 < v_max, got {network.v_min}, {network.v_max}")
    if network.s_base <= 0:
        problems.append(f"s_base must be positive, got {network.s_base}")
    return problems


# ---------------------------------------------------------------------------
# Grid file format (JSON)
# ---------------------------------------------------------------------------

def network_to_json(network: Network) -> str:
    """Serialize to the grid file format.

    Top-level keys: buses, branches, inverters, v_min, v_max, f_nominal_hz,
    s_base_kva. Transformer branch ohms are LV-side referred (see Branch).
    """
    doc = {
        "buses": [
            {"id": b.id, "nominal_v_volts": b.nominal_v, "kind": b.kind} for b in network.buses
        ],
        "branches": [],
        "inverters": [
            {
                "bus": inv.bus,
                "p_peak_kw": inv.p_peak,
                "q_min_kvar": inv.q_min,
                "q_max_kvar": inv.q_max,
            }
            for inv in network.inverters
        ],
        "v_min": network.v_min,
        "v_max": network.v_max,
        "f_nominal_hz": network.f_nominal,
        "s_base_kva": network.s_base,
    }
    for br in network.branches:
        entry = {"from": br.from_bus, "to": br.to_bus, "r_ohm": br.r, "x_ohm": br.x, "kind": br.kind}
        if br.rating is not None:
            entry["rating_kva"] = br.rating
        doc["branches"].append(entry)
    return json.dumps(doc, indent=2)


def network_from_json(text: str) -> Network:
    """Parse the grid file format produced by :func:`network_to_json`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"grid file is not valid JSON: {exc}") from exc
    try:
        buses = tuple(
            Bus(int(b["id"]), float(b["nominal_v_volts"]), str(b["kind"])) for b in doc["buses"]
        )
        branches = tuple(
            Branch(
                int(br["from"]),
                int(br["to"]),
                float(br["r_ohm"]),
                float(br["x_ohm"]),
                kind=str(br.get("kind", "line")),
                rating=float(br["rating_kva"]) if "rating_kva" in br else None,
            )
            for br in doc["branches"]
        )
        inverters = tuple(
            Inverter(
                int(inv["bus"]),
                float(inv["p_peak_kw"]),
                float(inv["q_min_kvar"]),
                float(inv["q_max_kvar"]),
            )
            for inv in doc["inverters"]
        )
        return Network(
            buses=buses,
            branches=branches,
            inverters=inverters,
            f_nominal=float(doc["f_nominal_hz"]),
            v_min=float(doc["v_min"]),
            v_max=float(doc["v_max"]),
            s_base=float(doc["s_base_kva"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed grid file: {exc}") from exc


def save_grid(network: Network, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(network_to_json(network) + "\n")


def load_grid(source: str) -> Network:
    """Load a network from a grid JSON path, or build `cigre-lv` by name."""
    if source == "cigre-lv":
        return build_cigre_lv_residential()
    with open(source, encoding="utf-8") as fh:
        return network_from_json(fh.read())
