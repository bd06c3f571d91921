"""Evaluation quantities for a finished run: constraint-violation statistics,
reactive-energy usage, and the voltage distribution histogram.

Time integration is piecewise-constant and left-aligned: each record holds for
one controller step. Violation at a bus is max(0, v - v_max) + max(0, v_min - v).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

__all__ = ["MetricsReport", "compute", "HIST_LO", "HIST_HI", "HIST_BIN_WIDTH"]

HIST_LO = 0.90
HIST_HI = 1.10
HIST_BIN_WIDTH = 0.002
_N_BINS = round((HIST_HI - HIST_LO) / HIST_BIN_WIDTH)  # 100


@dataclass
class MetricsReport:
    """Aggregates over one simulation run.

    violation_time_h counts hours where any bus violates; violation_energy_pu_h
    integrates the summed per-bus violation; reactive_energy_kvarh integrates
    the summed |q| over inverters. The histogram covers [0.90, 1.10] in 0.002
    p.u. bins with out-of-range samples clipped into the edge bins, so counts
    always sum to records x buses.
    """

    violation_time_h: float
    violation_energy_pu_h: float
    max_violation_pu: float
    reactive_energy_kvarh: float
    histogram_bin_low_pu: NDArray[np.float64]
    histogram_counts: NDArray[np.int64]
    duration_h: float
    v_min: float
    v_max: float

    def __post_init__(self):
        if min(self.violation_time_h, self.violation_energy_pu_h, self.max_violation_pu, self.reactive_energy_kvarh) < 0.0:
            raise ValueError("metrics must be nonnegative")
        if self.violation_time_h > self.duration_h + 1e-9:
            raise ValueError("violation_time exceeds simulated duration")

    def to_json(self) -> str:
        doc = {
            "violation_time_h": self.violation_time_h,
            "violation_energy_pu_h": self.violation_energy_pu_h,
            "max_violation_pu": self.max_violation_pu,
            "reactive_energy_kvarh": self.reactive_energy_kvarh,
            "duration_h": self.duration_h,
            "v_min": self.v_min,
            "v_max": self.v_max,
            "histogram": {
                "bin_low_pu": [float(x) for x in self.histogram_bin_low_pu],
                "count": [int(c) for c in self.histogram_counts],
            },
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        return cls(
            violation_time_h=float(doc["violation_time_h"]),
            violation_energy_pu_h=float(doc["violation_energy_pu_h"]),
            max_violation_pu=float(doc["max_violation_pu"]),
            reactive_energy_kvarh=float(doc["reactive_energy_kvarh"]),
            histogram_bin_low_pu=np.array(doc["histogram"]["bin_low_pu"], dtype=float),
            histogram_counts=np.array(doc["histogram"]["count"], dtype=np.int64),
            duration_h=float(doc["duration_h"]),
            v_min=float(doc["v_min"]),
            v_max=float(doc["v_max"]),
        )

    def histogram_csv(self) -> str:
        lines = ["bin_low_pu,count"]
        for low, count in zip(self.histogram_bin_low_pu, self.histogram_counts):
            lines.append(f"{float(low)!r},{int(count)}")
        return "\n".join(lines) + "\n"


def compute(result, v_min: float, v_max: float) -> MetricsReport:
    """Metrics for a SimulationResult at the given limits."""
    v = np.asarray(result.v_mag, dtype=float)
    q = np.asarray(result.q_kvar, dtype=float)
    if v.size == 0:
        raise ValueError("cannot compute metrics of an empty result")
    dt_h = result.controller_step_s / 3600.0

    over = np.maximum(v - v_max, 0.0)
    under = np.maximum(v_min - v, 0.0)
    viol = over + under
    any_violated = np.any(viol > 0.0, axis=1)

    bins = np.clip(((v - HIST_LO) / HIST_BIN_WIDTH).astype(np.int64), 0, _N_BINS - 1)
    counts = np.bincount(bins.ravel(), minlength=_N_BINS).astype(np.int64)

    return MetricsReport(
        violation_time_h=float(np.count_nonzero(any_violated)) * dt_h,
        violation_energy_pu_h=float(viol.sum()) * dt_h,
        max_violation_pu=float(viol.max()),
        reactive_energy_kvarh=float(np.abs(q).sum()) * dt_h,
        histogram_bin_low_pu=HIST_LO + HIST_BIN_WIDTH * np.arange(_N_BINS),
        histogram_counts=counts,
        duration_h=v.shape[0] * dt_h,
        v_min=v_min,
        v_max=v_max,
    )
