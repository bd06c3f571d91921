"""Load/PV profile containers, the profile CSV format, and the synthetic
day generator used in place of licensed smart-meter data.

CSV format (bit-exact): UTF-8, ``\\n`` newlines, header
``timestamp,p_load_kw_<bus>,p_pv_kw_<bus>,...`` with bus ids ascending and the
load/PV pair adjacent per bus. ``timestamp`` is integer epoch seconds at
uniform spacing; powers are nonnegative kW with ``.`` decimal point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .grid import Network
from .powerflow import Injections

__all__ = ["ProfileSet", "load_profiles", "write_profiles", "synth_profiles", "SYNTH_ORIGIN_EPOCH"]

logger = logging.getLogger(__name__)

# 2021-06-01 00:00:00 UTC; synthetic days start at midnight of a summer day.
SYNTH_ORIGIN_EPOCH = 1622505600


@dataclass
class ProfileSet:
    """Uniformly sampled active-power series per load bus (kW, nonnegative)."""

    timestamps: NDArray[np.int64]
    buses: list[int]
    p_load_kw: NDArray[np.float64]
    p_pv_kw: NDArray[np.float64]

    def __post_init__(self):
        t = np.asarray(self.timestamps)
        if t.ndim != 1 or len(t) == 0:
            raise ValueError("profiles need at least one timestamp")
        for name, arr in (("p_load_kw", self.p_load_kw), ("p_pv_kw", self.p_pv_kw)):
            if arr.shape != (len(t), len(self.buses)):
                raise ValueError(f"{name} must be shaped (timestamps, buses) = {(len(t), len(self.buses))}")
            if np.any(arr < 0.0):
                raise ValueError(f"{name} contains negative power")
        if len(t) >= 2:
            steps = np.diff(t)
            if np.any(steps != steps[0]) or steps[0] <= 0:
                raise ValueError("timestamps must be strictly increasing with uniform spacing")
        if any(b <= a for a, b in zip(self.buses, self.buses[1:])):
            raise ValueError("bus ids must be strictly ascending")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def step_s(self) -> int:
        if len(self.timestamps) < 2:
            return 0
        return int(self.timestamps[1] - self.timestamps[0])

    def injections_at(self, network: Network, k: int) -> Injections:
        """Net bus injections for step k: PV minus load, unity power factor."""
        inj = Injections.zeros(network)
        for j, bus in enumerate(self.buses):
            inj.p[bus] = self.p_pv_kw[k, j] - self.p_load_kw[k, j]
        return inj


def write_profiles(profiles: ProfileSet) -> str:
    cols = []
    for b in profiles.buses:
        cols.append(f"p_load_kw_{b}")
        cols.append(f"p_pv_kw_{b}")
    lines = ["timestamp," + ",".join(cols)]
    for k in range(len(profiles)):
        vals = []
        for j in range(len(profiles.buses)):
            vals.append(repr(float(profiles.p_load_kw[k, j])))
            vals.append(repr(float(profiles.p_pv_kw[k, j])))
        lines.append(f"{int(profiles.timestamps[k])}," + ",".join(vals))
    return "\n".join(lines) + "\n"


def _parse_header(header: str) -> list[int]:
    parts = header.strip().split(",")
    if not parts or parts[0] != "timestamp":
        raise ValueError("line 1: header must start with 'timestamp'")
    if len(parts) < 3 or (len(parts) - 1) % 2 != 0:
        raise ValueError("line 1: header needs a p_load_kw_<bus>,p_pv_kw_<bus> pair per bus")
    buses = []
    for i in range(1, len(parts), 2):
        load_col, pv_col = parts[i], parts[i + 1]
        if not load_col.startswith("p_load_kw_") or not pv_col.startswith("p_pv_kw_"):
            raise ValueError(f"line 1: expected p_load_kw_<bus>,p_pv_kw_<bus> pair, got {load_col!r},{pv_col!r}")
        try:
            b_load = int(load_col[len("p_load_kw_"):])
            b_pv = int(pv_col[len("p_pv_kw_"):])
        except ValueError:
            raise ValueError(f"line 1: non-integer bus id in {load_col!r}/{pv_col!r}") from None
        if b_load != b_pv:
            raise ValueError(f"line 1: mismatched bus pair {b_load} vs {b_pv}")
        buses.append(b_load)
    if any(b <= a for a, b in zip(buses, buses[1:])):
        raise ValueError("line 1: bus ids must be strictly ascending")
    return buses


def load_profiles(text_or_path, downsample_s: int | None = None) -> ProfileSet:
    """Parse a profile CSV (path or raw text), optionally mean-downsampling.

    Errors carry 1-based line numbers. ``downsample_s`` must be a multiple of
    the native step; values are window means, timestamps the window starts,
    and a trailing partial window is dropped with a warning.
    """
    text = text_or_path
    if "\n" not in str(text_or_path):
        with open(text_or_path, encoding="utf-8") as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty profile file")
    buses = _parse_header(lines[0])
    n_cols = 1 + 2 * len(buses)
    ts: list[int] = []
    rows: list[list[float]] = []
    for i, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != n_cols:
            raise ValueError(f"line {i}: expected {n_cols} fields, got {len(parts)}")
        try:
            t = int(parts[0])
            vals = [float(x) for x in parts[1:]]
        except ValueError as exc:
            raise ValueError(f"line {i}: {exc}") from None
        if any(v < 0.0 for v in vals):
            raise ValueError(f"line {i}: negative power value")
        ts.append(t)
        rows.append(vals)
    t_arr = np.array(ts, dtype=np.int64)
    if len(t_arr) >= 2:
        steps = np.diff(t_arr)
        if steps[0] <= 0:
            raise ValueError("line 3: timestamps must be strictly increasing")
        bad = np.nonzero(steps != steps[0])[0]
        if len(bad):
            i = int(bad[0])
            raise ValueError(
                f"line {i + 3}: timestamp gap between {int(t_arr[i])} and {int(t_arr[i + 1])} "
                f"(expected step {int(steps[0])} s)"
            )
    data = np.array(rows, dtype=float)
    p_load = data[:, 0::2]
    p_pv = data[:, 1::2]
    profiles = ProfileSet(t_arr, buses, p_load, p_pv)
    if downsample_s is not None:
        profiles = _downsample(profiles, downsample_s)
    return profiles


def _downsample(profiles: ProfileSet, step_s: int) -> ProfileSet:
    native = profiles.step_s
    if native == 0:
        raise ValueError("cannot downsample a single-row profile")
    if step_s % native != 0 or step_s < native:
        raise ValueError(f"downsample step {step_s} s must be a multiple of the native {native} s")
    factor = step_s // native
    if factor == 1:
        return profiles
    n_win = len(profiles) // factor
    if n_win == 0:
        raise ValueError(f"profile too short to downsample to {step_s} s")
    dropped = len(profiles) - n_win * factor
    if dropped:
        logger.warning("downsampling drops %d trailing rows (partial window)", dropped)
    n_buses = len(profiles.buses)
    load = profiles.p_load_kw[: n_win * factor].reshape(n_win, factor, n_buses).mean(axis=1)
    pv = profiles.p_pv_kw[: n_win * factor].reshape(n_win, factor, n_buses).mean(axis=1)
    return ProfileSet(profiles.timestamps[: n_win * factor : factor].copy(), list(profiles.buses), load, pv)


def synth_profiles(
    seed: int,
    days: int,
    buses: list[int],
    peak_load_kw: dict[int, float] | list[float],
    peak_pv_kw: dict[int, float] | list[float],
    step_s: int = 60,
    start_epoch: int = SYNTH_ORIGIN_EPOCH,
) -> ProfileSet:
    """Deterministic synthetic days: half-sine PV with shared clouds, double-peak load.

    All buses see the same sky (per-day quality factor, Poisson-count cloud
    dips) with small independent multiplicative noise; load follows a
    morning/evening double hump with per-day and per-minute noise. Each series
    is rescaled so its maximum equals the requested peak exactly; a zero peak
    yields an all-zero series.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    buses = sorted(buses)
    if isinstance(peak_load_kw, dict):
        peak_load = [float(peak_load_kw[b]) for b in buses]
    else:
        peak_load = [float(x) for x in peak_load_kw]
    if isinstance(peak_pv_kw, dict):
        peak_pv = [float(peak_pv_kw[b]) for b in buses]
    else:
        peak_pv = [float(x) for x in peak_pv_kw]
    if len(peak_load) != len(buses) or len(peak_pv) != len(buses):
        raise ValueError("need one load and one PV peak per bus")

    rng = np.random.default_rng(seed)
    per_day = 86400 // step_s
    n = days * per_day
    timestamps = start_epoch + step_s * np.arange(n, dtype=np.int64)
    tod_h = (timestamps % 86400) / 3600.0
    day_idx = np.arange(n) // per_day

    # Shared sky: clear half-sine between 06:00 and 18:00, scaled by a per-day
    # quality draw, carved by Gaussian-shaped cloud dips.
    clear = np.sin(np.pi * (tod_h - 6.0) / 12.0)
    clear = np.where((tod_h >= 6.0) & (tod_h <= 18.0), np.maximum(clear, 0.0), 0.0)
    quality = rng.beta(5.0, 2.0, size=days)
    sky = clear * quality[day_idx]
    for d in range(days):
        n_dips = rng.poisson(4.0)
        for _ in range(n_dips):
            center = rng.uniform(6.5, 17.5)
            width = rng.lognormal(np.log(0.25), 0.4)  # hours
            depth = rng.uniform(0.3, 0.9)
            in_day = day_idx == d
            dip = 1.0 - depth * np.exp(-0.5 * ((tod_h - center) / width) ** 2)
            sky[in_day] *= dip[in_day]

    # Load shape: morning and evening humps on a base floor.
    shape_load = (
        0.25
        + 0.45 * np.exp(-0.5 * ((tod_h - 7.5) / 1.2) ** 2)
        + 0.75 * np.exp(-0.5 * ((tod_h - 19.0) / 1.8) ** 2)
    )

    p_pv = np.zeros((n, len(buses)))
    p_load = np.zeros((n, len(buses)))
    for j in range(len(buses)):
        pv_noise = rng.lognormal(0.0, 0.03, size=n)
        series = sky * pv_noise
        top = series.max()
        p_pv[:, j] = series * (peak_pv[j] / top) if top > 0 and peak_pv[j] > 0 else 0.0

        day_scale = rng.uniform(0.85, 1.0, size=days)
        load_noise = rng.lognormal(0.0, 0.1, size=n)
        series = shape_load * day_scale[day_idx] * load_noise
        top = series.max()
        p_load[:, j] = series * (peak_load[j] / top) if top > 0 and peak_load[j] > 0 else 0.0

    return ProfileSet(timestamps, list(buses), p_load, p_pv)
