"""Convert a Dataport-style household export into the profile CSV format.

Input: a long-format CSV with one row per (timestamp, home), e.g. the
Pecan Street Dataport per-home export. Required columns (names settable by
flag): a timestamp (ISO 8601 or integer epoch seconds), a home identifier,
a consumption column and a PV generation column, both in kW. A JSON mapping
file assigns one home to each load bus:

    {"11": 661, "15": 2335, "16": 4031, "17": 5746, "18": 9019}

Rows are averaged onto the requested step, negative readings (nighttime PV
sensor noise) are clipped to zero, and time gaps or (bus, step) windows
without data are errors. The output loads with voltvar.profiles.load_profiles.

Usage:
    python3 scripts/convert_dataport.py export.csv mapping.json profiles.csv
"""

import argparse
import csv
import json
from datetime import datetime, timezone

import numpy as np

from voltvar.profiles import ProfileSet, write_profiles


def parse_epoch(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        stamp = datetime.fromisoformat(text)
        if stamp.tzinfo is None:
            stamp = stamp.replace(tzinfo=timezone.utc)
        return int(stamp.timestamp())


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("export", help="long-format CSV export")
    ap.add_argument("mapping", help="JSON file mapping bus id to home id")
    ap.add_argument("out", help="profile CSV to write")
    ap.add_argument("--step", type=int, default=60, help="output step in seconds")
    ap.add_argument("--time-col", default="localminute")
    ap.add_argument("--id-col", default="dataid")
    ap.add_argument("--load-col", default="use")
    ap.add_argument("--pv-col", default="solar")
    args = ap.parse_args(argv)

    with open(args.mapping, encoding="utf-8") as fh:
        mapping = {int(bus): str(home) for bus, home in json.load(fh).items()}
    home_to_bus = {home: bus for bus, home in mapping.items()}
    if len(home_to_bus) != len(mapping):
        raise SystemExit("error: mapping assigns one home to several buses")

    # sums[(window, bus)] accumulates (load, pv, count) for averaging.
    sums: dict[tuple[int, int], list[float]] = {}
    with open(args.export, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for col in (args.time_col, args.id_col, args.load_col, args.pv_col):
            if col not in (reader.fieldnames or []):
                raise SystemExit(f"error: export lacks column {col!r} (has {reader.fieldnames})")
        for row in reader:
            bus = home_to_bus.get(str(row[args.id_col]))
            if bus is None:
                continue
            window = parse_epoch(row[args.time_col]) // args.step * args.step
            load = max(float(row[args.load_col] or 0.0), 0.0)
            pv = max(float(row[args.pv_col] or 0.0), 0.0)
            cell = sums.setdefault((window, bus), [0.0, 0.0, 0])
            cell[0] += load
            cell[1] += pv
            cell[2] += 1
    if not sums:
        raise SystemExit("error: export contains no rows for the mapped homes")

    buses = sorted(mapping)
    windows = sorted({w for w, _ in sums})
    jumps = np.flatnonzero(np.diff(windows) != args.step)
    if jumps.size:
        raise SystemExit(
            f"error: time gap between {windows[jumps[0]]} and {windows[jumps[0] + 1]} "
            f"(expected step {args.step} s)"
        )
    missing = [
        f"bus {b} at {w}" for w in windows for b in buses if (w, b) not in sums
    ]
    if missing:
        raise SystemExit(
            f"error: {len(missing)} empty (bus, step) windows, first: {missing[0]}"
        )

    load_kw = np.array([[sums[(w, b)][0] / sums[(w, b)][2] for b in buses] for w in windows])
    pv_kw = np.array([[sums[(w, b)][1] / sums[(w, b)][2] for b in buses] for w in windows])
    profiles = ProfileSet(
        timestamps=np.array(windows, dtype=np.int64),
        buses=buses,
        p_load_kw=load_kw,
        p_pv_kw=pv_kw,
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(write_profiles(profiles))
    print(f"wrote {len(windows)} steps x {len(buses)} buses to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
