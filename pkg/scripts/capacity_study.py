"""Hosting-capacity comparison across controllers on the benchmark feeder.

Sweeps equal per-bus PV infeed for each requested controller, prints the
capacity table with the gain over the uncontrolled grid, and writes the
per-level curves plus a summary JSON. With --plot the level curves are also
drawn against the voltage limit.

Usage:
    python3 scripts/capacity_study.py --out results/capacity --plot
"""

import argparse
import json
from pathlib import Path

from voltvar.grid import load_grid
from voltvar.simulation import capacity_sweep

CONTROLLERS = ("none", "droop", "ofo", "orpf")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="cigre-lv", help="named grid or grid JSON path")
    ap.add_argument("--controllers", default=",".join(CONTROLLERS),
                    help="comma-separated subset of none,droop,ofo,orpf")
    ap.add_argument("--p-start", type=float, default=60.0, help="first per-bus level, kW")
    ap.add_argument("--p-end", type=float, default=130.0, help="last per-bus level, kW")
    ap.add_argument("--p-step", type=float, default=1.0, help="level increment, kW")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--plot", action="store_true", help="write capacity.png")
    args = ap.parse_args(argv)

    kinds = [k.strip() for k in args.controllers.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in CONTROLLERS]
    if unknown:
        ap.error(f"unknown controllers {unknown}, pick from {CONTROLLERS}")

    network = load_grid(args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    results = {}
    for kind in kinds:
        results[kind] = capacity_sweep(network, kind, args.p_start, args.p_end, args.p_step)
        (out / f"capacity_{kind}.json").write_text(results[kind].to_json(), encoding="utf-8")
        (out / f"levels_{kind}.csv").write_text(results[kind].levels_csv(), encoding="utf-8")

    summary = {
        "v_max": network.v_max,
        "capacity_kw": {k: results[k].capacity_kw for k in kinds},
    }
    (out / "capacity.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")

    base = results["none"].capacity_kw if "none" in results else None
    print(f"{'controller':<10} {'capacity kW':>12} {'vs none':>9}")
    for kind in kinds:
        cap = results[kind].capacity_kw
        gain = f"{(cap - base) / base:+.1%}" if base else "-"
        print(f"{kind:<10} {cap:>12.1f} {gain:>9}")

    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(7, 4.5))
        for kind in kinds:
            res = results[kind]
            ax.plot(res.level_total_kw, res.max_v_pu, label=kind)
            ax.axvline(res.capacity_kw, color="grey", lw=0.6, ls=":")
        ax.axhline(network.v_max, color="red", lw=0.8, ls="--", label="v_max")
        ax.set_xlabel("total PV infeed (kW)")
        ax.set_ylabel("max bus voltage (p.u.)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "capacity.png", dpi=150)
        print(f"figure: {out / 'capacity.png'}")

    return 0


if __name__ == "__main__":
    raise SystemExit(main())
