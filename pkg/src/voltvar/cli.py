"""Command-line front end.

Subcommands: ``run`` (time-series simulation + metrics), ``sweep`` (hosting
capacity), ``fit-droop`` (training data + curve fitting), ``sensitivity``
(voltage/VAr sensitivity export). Settings come from an optional JSON config
file plus flags; flags win. Exit codes: 0 success, 1 numerical failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mldroop
from .controllers import DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_SLOPE_FLOOR
from .grid import Network, load_grid, scale_pv
from .metrics import compute as compute_metrics
from .powerflow import (
    PowerFlowError,
    SensitivityMatrix,
    identity_sensitivity,
    sensitivity,
)
from .profiles import ProfileSet, load_profiles, synth_profiles, write_profiles
from .simulation import (
    SimulationConfig,
    SimulationError,
    apply_scenario,
    capacity_sweep,
    run_timeseries,
)

__all__ = ["main", "RunConfig"]

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2

SWEEP_CONTROLLERS = ("none", "droop", "ofo", "orpf")


@dataclass
class RunConfig:
    """Resolved settings for one command after merging config file and flags."""

    grid: str = "cigre-lv"
    profiles: str | None = None
    controller: str = "none"
    controller_params: dict = field(default_factory=dict)
    scenario_factor: float = 1.0
    out: str | None = None
    v_min: float | None = None
    v_max: float | None = None
    p_start: float | None = None
    p_end: float | None = None
    p_step: float | None = None
    seed: int = 0
    force: bool = False
    downsample_s: int | None = None
    identity: bool = False
    operating_point: str | None = None


class UsageError(Exception):
    pass


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _merge_config(args: argparse.Namespace) -> RunConfig:
    doc = _load_config_file(getattr(args, "config", None))
    ctrl_block = doc.get("controller", {})
    if isinstance(ctrl_block, str):
        ctrl_block = {"type": ctrl_block}

    def pick(flag_name, doc_key, default):
        flag = getattr(args, flag_name, None)
        if flag is not None:
            return flag
        if doc_key in doc:
            return doc[doc_key]
        return default

    cfg = RunConfig()
    cfg.grid = pick("grid", "grid", cfg.grid)
    cfg.profiles = pick("profiles", "profiles", cfg.profiles)
    cfg.controller = getattr(args, "controller", None) or ctrl_block.get("type") or cfg.controller
    cfg.scenario_factor = float(pick("scenario", "scenario_factor", cfg.scenario_factor))
    cfg.out = pick("out", "out", cfg.out)
    cfg.v_min = pick("vmin", "v_min", cfg.v_min)
    cfg.v_max = pick("vmax", "v_max", cfg.v_max)
    sweep_block = doc.get("sweep", {})
    cfg.p_start = pick("p_start", "p_start", sweep_block.get("p_start"))
    cfg.p_end = pick("p_end", "p_end", sweep_block.get("p_end"))
    cfg.p_step = pick("p_step", "p_step", sweep_block.get("p_step"))
    cfg.seed = int(pick("seed", "seed", cfg.seed))
    cfg.force = bool(getattr(args, "force", False))
    cfg.downsample_s = pick("downsample", "downsample_s", None)
    if cfg.downsample_s is not None:
        cfg.downsample_s = int(cfg.downsample_s)
    cfg.identity = bool(getattr(args, "identity", False))
    cfg.operating_point = getattr(args, "operating_point", None)

    params = dict(ctrl_block)
    params.pop("type", None)
    if getattr(args, "alpha", None) is not None:
        params["alpha"] = args.alpha
    if getattr(args, "beta", None) is not None:
        params["beta"] = args.beta
    if getattr(args, "h_matrix", None) is not None:
        params["h_source"] = args.h_matrix
    if getattr(args, "curves", None) is not None:
        params["curves"] = args.curves
    if getattr(args, "slope_floor", None) is not None:
        params["slope_floor"] = args.slope_floor
    if getattr(args, "deadband", None) is not None:
        params["deadband"] = args.deadband
    cfg.controller_params = params
    return cfg


def _resolve_grid(cfg: RunConfig) -> Network:
    if cfg.grid != "cigre-lv" and not Path(cfg.grid).exists():
        raise UsageError(f"grid not found: {cfg.grid}")
    network = load_grid(cfg.grid)
    if cfg.v_min is not None or cfg.v_max is not None:
        network = dataclasses.replace(
            network,
            v_min=cfg.v_min if cfg.v_min is not None else network.v_min,
            v_max=cfg.v_max if cfg.v_max is not None else network.v_max,
        )
    return network


def _resolve_profiles(cfg: RunConfig, network: Network) -> ProfileSet:
    spec = cfg.profiles
    if spec is None:
        raise UsageError("no profiles given (use --profiles PATH or synthetic:<seed>:<days>)")
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        if len(parts) != 3:
            raise UsageError(f"bad synthetic profile spec {spec!r}, expected synthetic:<seed>:<days>")
        seed = int(parts[1]) if parts[1] != "" else cfg.seed
        try:
            days = int(parts[2])
        except ValueError:
            raise UsageError(f"bad synthetic profile spec {spec!r}: days must be an integer") from None
        if days < 1:
            raise UsageError("synthetic profiles need days >= 1")
        peaks = _network_peaks(network)
        profiles = synth_profiles(seed, days, sorted(peaks), peaks, peaks)
    else:
        if not Path(spec).exists():
            raise UsageError(f"profiles not found: {spec}")
        profiles = load_profiles(spec)
    if cfg.downsample_s is not None:
        profiles = load_profiles(write_profiles(profiles), downsample_s=cfg.downsample_s)
    return profiles


def _network_peaks(network: Network) -> dict[int, float]:
    """Per-bus peak kW for synthetic data: the installed inverter size.

    The benchmark feeder sizes its PV to the nominal household connection, so
    load and PV peaks coincide; load buses without an inverter get zero.
    """
    by_bus = {inv.bus: inv.p_peak for inv in network.inverters}
    return {b: float(by_bus.get(b, 0.0)) for b in network.load_buses}


def _prepare_out(cfg: RunConfig, filenames: list[str]) -> Path:
    if cfg.out is None:
        raise UsageError("no output directory given (use --out DIR)")
    out = Path(cfg.out)
    existing = [name for name in filenames if (out / name).exists()]
    if existing and not cfg.force:
        raise UsageError(
            f"output files already exist in {out} ({', '.join(existing)}); use --force to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)
    return out


def _controller_options(cfg: RunConfig, network: Network, kind: str | None = None) -> dict:
    kind = kind or cfg.controller
    params = dict(cfg.controller_params)
    options: dict = {}
    if kind == "droop":
        if "deadband" in params:
            options["deadband"] = float(params["deadband"])
    elif kind == "mldroop":
        curves_dir = params.get("curves")
        if not curves_dir:
            raise UsageError("mldroop needs --curves DIR (output of fit-droop)")
        if not Path(curves_dir).exists():
            raise UsageError(f"curves directory not found: {curves_dir}")
        options["curves"] = mldroop.load_curves(curves_dir, network)
    elif kind == "ofo":
        options["alpha"] = float(params.get("alpha", DEFAULT_ALPHA))
        h_source = params.get("h_source", "computed")
        if h_source not in ("computed", "identity") and not Path(h_source).exists():
            raise UsageError(f"sensitivity file not found: {h_source}")
        options["h_source"] = h_source
    return options


def cmd_run(cfg: RunConfig) -> int:
    network = _resolve_grid(cfg)
    profiles = _resolve_profiles(cfg, network)
    options = _controller_options(cfg, network)
    out = _prepare_out(
        cfg, ["voltages.csv", "reactive_power.csv", "metrics.json", "voltage_histogram.csv"]
    )
    sim_cfg = SimulationConfig(
        profile_step_s=profiles.step_s or 60,
        controller_step_s=10,
        scenario_factor=cfg.scenario_factor,
        controller=cfg.controller,
        controller_options=options,
    )
    result = run_timeseries(network, profiles, sim_cfg)
    report = compute_metrics(result, network.v_min, network.v_max)
    (out / "voltages.csv").write_text(result.voltage_csv(), encoding="utf-8")
    (out / "reactive_power.csv").write_text(result.q_csv(), encoding="utf-8")
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "voltage_histogram.csv").write_text(report.histogram_csv(), encoding="utf-8")
    print(f"run: {len(result)} records, controller={result.controller}, out={out}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    network = _resolve_grid(cfg)
    if cfg.p_start is None or cfg.p_end is None or cfg.p_step is None:
        raise UsageError("sweep needs --p-start, --p-end, and --p-step (per-bus kW)")
    kinds = SWEEP_CONTROLLERS if cfg.controller == "all" else (cfg.controller,)
    filenames = ["capacity.json"]
    for kind in kinds:
        filenames += [f"capacity_{kind}.json", f"levels_{kind}.csv"]
    out = _prepare_out(cfg, filenames)

    summary = {"v_max": network.v_max, "capacity_kw": {}}
    for kind in kinds:
        options = _controller_options(cfg, network, kind)
        result = capacity_sweep(
            network,
            kind,
            float(cfg.p_start),
            float(cfg.p_end),
            float(cfg.p_step),
            controller_options=options,
        )
        (out / f"capacity_{kind}.json").write_text(result.to_json() + "\n", encoding="utf-8")
        (out / f"levels_{kind}.csv").write_text(result.levels_csv(), encoding="utf-8")
        summary["capacity_kw"][kind] = result.capacity_kw
        print(f"sweep: {kind} capacity {result.capacity_kw:.6g} kW")
    (out / "capacity.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_fit_droop(cfg: RunConfig) -> int:
    network = _resolve_grid(cfg)
    profiles = _resolve_profiles(cfg, network)
    # Match the evaluation scenario: scale PV production and inverter
    # resources together before generating training pairs.
    profiles = apply_scenario(profiles, cfg.scenario_factor)
    if cfg.scenario_factor != 1.0:
        network = scale_pv(network, cfg.scenario_factor)
    filenames = ["training_data.csv"] + [f"curve_bus_{inv.bus}.json" for inv in network.inverters]
    out = _prepare_out(cfg, filenames)
    params = cfg.controller_params
    training = mldroop.generate_training_data(network, profiles)
    curves = mldroop.fit_all(
        network,
        training,
        slope_floor=float(params.get("slope_floor", DEFAULT_SLOPE_FLOOR)),
        beta=float(params.get("beta", DEFAULT_BETA)),
    )
    (out / "training_data.csv").write_text(training.to_csv(), encoding="utf-8")
    mldroop.save_curves(out, network, curves)
    print(f"fit-droop: {len(training)} pairs ({training.skipped_steps} steps skipped), {len(curves)} curves, out={out}")
    return EXIT_OK


def cmd_sensitivity(cfg: RunConfig) -> int:
    network = _resolve_grid(cfg)
    out = _prepare_out(cfg, ["sensitivity.csv"])
    if cfg.identity:
        sens = identity_sensitivity(network)
    elif cfg.operating_point is not None:
        spec, sep, stamp = cfg.operating_point.rpartition("@")
        if not sep:
            raise UsageError("operating point must be <profiles>@<timestamp>")
        saved = cfg.profiles
        cfg.profiles = spec
        profiles = _resolve_profiles(cfg, network)
        cfg.profiles = saved
        try:
            t = int(stamp)
        except ValueError:
            raise UsageError(f"operating-point timestamp {stamp!r} must be integer epoch seconds") from None
        hits = np.nonzero(profiles.timestamps == t)[0]
        if len(hits) == 0:
            raise UsageError(f"timestamp {t} not present in profiles {spec}")
        inj = profiles.injections_at(network, int(hits[0]))
        sens = sensitivity(network, inj)
    else:
        sens = sensitivity(network)
    (out / "sensitivity.csv").write_text(sens.to_csv(), encoding="utf-8")
    print(f"sensitivity: {sens.h.shape[0]}x{sens.h.shape[1]} matrix, out={out / 'sensitivity.csv'}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voltvar",
        description="Volt/VAr control simulation for radial low-voltage grids",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, with_profiles=True):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--grid", help="grid JSON path or 'cigre-lv'")
        if with_profiles:
            p.add_argument("--profiles", help="profile CSV path or synthetic:<seed>:<days>")
            p.add_argument("--downsample", type=int, help="mean-downsample profiles to this step (s)")
        p.add_argument("--scenario", type=float, help="PV scaling factor (default 1)")
        p.add_argument("--vmin", type=float, help="lower voltage limit p.u.")
        p.add_argument("--vmax", type=float, help="upper voltage limit p.u.")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--seed", type=int, help="seed for synthetic:<seed empty>:<days> profiles")

    p_run = sub.add_parser("run", help="simulate a profile series under one controller")
    common(p_run)
    p_run.add_argument("--controller", choices=["none", "droop", "mldroop", "ofo", "orpf"])
    p_run.add_argument("--alpha", type=float, help="feedback controller gain")
    p_run.add_argument("--beta", type=float, help="ML-droop smoothing factor")
    p_run.add_argument("--h-matrix", dest="h_matrix", help="'computed', 'identity', or sensitivity CSV path")
    p_run.add_argument("--curves", help="directory of fitted curve JSONs (mldroop)")
    p_run.add_argument("--deadband", type=float, help="droop deadband half-width p.u.")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="hosting-capacity sweep over equal per-bus infeed")
    common(p_sweep, with_profiles=False)
    p_sweep.add_argument("--controller", choices=["all", *SWEEP_CONTROLLERS], default=None)
    p_sweep.add_argument("--alpha", type=float, help="feedback controller gain")
    p_sweep.add_argument("--h-matrix", dest="h_matrix", help="'computed', 'identity', or sensitivity CSV path")
    p_sweep.add_argument("--deadband", type=float, help="droop deadband half-width p.u.")
    p_sweep.add_argument("--p-start", dest="p_start", type=float, help="first per-bus infeed level kW")
    p_sweep.add_argument("--p-end", dest="p_end", type=float, help="last per-bus infeed level kW")
    p_sweep.add_argument("--p-step", dest="p_step", type=float, help="level spacing kW")
    p_sweep.set_defaults(func=cmd_sweep, controller_default="all")

    p_fit = sub.add_parser("fit-droop", help="generate training data and fit Volt/VAr curves")
    common(p_fit)
    p_fit.add_argument("--beta", type=float, help="smoothing factor stored in the curves")
    p_fit.add_argument("--slope-floor", dest="slope_floor", type=float, help="most negative slope kVAr/p.u.")
    p_fit.set_defaults(func=cmd_fit_droop)

    p_sens = sub.add_parser("sensitivity", help="export the voltage/VAr sensitivity matrix")
    common(p_sens)
    p_sens.add_argument("--identity", action="store_true", help="write the per-unit identity substitute")
    p_sens.add_argument(
        "--operating-point",
        dest="operating_point",
        help="<profiles>@<epoch seconds>: linearize at that snapshot instead of no-load",
    )
    p_sens.set_defaults(func=cmd_sensitivity)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merge_config(args)
        if getattr(args, "command", "") == "sweep" and getattr(args, "controller", None) is None:
            if "controller" not in _load_config_file(getattr(args, "config", None)):
                cfg.controller = "all"
        return args.func(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PowerFlowError, SimulationError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
