"""Volt/VAr control for radial low-voltage grids: quasi-static simulation,
droop and feedback-optimization controllers, reference reactive dispatch,
and hosting-capacity analysis."""

from .controllers import (
    ControllerObservation,
    DroopCurve,
    MlDroopCurve,
    OfoState,
    default_droop_curve,
    droop_eval,
    make_controller,
    mldroop_step,
    ofo_step,
    orpf_solve,
)
from .grid import (
    Branch,
    Bus,
    Inverter,
    Network,
    build_cigre_lv_residential,
    load_grid,
    save_grid,
    scale_pv,
)
from .metrics import MetricsReport, compute
from .mldroop import TrainingSet, fit_curve, generate_training_data
from .powerflow import (
    Injections,
    PowerFlowError,
    PowerFlowSolution,
    SensitivityMatrix,
    identity_sensitivity,
    sensitivity,
    solve,
)
from .profiles import ProfileSet, load_profiles, synth_profiles, write_profiles
from .simulation import (
    CapacityResult,
    SimulationConfig,
    SimulationError,
    SimulationResult,
    apply_scenario,
    capacity_sweep,
    run_timeseries,
)

__version__ = "0.1.0"

__all__ = [
    "Branch",
    "Bus",
    "CapacityResult",
    "ControllerObservation",
    "DroopCurve",
    "Injections",
    "Inverter",
    "MetricsReport",
    "MlDroopCurve",
    "Network",
    "OfoState",
    "PowerFlowError",
    "PowerFlowSolution",
    "ProfileSet",
    "SensitivityMatrix",
    "SimulationConfig",
    "SimulationError",
    "SimulationResult",
    "TrainingSet",
    "apply_scenario",
    "build_cigre_lv_residential",
    "capacity_sweep",
    "compute",
    "default_droop_curve",
    "droop_eval",
    "fit_curve",
    "generate_training_data",
    "identity_sensitivity",
    "load_grid",
    "load_profiles",
    "make_controller",
    "mldroop_step",
    "ofo_step",
    "orpf_solve",
    "run_timeseries",
    "save_grid",
    "scale_pv",
    "sensitivity",
    "solve",
    "synth_profiles",
    "write_profiles",
    "__version__",
]
