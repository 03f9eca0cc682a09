"""Fisher-information-guided battery charging: offline D-optimal design plus adaptive MPC."""

from .config import RunConfig, load_run_config, parse_scenario
from .ecm import (
    ConfigError,
    CurrentProfile,
    EcmState,
    ModelError,
    OcvPolynomial,
    ScenarioConfig,
    ThetaVector,
    ocv_eval,
    simulate,
    step,
)
from .estimator import EstimatorConfig, MeasurementWindow, update_parameters, voltage_residual_cost
from .mpc import ClosedLoopLog, MpcConfig, run_closed_loop, solve_step
from .oed import GaConfig, PenaltySpec, ReferenceTrajectory, fitness, run_oed
from .sensitivity import FimMatrix, assemble_fim, d_optimality, sensitivities, sensitivity_step

__all__ = [
    "ClosedLoopLog", "ConfigError", "CurrentProfile", "EcmState", "EstimatorConfig", "FimMatrix",
    "GaConfig", "MeasurementWindow", "ModelError", "MpcConfig", "OcvPolynomial", "PenaltySpec",
    "ReferenceTrajectory", "RunConfig", "ScenarioConfig", "ThetaVector", "assemble_fim",
    "d_optimality", "fitness", "load_run_config", "ocv_eval", "parse_scenario", "run_closed_loop",
    "run_oed", "sensitivities", "sensitivity_step", "simulate", "solve_step", "step",
    "update_parameters", "voltage_residual_cost",
]
