"""End-to-end orchestration shared by the command line and the tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .certification import certify_phase
from .config import RunConfig
from .model import build_linear_model
from .references import complete_port_spec
from .simulator import run_closed_loop
from .synthesis import build_box_polytopes, solve_regulator_equations, synthesize, verify_controller

logger = logging.getLogger(__name__)


@dataclass
class Plant:
    """Everything derived from the configuration before synthesis."""

    spec: object
    sigma: object
    model: object
    sylvester: object
    polytopes: object


def build_plant(cfg: RunConfig) -> Plant:
    spec, sigma = complete_port_spec(cfg.circuit, cfg.ports)
    model = build_linear_model(cfg.circuit, spec)
    sylvester = solve_regulator_equations(model)
    polytopes = build_box_polytopes(
        cfg.state_fraction,
        cfg.input_fraction,
        spec.grid_peak_current + spec.output_peak_current,
        spec.arm_voltage_base,
    )
    logger.info(
        "%s: common-mode reference %.6g A at %.4g rad, regulator condition %.3g",
        cfg.name,
        sigma.amplitude,
        sigma.phase,
        sylvester.condition,
    )
    return Plant(spec, sigma, model, sylvester, polytopes)


def run_synthesis(cfg: RunConfig, plant: Plant = None):
    """Return ``(controller, verification_report, plant)``."""
    plant = plant or build_plant(cfg)
    s = cfg.synthesis
    controller = synthesize(
        plant.model,
        plant.polytopes,
        objective=s.objective,
        fixed_Kx=s.fixed_Kx,
        structure=s.structure,
        sylvester=plant.sylvester,
    )
    report = verify_controller(plant.model, controller, plant.polytopes)
    logger.info("%s: Kx diagonal %s, verification %s", cfg.name, controller.Kx.diagonal(), report.passed)
    return controller, report, plant


def run_certification(cfg: RunConfig):
    return certify_phase(cfg.circuit, cfg.certification_box, cfg.certification_margin)


def run_simulation(cfg: RunConfig, controller, plant: Plant = None, Q_phase=None):
    plant = plant or build_plant(cfg)
    return run_closed_loop(plant.model, controller, cfg.simulation, Q_phase=Q_phase)
