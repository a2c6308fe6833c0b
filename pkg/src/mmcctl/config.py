"""Run configuration files (YAML).

Layout (``schema_version: 1``)::

    schema_version: 1
    name: table1
    circuit:        {arm_inductance, arm_resistance, module_capacitance, modules_per_arm, sample_period}
    ports:          {grid_peak_voltage, grid_frequency, output_peak_voltage, output_frequency,
                     grid_peak_current, grid_current_phase}
    constraints:    {state_fraction, input_fraction}
    synthesis:      {objective, structure, fixed_Kx}
    certification:  {eta_low, eta_high, margin}
    simulation:     {scenario, grid_periods | steps, initial_exogenous_phase,
                     total_arm_voltage_init, record_stride, transient_periods}
    output_dir: out/table1

``fixed_Kx`` is ``null``, a scalar (times identity) or a 6x6 nested list.
Relative ``output_dir`` values resolve against the working directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .certification import SchedulingBox
from .errors import ConfigError
from .model import CircuitParams, PortSpec, check_sampling, samples_per_period
from .simulator import SimConfig
from .synthesis import OBJECTIVES

SCHEMA_VERSION = 1

_SECTIONS = {
    "circuit": {"arm_inductance", "arm_resistance", "module_capacitance", "modules_per_arm", "sample_period"},
    "ports": {
        "grid_peak_voltage",
        "grid_frequency",
        "output_peak_voltage",
        "output_frequency",
        "grid_peak_current",
        "grid_current_phase",
    },
    "constraints": {"state_fraction", "input_fraction"},
    "synthesis": {"objective", "structure", "fixed_Kx"},
    "certification": {"eta_low", "eta_high", "margin"},
    "simulation": {
        "scenario",
        "grid_periods",
        "steps",
        "initial_exogenous_phase",
        "total_arm_voltage_init",
        "record_stride",
        "transient_periods",
    },
}
_REQUIRED = {
    "circuit": {"arm_inductance", "arm_resistance", "module_capacitance"},
    "ports": {"grid_peak_voltage", "grid_frequency", "output_peak_voltage", "output_frequency", "grid_peak_current"},
}


@dataclass(frozen=True)
class SynthesisSettings:
    objective: str = "max-logdet"
    structure: str = "per-phase"
    fixed_Kx: Optional[np.ndarray] = None


@dataclass(frozen=True)
class RunConfig:
    circuit: CircuitParams
    ports: PortSpec
    state_fraction: float
    input_fraction: float
    synthesis: SynthesisSettings
    certification_box: SchedulingBox
    certification_margin: float
    simulation: SimConfig
    transient_periods: int
    output_dir: Path
    name: str = "run"


def _number(section, key, value, integer=False):
    field = f"{section}.{key}"
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{field} must be a number, got {value!r}", field=field)
    if integer:
        if int(value) != value:
            raise ConfigError(f"{field} must be an integer, got {value!r}", field=field)
        return int(value)
    return float(value)


def _section(raw, name):
    data = raw.get(name, {}) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{name} must be a mapping", field=name)
    unknown = set(data) - _SECTIONS[name]
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown key {name}.{key}", field=f"{name}.{key}")
    missing = _REQUIRED.get(name, set()) - set(data)
    if missing:
        key = sorted(missing)[0]
        raise ConfigError(f"missing required key {name}.{key}", field=f"{name}.{key}")
    return data


def _prefixed(section, fn, *args, **kwargs):
    """Call ``fn`` and qualify any ConfigError field with the section name."""
    try:
        return fn(*args, **kwargs)
    except ConfigError as exc:
        field = exc.field or ""
        if field and not field.startswith(section + ".") and field not in ("circuit",):
            field = f"{section}.{field}"
        raise ConfigError(str(exc), field=field or section) from None


def parse_config(raw: dict, base_dir: Optional[Path] = None) -> RunConfig:
    """Validate a parsed YAML mapping and build the run configuration."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping", field="<root>")
    unknown = set(raw) - set(_SECTIONS) - {"schema_version", "name", "output_dir"}
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown top-level key {key}", field=key)
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}", field="schema_version")

    c = _section(raw, "circuit")
    circuit = _prefixed(
        "circuit",
        CircuitParams,
        arm_inductance=_number("circuit", "arm_inductance", c["arm_inductance"]),
        arm_resistance=_number("circuit", "arm_resistance", c["arm_resistance"]),
        module_capacitance=_number("circuit", "module_capacitance", c["module_capacitance"]),
        modules_per_arm=_number("circuit", "modules_per_arm", c.get("modules_per_arm", 1), integer=True),
        sample_period=_number("circuit", "sample_period", c.get("sample_period", 2e-5)),
    )

    p = _section(raw, "ports")
    ports = _prefixed(
        "ports",
        PortSpec,
        **{k: _number("ports", k, v) for k, v in p.items()},
    )
    _prefixed("ports", check_sampling, circuit, ports)

    k = _section(raw, "constraints")
    fractions = {}
    for key, default in (("state_fraction", 0.1), ("input_fraction", 0.08)):
        v = _number("constraints", key, k.get(key, default))
        if not 0.0 < v < 1.0:
            raise ConfigError(f"constraints.{key} must lie in (0, 1), got {v!r}", field=f"constraints.{key}")
        fractions[key] = v

    s = _section(raw, "synthesis")
    objective = s.get("objective", "max-logdet")
    if objective not in OBJECTIVES:
        raise ConfigError(f"synthesis.objective must be one of {OBJECTIVES}", field="synthesis.objective")
    structure = s.get("structure", "per-phase")
    if structure not in ("per-phase", "full"):
        raise ConfigError("synthesis.structure must be 'per-phase' or 'full'", field="synthesis.structure")
    fixed = s.get("fixed_Kx")
    if fixed is not None:
        try:
            arr = np.asarray(fixed, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError("synthesis.fixed_Kx must be numeric", field="synthesis.fixed_Kx") from None
        if arr.ndim == 0:
            arr = float(arr) * np.eye(6)
        if arr.shape != (6, 6) or not np.all(np.isfinite(arr)):
            raise ConfigError("synthesis.fixed_Kx must be a scalar or a 6x6 matrix", field="synthesis.fixed_Kx")
        fixed = arr

    cert = _section(raw, "certification")
    lo = _number("certification", "eta_low", cert.get("eta_low", 0.1))
    hi = _number("certification", "eta_high", cert.get("eta_high", 1.0))
    try:
        box = SchedulingBox(lo, hi)
    except ValueError as exc:
        raise ConfigError(str(exc), field="certification.eta_low") from None
    margin = _number("certification", "margin", cert.get("margin", 1e-9))
    if margin < 0:
        raise ConfigError("certification.margin must be nonnegative", field="certification.margin")

    sim = _section(raw, "simulation")
    if "steps" in sim and "grid_periods" in sim:
        raise ConfigError("give either simulation.steps or simulation.grid_periods", field="simulation.steps")
    n_grid = samples_per_period(ports.grid_frequency, circuit.sample_period, "ports.grid_frequency")
    if "steps" in sim:
        steps = _number("simulation", "steps", sim["steps"], integer=True)
    else:
        steps = n_grid * _number("simulation", "grid_periods", sim.get("grid_periods", 40), integer=True)
    transient = _number("simulation", "transient_periods", sim.get("transient_periods", 10), integer=True)
    if transient < 0:
        raise ConfigError("simulation.transient_periods must be nonnegative", field="simulation.transient_periods")
    v0 = sim.get("total_arm_voltage_init")
    simcfg = SimConfig(
        scenario=sim.get("scenario", "bilinear"),
        steps=steps,
        initial_exogenous_phase=_number("simulation", "initial_exogenous_phase", sim.get("initial_exogenous_phase", 0.0)),
        total_arm_voltage_init=None if v0 is None else _number("simulation", "total_arm_voltage_init", v0),
        record_stride=_number("simulation", "record_stride", sim.get("record_stride", 1), integer=True),
    )

    out = Path(raw.get("output_dir", "out"))
    if not out.is_absolute() and base_dir is not None:
        out = Path(base_dir) / out
    return RunConfig(
        circuit=circuit,
        ports=ports,
        state_fraction=fractions["state_fraction"],
        input_fraction=fractions["input_fraction"],
        synthesis=SynthesisSettings(objective, structure, fixed),
        certification_box=box,
        certification_margin=margin,
        simulation=simcfg,
        transient_periods=transient,
        output_dir=out,
        name=str(raw.get("name", "run")),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}", field="<file>") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}", field="<file>") from None
    return parse_config(raw)


def shipped_config_path(name: str) -> Path:
    """Path of a configuration shipped with the package (``table1`` or ``table2``)."""
    p = Path(__file__).parent / "configs" / f"{name}.yaml"
    if not p.exists():
        raise FileNotFoundError(p)
    return p


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
