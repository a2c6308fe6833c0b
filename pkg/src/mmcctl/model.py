"""Discrete-time average models of a three-phase modular multilevel converter.

State layouts are interleaved per phase (a, b, c):

* reduced state ``xbar`` (6): ``[iu_a, il_a, iu_b, il_b, iu_c, il_c]``
* full state ``x`` (12): ``[iu_a, il_a, vu_a, vl_a, iu_b, ...]`` where ``vu``/``vl``
  are total arm voltages
* arm voltages ``u`` and insertion indices ``eta`` (6): same layout as ``xbar``
* outputs ``y`` and references ``r`` (6): ``[ig_a, iz_a, ig_b, iz_b, ig_c, iz_c]``
* exogenous state ``w`` (8): ``[vg_a, vg'_a, vg_b, vg'_b, vg_c, vg'_c, vz, vz']``

The quadrature channel ``v'`` is generated by the rotation recursion
``w+ = S w`` so that ``v = V cos(theta)`` and ``v' = -V sin(theta)``.
All matrices come from forward-Euler discretization at the sample period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from .errors import ConfigError

N_PHASES = 3
PHASE_NAMES = ("a", "b", "c")
# balanced three-phase grid: phase m lags phase a by 2*pi*m/3
PHASE_OFFSETS = (0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0)

REDUCED_CURRENT_INDEX = np.array([0, 1, 4, 5, 8, 9])
VOLTAGE_INDEX = np.array([2, 3, 6, 7, 10, 11])


def discretization_constants(params) -> Tuple[float, float, float]:
    """Return ``(K1, K2, K3)`` for the forward-Euler arm model.

    ``K1 = 1 - R Ts / L``, ``K2 = Ts / L``, ``K3 = -N Ts / C``.  Raises
    :class:`ConfigError` unless ``0 < K1 < 1``.
    """
    L = params.arm_inductance
    R = params.arm_resistance
    C = params.module_capacitance
    N = params.modules_per_arm
    Ts = params.sample_period
    k1 = 1.0 - R * Ts / L
    k2 = Ts / L
    k3 = -N * Ts / C
    if not 0.0 < k1 < 1.0:
        raise ConfigError(
            f"K1 = {k1!r} outside (0, 1); need 0 < sample_period < L/R",
            field="circuit",
        )
    return k1, k2, k3


@dataclass(frozen=True)
class CircuitParams:
    """Per-arm physical constants and the controller sample period (SI units)."""

    arm_inductance: float
    arm_resistance: float
    module_capacitance: float
    modules_per_arm: int = 1
    sample_period: float = 2e-5

    def __post_init__(self):
        for name in ("arm_inductance", "arm_resistance", "module_capacitance", "sample_period"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be strictly positive, got {value!r}", field=name)
        if int(self.modules_per_arm) != self.modules_per_arm or self.modules_per_arm < 1:
            raise ConfigError("modules_per_arm must be a positive integer", field="modules_per_arm")
        discretization_constants(self)

    @property
    def K1(self) -> float:
        return discretization_constants(self)[0]

    @property
    def K2(self) -> float:
        return discretization_constants(self)[1]

    @property
    def K3(self) -> float:
        return discretization_constants(self)[2]


@dataclass(frozen=True)
class PortSpec:
    """Grid- and output-side waveform descriptors.

    Peak values in volts/amperes, frequencies in hertz, phases in radians.
    ``output_peak_current`` stays ``None`` until the common-mode reference is
    solved (see :func:`mmcctl.references.complete_port_spec`).
    """

    grid_peak_voltage: float
    grid_frequency: float
    output_peak_voltage: float
    output_frequency: float
    grid_peak_current: float
    grid_current_phase: float = 0.0
    output_current_phase: float = 0.0
    output_peak_current: Optional[float] = None

    def __post_init__(self):
        for name in ("grid_peak_voltage", "grid_frequency", "output_peak_voltage", "output_frequency"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be strictly positive, got {value!r}", field=name)
        if not (np.isfinite(self.grid_peak_current) and self.grid_peak_current >= 0):
            raise ConfigError("grid_peak_current must be nonnegative", field="grid_peak_current")
        if self.output_peak_current is not None and not self.output_peak_current >= 0:
            raise ConfigError("output_peak_current must be nonnegative", field="output_peak_current")

    @property
    def arm_voltage_base(self) -> float:
        """``V_g + V_z``: insertion-index normalization and nominal total arm voltage."""
        return self.grid_peak_voltage + self.output_peak_voltage

    @property
    def grid_omega(self) -> float:
        return 2.0 * math.pi * self.grid_frequency

    @property
    def output_omega(self) -> float:
        return 2.0 * math.pi * self.output_frequency

    def with_output_current(self, amplitude: float, phase: float) -> "PortSpec":
        return replace(self, output_peak_current=float(amplitude), output_current_phase=float(phase))


def samples_per_period(frequency: float, sample_period: float, field: str = "frequency") -> int:
    """``1 / (f Ts)`` as an integer; non-integer sample counts are rejected."""
    n = 1.0 / (frequency * sample_period)
    k = int(round(n))
    if k < 1 or abs(n - k) > 1e-9 * n:
        raise ConfigError(
            f"{field}={frequency!r} Hz gives {n!r} samples per period at Ts={sample_period!r}; "
            "an integer is required",
            field=field,
        )
    return k


def check_sampling(params: CircuitParams, spec: PortSpec) -> Tuple[int, int]:
    """Return ``(N_t(f1), N_t(f2))`` or raise :class:`ConfigError`."""
    return (
        samples_per_period(spec.grid_frequency, params.sample_period, "grid_frequency"),
        samples_per_period(spec.output_frequency, params.sample_period, "output_frequency"),
    )


def rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, s], [-s, c]])


def exogenous_matrix(params: CircuitParams, spec: PortSpec) -> np.ndarray:
    Ts = params.sample_period
    g = rotation(spec.grid_omega * Ts)
    return scipy.linalg.block_diag(g, g, g, rotation(spec.output_omega * Ts))


def exogenous_state(spec: PortSpec, time: float = 0.0) -> np.ndarray:
    """Exogenous vector ``w`` at continuous time ``time`` (seconds)."""
    w = np.empty(8)
    for m, offset in enumerate(PHASE_OFFSETS):
        theta = spec.grid_omega * time + offset
        w[2 * m] = spec.grid_peak_voltage * math.cos(theta)
        w[2 * m + 1] = -spec.grid_peak_voltage * math.sin(theta)
    theta = spec.output_omega * time
    w[6] = spec.output_peak_voltage * math.cos(theta)
    w[7] = -spec.output_peak_voltage * math.sin(theta)
    return w


def exogenous_initial_state(spec: PortSpec, phase: float = 0.0) -> np.ndarray:
    """``w(0)`` with the phase-a grid angle set to ``phase`` radians.

    The output channel starts at the angle it has at the same instant, so
    grid and output waveforms stay time-consistent.
    """
    return exogenous_state(spec, phase / spec.grid_omega)


def exogenous_series(spec: PortSpec, params: CircuitParams, steps: int, phase: float = 0.0) -> np.ndarray:
    """Closed-form ``w(k)`` for ``k = 0..steps-1`` (rows)."""
    t = phase / spec.grid_omega + params.sample_period * np.arange(steps)
    out = np.empty((steps, 8))
    for m, offset in enumerate(PHASE_OFFSETS):
        theta = spec.grid_omega * t + offset
        out[:, 2 * m] = spec.grid_peak_voltage * np.cos(theta)
        out[:, 2 * m + 1] = -spec.grid_peak_voltage * np.sin(theta)
    theta = spec.output_omega * t
    out[:, 6] = spec.output_peak_voltage * np.cos(theta)
    out[:, 7] = -spec.output_peak_voltage * np.sin(theta)
    return out


def output_matrix() -> np.ndarray:
    """``C_bar`` (6x6): per phase ``ig = iu - il`` and ``iz = (iu + il)/2``."""
    block = np.array([[1.0, -1.0], [0.5, 0.5]])
    return scipy.linalg.block_diag(block, block, block)


def full_output_matrix() -> np.ndarray:
    """``C`` (6x12) acting on the full state; voltage columns are zero."""
    C = np.zeros((6, 12))
    C[:, REDUCED_CURRENT_INDEX] = output_matrix()
    return C


def exogenous_input_matrix(params: CircuitParams) -> np.ndarray:
    """``E`` (6x8) for the reduced model."""
    k2 = params.K2
    E = np.zeros((6, 8))
    for m in range(N_PHASES):
        E[2 * m, 2 * m] = k2
        E[2 * m + 1, 2 * m] = -k2
    E[:, 6] = -k2
    return E


def full_exogenous_input_matrix(params: CircuitParams) -> np.ndarray:
    """``E`` zero-padded to the 12-state model (voltage rows zero)."""
    E = np.zeros((12, 8))
    E[REDUCED_CURRENT_INDEX] = exogenous_input_matrix(params)
    return E


@dataclass(frozen=True, eq=False)
class LinearModel:
    """Reduced linear model ``xbar+ = A xbar + B u + E w``, ``y = C xbar``, with
    exogenous system ``w+ = S w`` and reference map ``r = O w``."""

    A_bar: np.ndarray
    B_bar: np.ndarray
    E: np.ndarray
    C_bar: np.ndarray
    S: np.ndarray
    O: np.ndarray
    params: Optional[CircuitParams] = field(default=None, repr=False)
    spec: Optional[PortSpec] = field(default=None, repr=False)

    @property
    def n_states(self) -> int:
        return self.A_bar.shape[0]


def build_linear_model(params: CircuitParams, spec: PortSpec, O: Optional[np.ndarray] = None) -> LinearModel:
    """Assemble the reduced linear model.

    ``O`` defaults to :func:`mmcctl.references.build_output_map` applied to
    ``spec``, which requires ``spec.output_peak_current`` to be set.
    """
    check_sampling(params, spec)
    k1, k2, _ = discretization_constants(params)
    if O is None:
        from .references import build_output_map

        _, O = build_output_map(spec)
    O = np.asarray(O, dtype=float)
    if O.shape != (6, 8):
        raise ValueError(f"O must be 6x8, got {O.shape}")
    return LinearModel(
        A_bar=k1 * np.eye(6),
        B_bar=k2 * np.eye(6),
        E=exogenous_input_matrix(params),
        C_bar=output_matrix(),
        S=exogenous_matrix(params, spec),
        O=O,
        params=params,
        spec=spec,
    )


def _check_eta(eta) -> np.ndarray:
    eta = np.asarray(eta, dtype=float).reshape(-1)
    if eta.shape != (6,):
        raise ValueError(f"insertion index must have 6 entries, got {eta.shape}")
    if np.any(~np.isfinite(eta)) or np.any(np.abs(eta) > 1.0):
        raise ValueError("insertion indices must lie in [-1, 1]")
    return eta


def phase_block(params: CircuitParams, eta_upper: float, eta_lower: float, ideal: bool = False) -> np.ndarray:
    """Per-phase 4x4 bilinear matrix ``A(eta)`` (or the ideal variant)."""
    k1, k2, k3 = discretization_constants(params)
    A = np.array(
        [
            [k1, 0.0, k2 * eta_upper, 0.0],
            [0.0, k1, 0.0, k2 * eta_lower],
            [k3 * eta_upper, 0.0, 1.0, 0.0],
            [0.0, k3 * eta_lower, 0.0, 1.0],
        ]
    )
    if ideal:
        A[2, 0] = 0.0
        A[3, 1] = 0.0
    return A


def build_bilinear_A(params: CircuitParams, eta) -> np.ndarray:
    eta = _check_eta(eta)
    return scipy.linalg.block_diag(*[phase_block(params, eta[2 * m], eta[2 * m + 1]) for m in range(N_PHASES)])


def build_ideal_bilinear_A(params: CircuitParams, eta) -> np.ndarray:
    """Bilinear matrix with the total-arm-voltage rows frozen to identity."""
    eta = _check_eta(eta)
    return scipy.linalg.block_diag(
        *[phase_block(params, eta[2 * m], eta[2 * m + 1], ideal=True) for m in range(N_PHASES)]
    )


def mode_transform(iota_u, iota_l):
    """Return ``(delta, sigma) = ((u - l)/2, (u + l)/2)``."""
    iota_u = np.asarray(iota_u, dtype=float)
    iota_l = np.asarray(iota_l, dtype=float)
    return (iota_u - iota_l) / 2.0, (iota_u + iota_l) / 2.0


def inverse_mode_transform(delta, sigma):
    delta = np.asarray(delta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return sigma + delta, sigma - delta


def saturate(xi):
    return np.clip(xi, -1.0, 1.0)


def arm_voltage_to_insertion(u, spec: PortSpec):
    """Map arm voltages to insertion indices.

    Returns ``(eta, saturated)`` where ``saturated`` is true when any entry was
    clipped to ``[-1, 1]``.
    """
    xi = np.asarray(u, dtype=float) / spec.arm_voltage_base
    return saturate(xi), bool(np.any(np.abs(xi) > 1.0))


def outputs_from_state(xbar) -> np.ndarray:
    return output_matrix() @ np.asarray(xbar, dtype=float)
