"""Closed-loop simulation of the tracking controller.

Scenario ``"linear"`` drives the reduced linear model.  Scenario
``"bilinear"`` drives the 12-state average model: arm voltages are converted
to saturated insertion indices, and an ideal copy of the plant whose
arm-voltage states stay frozen is advanced with the same indices so that the
deviation ``eps = x - x_ideal`` can be tracked.  The controller only ever
reads arm currents.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import _kernels
from .errors import ConfigError, SimulationDiverged
from .model import (
    REDUCED_CURRENT_INDEX,
    VOLTAGE_INDEX,
    LinearModel,
    discretization_constants,
    exogenous_initial_state,
    full_exogenous_input_matrix,
)

logger = logging.getLogger(__name__)

SCENARIOS = ("linear", "bilinear")
DIVERGENCE_FACTOR = 1e6


@dataclass
class SimConfig:
    """Simulation settings.

    ``initial_reduced_state`` (6) is used by the linear scenario and supplies
    the arm currents of the bilinear one unless ``initial_full_state`` (12) is
    given.  Total arm voltages default to ``total_arm_voltage_init`` which in
    turn defaults to the arm voltage base ``Vg + Vz``.
    """

    scenario: str = "bilinear"
    steps: int = 40000
    initial_reduced_state: Optional[np.ndarray] = None
    initial_full_state: Optional[np.ndarray] = None
    initial_exogenous_phase: float = 0.0
    total_arm_voltage_init: Optional[float] = None
    record_stride: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}", field="simulation.scenario")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError("steps must be a positive integer", field="simulation.steps")
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            raise ConfigError("record_stride must be a positive integer", field="simulation.record_stride")
        self.steps = int(self.steps)
        self.record_stride = int(self.record_stride)
        if self.total_arm_voltage_init is not None and not self.total_arm_voltage_init > 0:
            raise ConfigError("initial total arm voltages must be positive", field="simulation.total_arm_voltage_init")
        if self.initial_full_state is not None:
            x = np.asarray(self.initial_full_state, dtype=float)
            if x.shape != (12,):
                raise ConfigError("initial_full_state must have 12 entries", field="simulation.initial_full_state")
            if self.scenario == "bilinear" and np.any(x[VOLTAGE_INDEX] <= 0):
                raise ConfigError("initial total arm voltages must be positive", field="simulation.initial_full_state")
        if self.initial_reduced_state is not None and np.asarray(self.initial_reduced_state).shape != (6,):
            raise ConfigError("initial_reduced_state must have 6 entries", field="simulation.initial_reduced_state")


def exogenous_step(S, w) -> np.ndarray:
    return np.asarray(S) @ np.asarray(w)


def steady_state_trajectories(sylvester, w_series):
    """``(xbar_ss, u_ss)`` rows for each row of ``w_series``."""
    W = np.atleast_2d(np.asarray(w_series, dtype=float))
    return W @ sylvester.Pi.T, W @ sylvester.Gamma.T


@dataclass(eq=False)
class SimTrace:
    """Recorded closed-loop quantities, one row per recorded step.

    ``x`` is the reduced state (linear scenario) or the full state (bilinear
    scenario).  ``eps`` and ``lyapunov_V`` are NaN for the linear scenario;
    ``lyapunov_V`` and ``levelset`` are NaN when no ``Q`` or ``P`` is known.
    """

    scenario: str
    time: np.ndarray
    w: np.ndarray
    x: np.ndarray
    u: np.ndarray
    eta: np.ndarray
    y: np.ndarray
    r: np.ndarray
    e: np.ndarray
    e_x: np.ndarray
    e_u: np.ndarray
    eps: np.ndarray
    lyapunov_V: np.ndarray
    levelset: np.ndarray
    saturation_active: np.ndarray
    sample_period: float = float("nan")
    info: dict = field(default_factory=dict)

    def __len__(self):
        return self.time.shape[0]

    @property
    def reduced_state(self) -> np.ndarray:
        return self.x if self.x.shape[1] == 6 else self.x[:, REDUCED_CURRENT_INDEX]

    @property
    def arm_voltages(self) -> Optional[np.ndarray]:
        """Total arm voltages ``[vu_a, vl_a, vu_b, ...]`` (bilinear scenario only)."""
        return None if self.x.shape[1] == 6 else self.x[:, VOLTAGE_INDEX]

    def columns(self):
        nx = self.x.shape[1]
        xname = "xbar" if nx == 6 else "x"
        return (
            ["time"]
            + [f"w{i}" for i in range(1, 9)]
            + [f"{xname}{i}" for i in range(1, nx + 1)]
            + [f"u{i}" for i in range(1, 7)]
            + [f"eta{i}" for i in range(1, 7)]
            + [f"y{i}" for i in range(1, 7)]
            + [f"r{i}" for i in range(1, 7)]
            + [f"ex{i}" for i in range(1, 7)]
            + [f"eu{i}" for i in range(1, 7)]
            + [f"eps{i}" for i in range(1, 13)]
            + ["V_lyap", "levelset", "sat_flag"]
        )

    def matrix(self) -> np.ndarray:
        """Rows in CSV column order; ``e`` is omitted since it equals ``y - r``."""
        return np.column_stack(
            [
                self.time,
                self.w,
                self.x,
                self.u,
                self.eta,
                self.y,
                self.r,
                self.e_x,
                self.e_u,
                self.eps,
                self.lyapunov_V,
                self.levelset,
                self.saturation_active.astype(float),
            ]
        )

    def write_csv(self, fh) -> None:
        """Write header and rows (``%.17g``) to an open text stream."""
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(self.columns())
        for row in self.matrix():
            writer.writerow([f"{v:.17g}" for v in row[:-1]] + [str(int(row[-1]))])

    @classmethod
    def read_csv(cls, path) -> "SimTrace":
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[0] == 0:
            raise ValueError(f"trace {path} has no rows")
        nx = 6 if "xbar1" in header else 12
        expected = 1 + 8 + nx + 6 * 6 + 12 + 3
        if len(header) != expected or data.shape[1] != expected:
            raise ValueError(f"trace {path} does not have the expected {expected} columns")
        cuts = np.cumsum([1, 8, nx, 6, 6, 6, 6, 6, 6, 12, 1, 1, 1])
        parts = np.split(data, cuts[:-1], axis=1)
        time = parts[0][:, 0]
        dt = float(time[1] - time[0]) if len(time) > 1 else float("nan")
        return cls(
            scenario="linear" if nx == 6 else "bilinear",
            time=time,
            w=parts[1],
            x=parts[2],
            u=parts[3],
            eta=parts[4],
            y=parts[5],
            r=parts[6],
            e=parts[5] - parts[6],
            e_x=parts[7],
            e_u=parts[8],
            eps=parts[9],
            lyapunov_V=parts[10][:, 0],
            levelset=parts[11][:, 0],
            saturation_active=parts[12][:, 0] > 0.5,
            sample_period=dt,
        )


def _initial_state(model: LinearModel, config: SimConfig):
    spec = model.spec
    xbar0 = np.zeros(6) if config.initial_reduced_state is None else np.asarray(config.initial_reduced_state, float)
    if config.scenario == "linear":
        return xbar0.copy()
    if config.initial_full_state is not None:
        return np.asarray(config.initial_full_state, dtype=float).copy()
    v0 = spec.arm_voltage_base if config.total_arm_voltage_init is None else config.total_arm_voltage_init
    x0 = np.empty(12)
    x0[REDUCED_CURRENT_INDEX] = xbar0
    x0[VOLTAGE_INDEX] = v0
    return x0


def run_closed_loop(model: LinearModel, controller, config: SimConfig, Q_phase=None, jit=None) -> SimTrace:
    """Simulate ``u = Kx xbar + Kw w`` against the chosen plant.

    Parameters
    ----------
    model : LinearModel
        Must carry ``params`` and ``spec``.
    controller : Controller
        ``Pi`` and ``Gamma`` are used for the error signals when present.
    Q_phase : array_like, optional
        Per-phase certificate for the deviation Lyapunov value.
    jit : bool, optional
        Force the compiled (True) or numpy (False) loop.

    Raises
    ------
    SimulationDiverged
        If any state magnitude exceeds ``1e6`` times its nominal value.
    """
    params, spec = model.params, model.spec
    if params is None or spec is None:
        raise ValueError("model must carry circuit parameters and port spec")
    steps = config.steps
    w0 = exogenous_initial_state(spec, config.initial_exogenous_phase)
    x0 = _initial_state(model, config)
    Kx = np.ascontiguousarray(controller.Kx, dtype=float)
    Kw = np.ascontiguousarray(controller.Kw, dtype=float)
    S = np.ascontiguousarray(model.S)
    cur_nom = spec.grid_peak_current + (spec.output_peak_current or 0.0)
    limit = DIVERGENCE_FACTOR * max(cur_nom, spec.arm_voltage_base, float(np.max(np.abs(x0))))

    W = np.empty((steps, 8))
    U = np.empty((steps, 6))
    if config.scenario == "linear":
        X = np.empty((steps, 6))
        done = _kernels.linear_loop(
            np.ascontiguousarray(model.A_bar), np.ascontiguousarray(model.B_bar), np.ascontiguousarray(model.E),
            S, Kx, Kw, x0, w0, steps, limit, X, U, W, jit=jit,
        )
        XT = None
        ETA = U / spec.arm_voltage_base
        SAT = np.zeros(steps, dtype=bool)
    else:
        k1, k2, k3 = discretization_constants(params)
        X = np.empty((steps, 12))
        XT = np.empty((steps, 12))
        ETA = np.empty((steps, 6))
        SAT = np.empty(steps, dtype=np.bool_)
        E_full = np.ascontiguousarray(full_exogenous_input_matrix(params))
        done = _kernels.bilinear_loop(
            k1, k2, k3, E_full, S, Kx, Kw, x0, x0.copy(), w0, steps, spec.arm_voltage_base, limit,
            X, XT, U, ETA, W, SAT, jit=jit,
        )
    if done < steps:
        raise SimulationDiverged(
            f"state exceeded {limit:.3g} at step {done} (max |x| = {np.max(np.abs(X[done])):.3g})", step=done
        )

    sl = slice(0, steps, config.record_stride)
    X, U, W, ETA, SAT = X[sl], U[sl], W[sl], ETA[sl], SAT[sl]
    xbar = X if X.shape[1] == 6 else X[:, REDUCED_CURRENT_INDEX]
    y = xbar @ model.C_bar.T
    r = W @ model.O.T
    Pi = controller.Pi
    Gamma = controller.Gamma
    nan6 = np.full((X.shape[0], 6), np.nan)
    e_x = xbar - W @ Pi.T if Pi is not None else nan6
    e_u = U - W @ Gamma.T if Gamma is not None else nan6
    levelset = np.einsum("ki,ij,kj->k", e_x, controller.P, e_x) if Pi is not None else np.full(X.shape[0], np.nan)
    if XT is not None:
        eps = X - XT[sl]
        if Q_phase is not None:
            Qf = scipy.linalg.block_diag(*([np.asarray(Q_phase, dtype=float)] * 3))
            V = np.einsum("ki,ij,kj->k", eps, Qf, eps)
        else:
            V = np.full(X.shape[0], np.nan)
    else:
        eps = np.full((X.shape[0], 12), np.nan)
        V = np.full(X.shape[0], np.nan)
    Ts = params.sample_period
    time = Ts * np.arange(steps)[sl]
    logger.debug("simulated %d steps (%s), saturation on %d steps", steps, config.scenario, int(SAT.sum()))
    return SimTrace(
        scenario=config.scenario,
        time=time,
        w=W,
        x=X,
        u=U,
        eta=ETA,
        y=y,
        r=r,
        e=y - r,
        e_x=e_x,
        e_u=e_u,
        eps=eps,
        lyapunov_V=V,
        levelset=levelset,
        saturation_active=SAT,
        sample_period=Ts * config.record_stride,
        info={"steps": steps, "record_stride": config.record_stride, "jit": _kernels.USE_JIT if jit is None else bool(jit)},
    )
