"""Current references from power requirements.

The differential-mode (grid) reference follows directly from the requested
grid current.  The common-mode (output) reference ``i_sigma(t) = alpha cos(w2 t)
+ beta sin(w2 t)`` is chosen to minimize the mismatch between the period
averaged grid and output powers, subject to zero period-averaged arm power.
Arm voltages inside the averages are rebuilt from the discrete arm dynamics
(forward difference at the sample period), so the balance holds for the
sampled model itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import InfeasibleError
from .model import PHASE_OFFSETS, CircuitParams, PortSpec, check_sampling


def grid_current_reference(spec: PortSpec) -> Tuple[float, float]:
    """Differential-mode current amplitude and phase: ``(I_g / 2, phi1)``."""
    if spec.grid_peak_current < 0:
        raise ValueError("grid peak current must be nonnegative")
    return spec.grid_peak_current / 2.0, spec.grid_current_phase


@dataclass(frozen=True)
class SigmaReference:
    alpha: float
    beta: float
    power_mismatch: float
    arm_power_residual: float
    resolution: float = 0.0

    @property
    def amplitude(self) -> float:
        return math.hypot(self.alpha, self.beta)

    @property
    def phase(self) -> float:
        """Phase ``phi2`` such that ``i_sigma = A cos(w2 t + phi2)``."""
        if self.amplitude == 0.0:
            return 0.0
        return math.atan2(-self.beta, self.alpha)

    def as_record(self) -> dict:
        return {
            "sigma_alpha": self.alpha,
            "sigma_beta": self.beta,
            "power_mismatch_w": self.power_mismatch,
            "arm_power_residual_w": self.arm_power_residual,
        }


def _grid_terms(params: CircuitParams, spec: PortSpec) -> Tuple[float, float]:
    """Period averages ``(<vg i_delta>, <u_delta i_delta>)`` over one grid period."""
    n1, _ = check_sampling(params, spec)
    Ts, R, L = params.sample_period, params.arm_resistance, params.arm_inductance
    amp, phi = grid_current_reference(spec)
    theta = spec.grid_omega * Ts * np.arange(n1 + 1) + PHASE_OFFSETS[0]
    i_d = amp * np.cos(theta + phi)
    v_g = spec.grid_peak_voltage * np.cos(theta)
    u_d = -v_g[:-1] + R * i_d[:-1] + L * np.diff(i_d) / Ts
    return float(np.mean(v_g[:-1] * i_d[:-1])), float(np.mean(u_d * i_d[:-1]))


def _output_terms(params: CircuitParams, spec: PortSpec, alpha, beta):
    """Period averages ``(<vz i_sigma>, <u_sigma i_sigma>)``; broadcasts over alpha/beta."""
    _, n2 = check_sampling(params, spec)
    Ts, R, L = params.sample_period, params.arm_resistance, params.arm_inductance
    theta = spec.output_omega * Ts * np.arange(n2 + 1)
    alpha = np.asarray(alpha, dtype=float)[..., None]
    beta = np.asarray(beta, dtype=float)[..., None]
    i_s = alpha * np.cos(theta) + beta * np.sin(theta)
    v_z = spec.output_peak_voltage * np.cos(theta)
    u_s = v_z[:-1] + R * i_s[..., :-1] + L * np.diff(i_s, axis=-1) / Ts
    return np.mean(v_z[:-1] * i_s[..., :-1], axis=-1), np.mean(u_s * i_s[..., :-1], axis=-1)


def sigma_problem_values(params: CircuitParams, spec: PortSpec, alpha, beta):
    """Objective ``|<vg i_d> - <vz i_s>|`` and constraint ``<u_d i_d> + <u_s i_s>``.

    Vectorized over ``alpha`` and ``beta``.
    """
    grid_power, arm_delta = _grid_terms(params, spec)
    out_power, arm_sigma = _output_terms(params, spec, alpha, beta)
    return np.abs(grid_power - out_power), arm_delta + arm_sigma


def _finish(params, spec, alpha, beta, resolution=0.0) -> SigmaReference:
    mismatch, residual = sigma_problem_values(params, spec, alpha, beta)
    return SigmaReference(float(alpha), float(beta), float(mismatch), float(residual), resolution)


def solve_sigma_reference(params: CircuitParams, spec: PortSpec) -> SigmaReference:
    """Solve the power-balance problem for the common-mode reference.

    The zero-arm-power constraint is quadratic and isotropic in
    ``(alpha, beta)``, i.e. a circle (or a line when the quadratic term
    vanishes).  The power mismatch is affine, so the minimizer on the circle
    is found in closed form; of two zero-mismatch points the one with the
    smaller amplitude is returned.
    """
    grid_power, arm_delta = _grid_terms(params, spec)
    out = lambda a, b: _output_terms(params, spec, a, b)  # noqa: E731
    pa, _ = out(1.0, 0.0)
    pb, _ = out(0.0, 1.0)
    pa, pb = float(pa), float(pb)
    r = {p: float(out(*p)[1]) for p in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (1.0, 1.0)]}
    qa = (r[(1.0, 0.0)] + r[(-1.0, 0.0)]) / 2.0
    qb = (r[(0.0, 1.0)] + r[(0.0, -1.0)]) / 2.0
    la = (r[(1.0, 0.0)] - r[(-1.0, 0.0)]) / 2.0
    lb = (r[(0.0, 1.0)] - r[(0.0, -1.0)]) / 2.0
    qab = r[(1.0, 1.0)] - qa - qb - la - lb
    scale = abs(qa) + abs(qb) + abs(la) + abs(lb)
    if abs(qa - qb) > 1e-9 * scale or abs(qab) > 1e-9 * scale:
        raise ValueError("arm-power constraint is not isotropic; sampling must cover whole periods")
    q = 0.5 * (qa + qb)

    if abs(q) <= 1e-14 * (abs(la) + abs(lb)):
        # constraint degenerates to the line la*alpha + lb*beta = -arm_delta
        M = np.array([[la, lb], [pa, pb]])
        rhs = np.array([-arm_delta, grid_power])
        if abs(np.linalg.det(M)) > 1e-12 * np.abs(M).max() ** 2:
            alpha, beta = np.linalg.solve(M, rhs)
        else:
            alpha, beta = np.linalg.lstsq(M[:1], rhs[:1], rcond=None)[0]
        return _finish(params, spec, alpha, beta)

    center = np.array([-la / (2.0 * q), -lb / (2.0 * q)])
    radius_sq = (la * la + lb * lb) / (4.0 * q * q) - arm_delta / q
    if radius_sq < 0.0:
        closest = arm_delta - (la * la + lb * lb) / (4.0 * q)
        raise InfeasibleError(
            "zero arm-power constraint has no real solution",
            {"closest_residual_w": closest, "alpha": center[0], "beta": center[1]},
        )
    radius = math.sqrt(radius_sq)
    # mismatch along the circle: l(theta) = l_c - radius*|p|*cos(theta - theta_p)
    p_norm = math.hypot(pa, pb)
    theta_p = math.atan2(pb, pa)
    l_c = grid_power - pa * center[0] - pb * center[1]
    if radius * p_norm >= abs(l_c) and p_norm > 0.0:
        delta = math.acos(float(np.clip(l_c / (radius * p_norm), -1.0, 1.0)))
        thetas = [theta_p - delta, theta_p + delta]
    elif p_norm > 0.0:
        thetas = [theta_p if l_c > 0 else theta_p + math.pi]
    else:
        thetas = [math.atan2(-center[1], -center[0])]
    points = [center + radius * np.array([math.cos(t), math.sin(t)]) for t in thetas]
    alpha, beta = min(points, key=lambda p: (float(np.hypot(*p)), p[0], p[1]))
    return _finish(params, spec, alpha, beta)


def brute_force_sigma_oracle(
    params: CircuitParams,
    spec: PortSpec,
    box: Optional[Tuple[float, float, float, float]] = None,
    step: float = 1.0,
    levels: int = 3,
) -> SigmaReference:
    """Exhaustive grid search over ``(alpha, beta)``.

    A grid point is a candidate when its arm-power residual is zero or
    changes sign towards one of its four neighbours, so exactly the grid
    cells the constraint curve crosses contribute candidates.  After each
    level the box shrinks to two cells around the best point and the step
    drops tenfold.  ``resolution`` on the result is the final step.
    """
    if box is None:
        grid_power, _ = _grid_terms(params, spec)
        a0 = abs(grid_power) / (spec.output_peak_voltage / 2.0) + 10.0
        box = (-2.0 * a0, 2.0 * a0, -2.0 * a0, 2.0 * a0)
    a_lo, a_hi, b_lo, b_hi = box
    if a_lo > a_hi or b_lo > b_hi or step <= 0:
        raise ValueError("invalid search box")
    best = None
    for _ in range(max(1, levels)):
        alphas = np.arange(a_lo, a_hi + 0.5 * step, step)
        betas = np.arange(b_lo, b_hi + 0.5 * step, step)
        A, B = np.meshgrid(alphas, betas, indexing="ij")
        mismatch, residual = sigma_problem_values(params, spec, A, B)
        sgn = np.sign(residual)
        feasible = sgn == 0
        # a sign flip between neighbours marks both points of the crossed cell edge
        flip_a = sgn[1:, :] * sgn[:-1, :] < 0
        flip_b = sgn[:, 1:] * sgn[:, :-1] < 0
        feasible[1:, :] |= flip_a
        feasible[:-1, :] |= flip_a
        feasible[:, 1:] |= flip_b
        feasible[:, :-1] |= flip_b
        if not feasible.any():
            raise InfeasibleError("no grid cell is crossed by the arm-power constraint", {"step": step})
        idx = np.flatnonzero(feasible.ravel())
        amp = np.hypot(A.ravel()[idx], B.ravel()[idx])
        # objective values within rounding of each other are ties, broken by amplitude
        obj = mismatch.ravel()[idx]
        tol = 1e-9 * max(1.0, float(np.abs(obj).max()))
        order = np.lexsort((amp, np.round(obj / tol)))
        k = idx[order[0]]
        best = (A.ravel()[k], B.ravel()[k], step)
        a_lo, a_hi = best[0] - 2 * step, best[0] + 2 * step
        b_lo, b_hi = best[1] - 2 * step, best[1] + 2 * step
        if box[0] == box[1] and box[2] == box[3]:
            break
        step /= 10.0
    return _finish(params, spec, best[0], best[1], resolution=best[2])


def complete_port_spec(params: CircuitParams, spec: PortSpec) -> Tuple[PortSpec, SigmaReference]:
    """Fill the output current amplitude and phase from the solved reference."""
    sigma = solve_sigma_reference(params, spec)
    return spec.with_output_current(sigma.amplitude, sigma.phase), sigma


@dataclass(frozen=True)
class OutputMap:
    o1: float
    o2: float
    o3: float
    o4: float
    K4: float
    K5: float


def build_output_map(spec: PortSpec, sigma: Optional[SigmaReference] = None):
    """Return ``(OutputMap, O)`` with ``r = O w``.

    With the quadrature convention ``v' = -V sin(theta)`` the reference
    ``I cos(theta + phi)`` equals ``(I/V)(cos(phi) v + sin(phi) v')``.
    """
    if sigma is not None:
        out_amp, phi2 = sigma.amplitude, sigma.phase
    else:
        if spec.output_peak_current is None:
            raise ValueError("output_peak_current unset; solve the common-mode reference first")
        out_amp, phi2 = spec.output_peak_current, spec.output_current_phase
    delta_amp, phi1 = grid_current_reference(spec)
    K4 = 2.0 * delta_amp / spec.grid_peak_voltage
    K5 = out_amp / spec.output_peak_voltage
    omap = OutputMap(
        o1=K4 * math.cos(phi1),
        o2=K4 * math.sin(phi1),
        o3=K5 * math.cos(phi2),
        o4=K5 * math.sin(phi2),
        K4=K4,
        K5=K5,
    )
    O = np.zeros((6, 8))
    for m in range(3):
        O[2 * m, 2 * m : 2 * m + 2] = (omap.o1, omap.o2)
        O[2 * m + 1, 6:8] = (omap.o3, omap.o4)
    return omap, O


def reference_series(spec: PortSpec, params: CircuitParams, steps: int, phase: float = 0.0) -> np.ndarray:
    """Closed-form references ``r(k)`` (rows), independent of ``O`` and ``S``."""
    if spec.output_peak_current is None:
        raise ValueError("output_peak_current unset")
    t = phase / spec.grid_omega + params.sample_period * np.arange(steps)
    out = np.empty((steps, 6))
    for m, offset in enumerate(PHASE_OFFSETS):
        out[:, 2 * m] = spec.grid_peak_current * np.cos(spec.grid_omega * t + offset + spec.grid_current_phase)
        out[:, 2 * m + 1] = spec.output_peak_current * np.cos(spec.output_omega * t + spec.output_current_phase)
    return out
