"""Regulator equations, invariant-ellipsoid gain synthesis and its verification.

The tracking controller is ``u = Kx xbar + Kw w``.  The regulator equations

    Pi S = A Pi + B Gamma + E,      C Pi = O

give the steady state ``xbar_ss = Pi w`` and ``u_ss = Gamma w``; the error
``e_x = xbar - Pi w`` then obeys ``e_x+ = (A + B Kx) e_x``.  ``Kx`` and the
ellipsoid ``{e : e' P e <= 1}`` come from an LMI problem in ``Z = P^-1`` and
``Y = Kx Z``:

* contraction:        [[Z, (A Z + B Y)'], [A Z + B Y, Z]] > 0
* state containment:  [[Z, Z g], [g' Z, 1]] >= 0       for each row g of G
* input containment:  [[Z, Y' h], [h' Y, 1]] >= 0      for each row h of H

The LMIs are posed in coordinates where every box bound is 1, which keeps
the solver well conditioned when currents are in amperes and voltages in kV.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .conic import AffineMatrixInequality, VariableSpace, bmat, min_eigenvalue, solve_sdp
from .errors import InfeasibleError, SingularSystemError
from .model import N_PHASES, LinearModel

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12
OBJECTIVES = ("max-logdet", "max-margin")


@dataclass(frozen=True, eq=False)
class SylvesterSolution:
    Pi: np.ndarray
    Gamma: np.ndarray
    residual_dynamics: float
    residual_output: float
    condition: float = float("nan")


def solve_regulator_equations(model: LinearModel) -> SylvesterSolution:
    """Solve for ``(Pi, Gamma)`` through one vectorized linear system.

    With column-major ``vec``, ``vec(Pi S) = (S' kron I) vec(Pi)`` and
    ``vec(M Pi) = (I kron M) vec(Pi)``.

    Raises
    ------
    SingularSystemError
        If the stacked system is (numerically) singular, which happens when an
        exogenous frequency hits a transmission zero of the plant.
    """
    A, B, C, E, S, O = model.A_bar, model.B_bar, model.C_bar, model.E, model.S, model.O
    n, m = B.shape
    q = S.shape[0]
    p = C.shape[0]
    if p != m:
        raise ValueError("regulator equations need as many outputs as inputs")
    In, Iq = np.eye(n), np.eye(q)
    M = np.block(
        [
            [np.kron(S.T, In) - np.kron(Iq, A), -np.kron(Iq, B)],
            [np.kron(Iq, C), np.zeros((p * q, m * q))],
        ]
    )
    rhs = np.concatenate([E.ravel(order="F"), O.ravel(order="F")])
    cond = float(np.linalg.cond(M))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularSystemError(f"regulator equations are singular (condition {cond:.3g})", condition=cond)
    sol = np.linalg.solve(M, rhs)
    Pi = sol[: n * q].reshape((n, q), order="F")
    Gamma = sol[n * q :].reshape((m, q), order="F")
    res_dyn = float(np.linalg.norm(Pi @ S - A @ Pi - B @ Gamma - E))
    res_out = float(np.linalg.norm(C @ Pi - O))
    logger.debug("regulator equations: cond %.3g, residuals %.3g / %.3g", cond, res_dyn, res_out)
    return SylvesterSolution(Pi, Gamma, res_dyn, res_out, cond)


@dataclass(frozen=True, eq=False)
class ErrorPolytopes:
    """Half-space descriptions ``G e_x <= 1`` and ``H e_u <= 1``."""

    G: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        for name in ("G", "H"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(M)):
                raise ValueError(f"{name} has non-finite entries")
            if np.any(np.all(M == 0.0, axis=1)):
                raise ValueError(f"{name} has a zero row")
            object.__setattr__(self, name, M)


def build_box_polytopes(state_fraction, input_fraction, state_nominal, input_nominal) -> ErrorPolytopes:
    """Symmetric boxes ``|e_i| <= fraction * nominal`` as 12 normalized rows each.

    Rows are ``+e_1 .. +e_6`` then ``-e_1 .. -e_6``, scaled so every
    constraint reads ``row @ e <= 1``.
    """
    for name, v in (
        ("state_fraction", state_fraction),
        ("input_fraction", input_fraction),
        ("state_nominal", state_nominal),
        ("input_nominal", input_nominal),
    ):
        if not (np.isfinite(v) and v > 0):
            raise ValueError(f"{name} must be positive, got {v}")
    rows = np.vstack([np.eye(6), -np.eye(6)])
    return ErrorPolytopes(rows / (state_fraction * state_nominal), rows / (input_fraction * input_nominal))


@dataclass(frozen=True, eq=False)
class Controller:
    Kx: np.ndarray
    Kw: np.ndarray
    P: np.ndarray
    Pi: Optional[np.ndarray] = None
    Gamma: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def control(self, xbar, w):
        return self.Kx @ xbar + self.Kw @ w


@dataclass(frozen=True)
class VerificationReport:
    spectral_radius: float
    contraction_margin: float
    max_state_containment: float
    max_input_containment: float
    passed: bool

    @property
    def margins(self):
        """All four checks expressed as 'positive is good' numbers."""
        return {
            "spectral_radius": 1.0 - self.spectral_radius,
            "contraction": self.contraction_margin,
            "state_containment": 1.0 - self.max_state_containment,
            "input_containment": 1.0 - self.max_input_containment,
        }

    def as_dict(self):
        return {
            "spectral_radius": self.spectral_radius,
            "contraction_margin": self.contraction_margin,
            "max_state_containment": self.max_state_containment,
            "max_input_containment": self.max_input_containment,
            "passed": self.passed,
        }


def verify_controller(model: LinearModel, controller: Controller, polytopes: ErrorPolytopes) -> VerificationReport:
    """Re-check the closed-loop guarantees by direct evaluation."""
    Acl = model.A_bar + model.B_bar @ controller.Kx
    P = 0.5 * (controller.P + controller.P.T)
    rho = float(np.max(np.abs(np.linalg.eigvals(Acl))))
    contraction = min_eigenvalue(0.5 * ((P - Acl.T @ P @ Acl) + (P - Acl.T @ P @ Acl).T))
    Pinv = np.linalg.inv(P)
    G, H, K = polytopes.G, polytopes.H, controller.Kx
    state = float(np.max(np.einsum("ti,ij,tj->t", G, Pinv, G)))
    KPK = K @ Pinv @ K.T
    inp = float(np.max(np.einsum("ti,ij,tj->t", H, KPK, H)))
    pd = min_eigenvalue(P) > 0
    passed = bool(pd and rho < 1.0 and contraction > 0.0 and state <= 1.0 and inp <= 1.0)
    return VerificationReport(rho, contraction, state, inp, passed)


def _scalings(polytopes: ErrorPolytopes):
    """Per-coordinate bounds used as the scaled unit box."""
    gx = np.max(np.abs(polytopes.G), axis=0)
    gu = np.max(np.abs(polytopes.H), axis=0)
    if np.any(gx == 0) or np.any(gu == 0):
        raise ValueError("polytopes must bound every coordinate")
    return 1.0 / gx, 1.0 / gu


def _solve_block(A, B, G, H, objective, fixed_K, margin, label):
    """LMI solve for one (scaled) subsystem; returns ``(K, P, solution)``."""
    n, m = B.shape
    vs = VariableSpace()
    Z = vs.symmetric(n)
    Y = fixed_K @ Z if fixed_K is not None else vs.matrix(m, n)
    nv = vs.n
    AZBY = A @ Z + B @ Y
    ineqs = [AffineMatrixInequality.from_expr(bmat([[Z, AZBY.T], [AZBY, Z]]), nv, strict=True, name=f"{label}contraction")]
    families = ["contraction"]
    for t, g in enumerate(G):
        g = g.reshape(-1, 1)
        ineqs.append(AffineMatrixInequality.from_expr(bmat([[Z, Z @ g], [g.T @ Z, np.ones((1, 1))]]), nv, name=f"{label}state[{t}]"))
        families.append("state-containment")
    for t, h in enumerate(H):
        h = h.reshape(-1, 1)
        ineqs.append(AffineMatrixInequality.from_expr(bmat([[Z, Y.T @ h], [h.T @ Y, np.ones((1, 1))]]), nv, name=f"{label}input[{t}]"))
        families.append("input-containment")
    if objective == "max-logdet":
        sol = solve_sdp(ineqs, "max-logdet", logdet=AffineMatrixInequality.from_expr(Z, nv), margin=margin)
    else:
        sol = solve_sdp(ineqs, "max-margin", margin=margin)
    if sol.status == "infeasible":
        worst = int(np.argmin(sol.block_margins))
        raise InfeasibleError(
            f"controller synthesis infeasible: {families[worst]} family violated ({ineqs[worst].name})",
            {
                "family": families[worst],
                "constraint": ineqs[worst].name,
                "block_margins": list(map(float, sol.block_margins)),
                "achieved_margin": float(sol.achieved_margin),
            },
        )
    if sol.status == "numerical-failure":
        logger.warning("%s synthesis ended with numerical-failure status", label or "full")
    Zv = Z.value(sol.variable_values)
    Yv = Y.value(sol.variable_values)
    K = np.linalg.solve(Zv.T, Yv.T).T
    return K, np.linalg.inv(Zv), sol


def _phase_slices(polytopes):
    """Split polytope rows by phase; rows coupling phases make this impossible."""
    out = []
    for m in range(N_PHASES):
        cols = slice(2 * m, 2 * m + 2)
        sub = []
        for M in (polytopes.G, polytopes.H):
            own = np.any(M[:, cols] != 0, axis=1)
            other = np.any(np.delete(M, np.s_[2 * m : 2 * m + 2], axis=1) != 0, axis=1)
            if np.any(own & other):
                return None
            sub.append(M[own][:, cols])
        out.append((cols, sub[0], sub[1]))
    return out


def synthesize(
    model: LinearModel,
    polytopes: ErrorPolytopes,
    objective: str = "max-logdet",
    fixed_Kx=None,
    structure: str = "per-phase",
    margin: float = 1e-8,
    sylvester: Optional[SylvesterSolution] = None,
) -> Controller:
    """Synthesize ``(Kx, Kw, P)``.

    Parameters
    ----------
    objective : {"max-logdet", "max-margin"}
        Largest ellipsoid volume, or largest contraction margin.
    fixed_Kx : array_like, optional
        Use this gain and solve for ``P`` only (``Y = Kx Z``).
    structure : {"per-phase", "full"}
        Solve three 2-state problems and assemble them, or one 6-state problem.
    margin : float
        Strictness margin of the contraction block in scaled coordinates.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    if structure not in ("per-phase", "full"):
        raise ValueError("structure must be 'per-phase' or 'full'")
    if sylvester is None:
        sylvester = solve_regulator_equations(model)
    bx, bu = _scalings(polytopes)
    Dx, Du = np.diag(bx), np.diag(bu)
    Dxi = np.diag(1.0 / bx)
    A_s = Dxi @ model.A_bar @ Dx
    B_s = Dxi @ model.B_bar @ Du
    G_s = polytopes.G @ Dx
    H_s = polytopes.H @ Du
    K_s_fixed = None
    if fixed_Kx is not None:
        fixed_Kx = np.asarray(fixed_Kx, dtype=float)
        if fixed_Kx.shape != (6, 6):
            raise ValueError("fixed_Kx must be 6x6")
        K_s_fixed = np.diag(1.0 / bu) @ fixed_Kx @ Dx

    slices = _phase_slices(polytopes) if structure == "per-phase" else None
    if structure == "per-phase" and slices is None:
        logger.info("polytope rows couple phases; falling back to the full solve")
    if slices is None:
        K_s, P_s, sol = _solve_block(A_s, B_s, G_s, H_s, objective, K_s_fixed, margin, "")
        stats = {"iterations": sol.iterations, "status": sol.status}
    else:
        K_s = np.zeros((6, 6))
        P_s = np.zeros((6, 6))
        stats = {"iterations": 0, "status": "optimal"}
        for m, (cols, Gm, Hm) in enumerate(slices):
            Gm_s = Gm * bx[cols]
            Hm_s = Hm * bu[cols]
            Kf = None if K_s_fixed is None else K_s_fixed[cols, cols]
            if K_s_fixed is not None and np.any(np.delete(K_s_fixed[cols], np.s_[cols], axis=1) != 0):
                raise ValueError("fixed_Kx couples phases; use structure='full'")
            Km, Pm, sol = _solve_block(A_s[cols, cols], B_s[cols, cols], Gm_s, Hm_s, objective, Kf, margin, f"phase{m}:")
            K_s[cols, cols] = Km
            P_s[cols, cols] = Pm
            stats["iterations"] += sol.iterations
            if sol.status != "optimal":
                stats["status"] = sol.status
    Kx = Du @ K_s @ Dxi
    if fixed_Kx is not None:
        Kx = fixed_Kx.copy()
    P = Dxi @ P_s @ Dxi
    P = 0.5 * (P + P.T)
    Kw = sylvester.Gamma - Kx @ sylvester.Pi
    info = {"objective": objective, "structure": "full" if slices is None else "per-phase", **stats}
    return Controller(Kx, Kw, P, sylvester.Pi, sylvester.Gamma, info)


def closed_loop_matrix(model: LinearModel, Kx) -> np.ndarray:
    return model.A_bar + model.B_bar @ np.asarray(Kx, dtype=float)


def block_diag_phases(block) -> np.ndarray:
    return scipy.linalg.block_diag(*([np.asarray(block, dtype=float)] * N_PHASES))
