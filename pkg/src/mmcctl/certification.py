"""Common quadratic Lyapunov certificates for the bilinear arm model.

With the insertion indices confined to a box, the per-phase matrix ``A(eta)``
is affine in ``(eta_u, eta_l)``, so ``Q - A' Q A > 0`` over the whole box
follows from the four corner conditions, each written via a Schur complement
as ``[[Q, Q A], [A' Q, Q]] >= margin I``.  The three phases share the same
block, hence the full certificate is ``diag(Q, Q, Q)``.

Boxes that contain ``eta = 0`` cannot be certified strictly: ``A(0)`` keeps
the arm-voltage states at eigenvalue one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .conic import AffineMatrixInequality, VariableSpace, bmat, min_eigenvalue, solve_sdp
from .model import CircuitParams, phase_block

logger = logging.getLogger(__name__)

Vertex = Tuple[float, float]


@dataclass(frozen=True)
class SchedulingBox:
    eta_low: float = 0.1
    eta_high: float = 1.0

    def __post_init__(self):
        if not (-1.0 <= self.eta_low < self.eta_high <= 1.0):
            raise ValueError(f"need -1 <= eta_low < eta_high <= 1, got [{self.eta_low}, {self.eta_high}]")


def enumerate_vertices(box: SchedulingBox) -> List[Vertex]:
    """Corner pairs ``(eta_u, eta_l)`` in the order low/low, low/high, high/low, high/high."""
    lo, hi = box.eta_low, box.eta_high
    return [(lo, lo), (lo, hi), (hi, lo), (hi, hi)]


def _schur_block(Q, A):
    return np.block([[Q, Q @ A], [A.T @ Q, Q]])


@dataclass
class CertificationResult:
    Q_phase: np.ndarray
    vertex_margins: Dict[Vertex, float]
    feasible: bool
    margin_used: float
    worst_vertex: Vertex = None
    worst_direction: np.ndarray = None
    info: dict = field(default_factory=dict)

    @property
    def Q_full(self) -> np.ndarray:
        import scipy.linalg

        return scipy.linalg.block_diag(self.Q_phase, self.Q_phase, self.Q_phase)

    def as_dict(self):
        return {
            "feasible": self.feasible,
            "margin_used": self.margin_used,
            "vertex_margins": {f"{v[0]:g},{v[1]:g}": m for v, m in self.vertex_margins.items()},
            "worst_vertex": list(self.worst_vertex) if self.worst_vertex is not None else None,
            "worst_direction": None if self.worst_direction is None else [float(x) for x in self.worst_direction],
        }


def _vertex_report(params, Q, box):
    margins = {}
    worst = (np.inf, None, None)
    for v in enumerate_vertices(box):
        M = _schur_block(Q, phase_block(params, *v))
        M = 0.5 * (M + M.T)
        vals, vecs = np.linalg.eigh(M)
        margins[v] = float(vals[0])
        if vals[0] < worst[0]:
            worst = (float(vals[0]), v, vecs[:, 0])
    return margins, worst[1], worst[2]


def certify_phase(params: CircuitParams, box: SchedulingBox, margin: float = 1e-9) -> CertificationResult:
    """Search ``Q`` (trace 4) maximizing the smallest vertex-block eigenvalue.

    The result is feasible when that eigenvalue reaches ``margin``.  Either
    way the most-violated vertex and the corresponding eigenvector of its
    8x8 block are reported.
    """
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    vs = VariableSpace()
    Q = vs.symmetric(4)
    ineqs = []
    for v in enumerate_vertices(box):
        A = phase_block(params, *v)
        ineqs.append(
            AffineMatrixInequality.from_expr(bmat([[Q, Q @ A], [A.T @ Q, Q]]), vs.n, strict=True, name=f"vertex{v}")
        )
    # trace(Q) = 4 fixes the scale
    trace_row = np.array([np.trace(Q.coef[i + 1]) for i in range(vs.n)])
    sol = solve_sdp(ineqs, "max-margin", margin=0.0, equality=(trace_row[None], [4.0]))
    Qv = Q.value(sol.variable_values)
    Qv = 0.5 * (Qv + Qv.T)
    margins, worst_v, worst_dir = _vertex_report(params, Qv, box)
    best = min(margins.values())
    feasible = bool(best >= margin and min_eigenvalue(Qv) > 0)
    logger.debug("certify box [%g, %g]: best margin %.3e", box.eta_low, box.eta_high, best)
    return CertificationResult(
        Q_phase=Qv,
        vertex_margins=margins,
        feasible=feasible,
        margin_used=margin,
        worst_vertex=worst_v,
        worst_direction=worst_dir,
        info={"solver_status": sol.status, "iterations": sol.iterations, "best_margin": best},
    )


@dataclass
class QCheck:
    q_min_eigenvalue: float
    vertex_margins: Dict[Vertex, float]

    @property
    def positive_definite(self) -> bool:
        return self.q_min_eigenvalue > 0

    @property
    def passed(self) -> bool:
        return self.positive_definite and min(self.vertex_margins.values()) > 0


def check_Q(params: CircuitParams, Q_phase, box: SchedulingBox) -> QCheck:
    """Evaluate a supplied per-phase ``Q``: its smallest eigenvalue and
    ``min eig(Q - A' Q A)`` at every box vertex.

    A ``Q`` that is not positive definite fails the gate and gets no vertex
    margins.
    """
    Q = np.asarray(Q_phase, dtype=float)
    if Q.shape != (4, 4):
        raise ValueError("Q_phase must be 4x4")
    qmin = min_eigenvalue(Q)
    if qmin <= 0:
        return QCheck(qmin, {v: float("-inf") for v in enumerate_vertices(box)})
    margins = {}
    for v in enumerate_vertices(box):
        A = phase_block(params, *v)
        D = Q - A.T @ Q @ A
        margins[v] = min_eigenvalue(0.5 * (D + D.T))
    return QCheck(qmin, margins)
