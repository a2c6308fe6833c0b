"""Small dense semidefinite programming backend.

Problems are systems of affine matrix inequalities

    F_j(x) = F_j0 + sum_i x_i F_ji  >=  margin_j I,

with optional linear equalities on ``x``, solved by a primal log-barrier
path-following method with damped Newton centering.  Blocks here are at most
a few dozen rows and there are well under a hundred variables, so everything
is dense.  A norm ball ``||z|| <= radius`` on the free variables keeps the
barrier bounded below; it only matters for problems whose feasible set is
unbounded.

Objectives: ``"feasibility"``, ``"linear"`` (maximize ``c @ x``),
``"max-logdet"`` (maximize ``log det G(x)`` for an affine symmetric ``G``) and
``"max-margin"`` (maximize the smallest eigenvalue over the strict blocks).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

STATUSES = ("optimal", "feasible", "infeasible", "numerical-failure")


class AffineExpr:
    """A matrix expression affine in scalar decision variables.

    ``coef[0]`` is the constant term and ``coef[i]`` the coefficient of
    variable ``i - 1``.  Only multiplication by constant matrices is
    supported, which is all the LMIs here need.
    """

    __array_priority__ = 100

    def __init__(self, coef):
        coef = np.asarray(coef, dtype=float)
        if coef.ndim != 3:
            raise ValueError("coefficient array must be (n_vars + 1, rows, cols)")
        self.coef = coef

    @classmethod
    def constant(cls, M) -> "AffineExpr":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return cls(M[None])

    @property
    def shape(self):
        return self.coef.shape[1:]

    @property
    def n_vars(self) -> int:
        return self.coef.shape[0] - 1

    def padded(self, n_vars: int) -> np.ndarray:
        if n_vars < self.n_vars:
            raise ValueError("cannot shrink the variable count")
        out = np.zeros((n_vars + 1,) + self.shape)
        out[: self.coef.shape[0]] = self.coef
        return out

    @staticmethod
    def _lift(other) -> "AffineExpr":
        return other if isinstance(other, AffineExpr) else AffineExpr.constant(other)

    def __add__(self, other):
        other = self._lift(other)
        n = max(self.n_vars, other.n_vars)
        return AffineExpr(self.padded(n) + other.padded(n))

    __radd__ = __add__

    def __neg__(self):
        return AffineExpr(-self.coef)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, scalar):
        return AffineExpr(self.coef * float(scalar))

    __rmul__ = __mul__

    def __matmul__(self, M):
        if isinstance(M, AffineExpr):
            raise TypeError("product of two affine expressions is not affine")
        return AffineExpr(self.coef @ np.atleast_2d(np.asarray(M, dtype=float)))

    def __rmatmul__(self, M):
        return AffineExpr(np.atleast_2d(np.asarray(M, dtype=float)) @ self.coef)

    @property
    def T(self):
        return AffineExpr(np.swapaxes(self.coef, 1, 2))

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.coef[0] + np.tensordot(x[: self.n_vars], self.coef[1:], axes=1)


def bmat(blocks) -> AffineExpr:
    """Block matrix from nested lists of expressions, arrays, scalars or ``None`` (zeros)."""
    rows = [[b if b is None else AffineExpr._lift(b) for b in row] for row in blocks]
    heights = [next(b.shape[0] for b in row if b is not None) for row in rows]
    widths = [next(rows[i][j].shape[1] for i in range(len(rows)) if rows[i][j] is not None) for j in range(len(rows[0]))]
    n = max(b.n_vars for row in rows for b in row if b is not None)
    out = np.zeros((n + 1, sum(heights), sum(widths)))
    r0 = 0
    for i, row in enumerate(rows):
        c0 = 0
        for j, b in enumerate(row):
            if b is not None:
                if b.shape != (heights[i], widths[j]):
                    raise ValueError(f"block ({i}, {j}) has shape {b.shape}, expected {(heights[i], widths[j])}")
                out[:, r0 : r0 + heights[i], c0 : c0 + widths[j]] = b.padded(n)
            c0 += widths[j]
        r0 += heights[i]
    return AffineExpr(out)


class VariableSpace:
    """Allocates scalar decision variables and returns matrix-shaped views of them."""

    def __init__(self):
        self.n = 0

    def _new(self, count: int) -> int:
        start = self.n
        self.n += count
        return start

    def scalar(self) -> AffineExpr:
        i = self._new(1)
        coef = np.zeros((self.n + 1, 1, 1))
        coef[i + 1, 0, 0] = 1.0
        return AffineExpr(coef)

    def symmetric(self, d: int) -> AffineExpr:
        start = self._new(d * (d + 1) // 2)
        coef = np.zeros((self.n + 1, d, d))
        k = start + 1
        for i in range(d):
            for j in range(i, d):
                coef[k, i, j] = coef[k, j, i] = 1.0
                k += 1
        return AffineExpr(coef)

    def matrix(self, rows: int, cols: int) -> AffineExpr:
        start = self._new(rows * cols)
        coef = np.zeros((self.n + 1, rows, cols))
        for k in range(rows * cols):
            coef[start + 1 + k, k // cols, k % cols] = 1.0
        return AffineExpr(coef)


def _check_symmetric(M, what):
    if M.size == 0:
        return
    scale = max(1.0, float(np.abs(M).max()))
    if np.abs(M - np.swapaxes(M, -1, -2)).max() > 1e-12 * scale:
        raise ValueError(f"{what} is not symmetric")


@dataclass(frozen=True, eq=False)
class AffineMatrixInequality:
    """``constant + sum_i x_i coefficients[i]`` constrained PSD (or >= margin I if strict)."""

    constant: np.ndarray
    coefficients: np.ndarray
    strict: bool = False
    name: str = ""

    def __post_init__(self):
        F0 = np.atleast_2d(np.asarray(self.constant, dtype=float))
        Fi = np.asarray(self.coefficients, dtype=float)
        if Fi.ndim == 2:
            Fi = Fi[None]
        d = F0.shape[0]
        if F0.shape != (d, d) or Fi.shape[1:] != (d, d):
            raise ValueError(f"inconsistent block dimensions in {self.name or 'inequality'}")
        _check_symmetric(F0, f"constant block of {self.name or 'inequality'}")
        _check_symmetric(Fi, f"coefficient blocks of {self.name or 'inequality'}")
        object.__setattr__(self, "constant", 0.5 * (F0 + F0.T))
        object.__setattr__(self, "coefficients", 0.5 * (Fi + np.swapaxes(Fi, 1, 2)))

    @classmethod
    def from_expr(cls, expr: AffineExpr, n_vars: int, strict: bool = False, name: str = ""):
        coef = expr.padded(n_vars)
        return cls(coef[0], coef[1:], strict=strict, name=name)

    @property
    def dim(self) -> int:
        return self.constant.shape[0]

    @property
    def n_vars(self) -> int:
        return self.coefficients.shape[0]

    def evaluate(self, x) -> np.ndarray:
        return self.constant + np.tensordot(np.asarray(x, dtype=float), self.coefficients, axes=1)


@dataclass
class SdpSolution:
    variable_values: np.ndarray
    achieved_margin: float
    objective_value: float
    status: str
    block_margins: List[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


def min_eigenvalue(M) -> float:
    """Smallest eigenvalue of a symmetric matrix (non-symmetric input rejected)."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError("matrix must be square")
    _check_symmetric(M, "matrix")
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


# --------------------------------------------------------------------------
# barrier machinery


class _Block:
    __slots__ = ("B0", "Bk", "d")

    def __init__(self, B0, Bk):
        self.B0 = B0
        self.Bk = Bk
        self.d = B0.shape[0]

    def at(self, v):
        return self.B0 + np.tensordot(v, self.Bk, axes=1)


class _Group:
    """Blocks of equal size stacked so that factorizations run batched."""

    __slots__ = ("B0", "Bk", "logdet")

    def __init__(self, blocks, logdet=False):
        self.B0 = np.stack([b.B0 for b in blocks])
        self.Bk = np.stack([b.Bk for b in blocks])
        self.logdet = logdet

    def at(self, v):
        return self.B0 + np.einsum("p,kpij->kij", v, self.Bk)


def _chol(M):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return None


class _Barrier:
    """Centering of ``t * f(v) - sum log det B_j(v) - log(R^2 - |v[:m]|^2)``.

    ``f`` is linear (``objective = ("linear", c)``) or ``-log det`` of an
    affine block (``objective = ("logdet", block)``).
    """

    def __init__(self, blocks, objective, ball_dim, radius):
        self.kind, obj = objective
        by_dim = {}
        for b in blocks:
            by_dim.setdefault(b.d, []).append(b)
        self.groups = [_Group(by_dim[d]) for d in sorted(by_dim)]
        if self.kind == "logdet":
            self.groups.append(_Group([obj], logdet=True))
            self.c = None
        else:
            self.c = obj
        self.m = ball_dim
        self.R2 = radius * radius
        self.theta = sum(b.d for b in blocks) + 1.0

    def phi(self, v, t):
        total = 0.0
        for grp in self.groups:
            L = _chol(grp.at(v))
            if L is None:
                return np.inf
            diag = np.diagonal(L, axis1=1, axis2=2)
            if np.any(diag <= 0):
                return np.inf
            total -= 2.0 * (t if grp.logdet else 1.0) * float(np.log(diag).sum())
        slack = self.R2 - float(v[: self.m] @ v[: self.m])
        if slack <= 0:
            return np.inf
        total -= np.log(slack)
        if self.c is not None:
            total += t * float(self.c @ v)
        return total

    def derivatives(self, v, t):
        p = v.size
        g = np.zeros(p)
        H = np.zeros((p, p))
        for grp in self.groups:
            Li = np.linalg.inv(np.linalg.cholesky(grp.at(v)))
            W = Li[:, None] @ grp.Bk @ np.swapaxes(Li, 1, 2)[:, None]
            wgt = t if grp.logdet else 1.0
            g -= wgt * np.einsum("kpii->p", W)
            Wf = W.reshape(W.shape[0], p, -1)
            H += wgt * np.einsum("kpa,kqa->pq", Wf, Wf)
        z = v[: self.m]
        slack = self.R2 - float(z @ z)
        g[: self.m] += 2.0 * z / slack
        H[: self.m, : self.m] += 2.0 * np.eye(self.m) / slack + 4.0 * np.outer(z, z) / slack**2
        if self.c is not None:
            g += t * self.c
        return g, H

    def center(self, v, t, max_steps=200, eps=1e-10):
        """Damped Newton; returns ``(v, steps, ok)``."""
        phi_v = self.phi(v, t)
        prev, stalls = np.inf, 0
        for step in range(max_steps):
            g, H = self.derivatives(v, t)
            try:
                dv = -scipy.linalg.cho_solve(scipy.linalg.cho_factor(H), g)
            except (np.linalg.LinAlgError, ValueError):
                dv = -np.linalg.lstsq(H, g, rcond=None)[0]
            lam2 = -float(g @ dv)
            if lam2 / 2.0 <= eps:
                return v, step, True
            # rounding floor: the decrement is tiny but no longer shrinking
            stalls = stalls + 1 if (lam2 < 1e-6 and lam2 > 0.5 * prev) else 0
            if stalls >= 3:
                return v, step, True
            prev = min(prev, lam2)
            if lam2 < 0.0625:
                # quadratic-convergence region of a self-concordant barrier:
                # the full step is safe, and Armijo tests drown in rounding at large t
                cand = v + dv
                phi_c = self.phi(cand, t)
                if np.isfinite(phi_c):
                    v, phi_v = cand, phi_c
                    continue
            a = 1.0
            while True:
                cand = v + a * dv
                phi_c = self.phi(cand, t)
                if phi_c <= phi_v - 0.25 * a * lam2:
                    break
                a *= 0.5
                if a < 1e-14:
                    # no further decrease representable; accept current point
                    return v, step, lam2 < 1e-6
            v, phi_v = cand, phi_c
        return v, max_steps, False

    def run(self, v, t0=1.0, mu=20.0, tol=1e-9, stop=None, max_outer=60):
        t = t0
        total = 0
        ok = True
        for _ in range(max_outer):
            v, steps, ok_c = self.center(v, t)
            total += steps
            ok = ok and ok_c
            if stop is not None and stop(v):
                return v, total, True, "stopped"
            if self.theta / t < tol:
                return v, total, ok, "converged"
            t *= mu
        return v, total, ok, "max-iterations"


def _reduce_equalities(n, equality):
    if equality is None:
        return np.zeros(n), np.eye(n)
    A_eq, b_eq = equality
    A_eq = np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.atleast_1d(np.asarray(b_eq, dtype=float))
    x0 = np.linalg.lstsq(A_eq, b_eq, rcond=None)[0]
    if np.abs(A_eq @ x0 - b_eq).max() > 1e-9 * max(1.0, np.abs(b_eq).max()):
        raise ValueError("inconsistent equality constraints")
    N = scipy.linalg.null_space(A_eq)
    return x0, N


def solve_sdp(
    inequalities: Sequence[AffineMatrixInequality],
    objective: str = "feasibility",
    *,
    c=None,
    logdet: Optional[AffineMatrixInequality] = None,
    margin: float = 0.0,
    equality=None,
    radius: float = 1e6,
    tol: float = 1e-9,
) -> SdpSolution:
    """Solve a system of affine matrix inequalities.

    Parameters
    ----------
    inequalities : sequence of AffineMatrixInequality
        Strict blocks are enforced as ``F(x) >= margin I``; the others as
        ``F(x) >= 0``.
    objective : {"feasibility", "linear", "max-logdet", "max-margin"}
    c : array_like, optional
        Objective vector for ``"linear"`` (maximized).
    logdet : AffineMatrixInequality, optional
        Affine symmetric matrix whose log-determinant is maximized for
        ``"max-logdet"``.  It is also kept positive definite.
    margin : float
        Required minimum eigenvalue for strict blocks.
    equality : (A_eq, b_eq), optional
        Linear equalities ``A_eq x = b_eq``.
    radius : float
        Bound on the norm of the free (equality-reduced) variables.
    tol : float
        Barrier duality-gap tolerance.

    Returns
    -------
    SdpSolution
        ``achieved_margin`` is the smallest eigenvalue over the strict blocks
        (over all blocks when none is strict).  On infeasibility the point
        maximizing the common slack is returned with ``status="infeasible"``.
    """
    ineqs = list(inequalities)
    if not ineqs:
        raise ValueError("at least one inequality is required")
    n = max(F.n_vars for F in ineqs)
    if n < 1:
        raise ValueError("at least one variable is required")
    if objective not in ("feasibility", "linear", "max-logdet", "max-margin"):
        raise ValueError(f"unknown objective {objective!r}")
    if objective == "linear" and c is None:
        raise ValueError("linear objective needs c")
    if objective == "max-logdet" and logdet is None:
        raise ValueError("max-logdet objective needs the logdet block")
    if margin < 0:
        raise ValueError("margin must be nonnegative")

    def padded(F):
        Fi = np.zeros((n,) + F.constant.shape)
        Fi[: F.n_vars] = F.coefficients
        return F.constant, Fi

    x0, N = _reduce_equalities(n, equality)
    m = N.shape[1]

    def reduce(F, shift=0.0):
        F0, Fi = padded(F)
        B0 = F0 + np.tensordot(x0, Fi, axes=1) - shift * np.eye(F0.shape[0])
        Bk = np.tensordot(N.T, Fi, axes=1)
        return B0, Bk

    shifts = [margin if F.strict else 0.0 for F in ineqs]
    reduced = [reduce(F, s) for F, s in zip(ineqs, shifts)]
    if objective == "max-logdet":
        reduced_ld = reduce(logdet)

    def evaluate_x(z):
        x = x0 + N @ z
        margins = [min_eigenvalue(F.evaluate(x)) for F in ineqs]
        strict = [mg for mg, F in zip(margins, ineqs) if F.strict]
        return x, margins, (min(strict) if strict else min(margins))

    # phase I: minimize s subject to B_j(z) + s I > 0
    phase1 = list(reduced) + ([reduced_ld] if objective == "max-logdet" else [])
    z = np.zeros(m)
    lam = [float(np.linalg.eigvalsh(B0)[0]) for B0, _ in phase1]
    s0 = max(0.0, -min(lam)) + 1.0
    blocks1 = [_Block(B0 + 0.0, np.concatenate([Bk, np.eye(B0.shape[0])[None]], axis=0)) for B0, Bk in phase1]
    c1 = np.zeros(m + 1)
    c1[-1] = 1.0
    bar1 = _Barrier(blocks1, ("linear", c1), m, radius)
    v, it1, ok1, how = bar1.run(np.append(z, s0), tol=tol, stop=lambda v: v[-1] < 0.0)
    z = v[:m]
    if v[-1] >= 0.0:
        x, margins, achieved = evaluate_x(z)
        logger.debug("phase I ended with slack %g (%s)", v[-1], how)
        return SdpSolution(x, achieved, np.nan, "infeasible", margins, it1)

    iterations = it1
    if objective == "feasibility":
        x, margins, achieved = evaluate_x(z)
        return SdpSolution(x, achieved, 0.0, "feasible", margins, iterations)

    if objective == "max-margin":
        strict_idx = [j for j, F in enumerate(ineqs) if F.strict] or list(range(len(ineqs)))
        lam = [float(np.linalg.eigvalsh(reduced[j][0] + np.tensordot(z, reduced[j][1], axes=1))[0]) for j in strict_idx]
        s_start = min(lam) - 0.1 * max(abs(min(lam)), 1.0)
        blocks2 = []
        for j, (B0, Bk) in enumerate(reduced):
            if j in strict_idx:
                # undo the fixed shift; s takes its place
                B0 = B0 + shifts[j] * np.eye(B0.shape[0])
                coef_s = -np.eye(B0.shape[0])[None]
            else:
                coef_s = np.zeros((1,) + B0.shape)
            blocks2.append(_Block(B0, np.concatenate([Bk, coef_s], axis=0)))
        c2 = np.zeros(m + 1)
        c2[-1] = -1.0
        bar2 = _Barrier(blocks2, ("linear", c2), m, radius)
        v, it2, ok2, how = bar2.run(np.append(z, s_start), tol=tol)
        iterations += it2
        x, margins, achieved = evaluate_x(v[:m])
        status = "optimal" if (how == "converged" and ok2) else "numerical-failure"
        if achieved < margin - 1e-12:
            status = "infeasible"
        return SdpSolution(x, achieved, achieved, status, margins, iterations)

    blocks2 = [_Block(B0, Bk) for B0, Bk in reduced]
    if objective == "linear":
        c_z = -(N.T @ np.asarray(c, dtype=float))
        bar2 = _Barrier(blocks2, ("linear", c_z), m, radius)
    else:
        bar2 = _Barrier(blocks2, ("logdet", _Block(*reduced_ld)), m, radius)
    v, it2, ok2, how = bar2.run(z, tol=tol)
    iterations += it2
    x, margins, achieved = evaluate_x(v)
    if objective == "linear":
        value = float(np.asarray(c, dtype=float) @ x)
    else:
        value = float(np.linalg.slogdet(logdet.evaluate(x))[1])
    status = "optimal" if (how == "converged" and ok2) else "numerical-failure"
    if achieved < margin - 1e-12:
        status = "numerical-failure"
    return SdpSolution(x, achieved, value, status, margins, iterations)


def dump_system(path, inequalities: Sequence[AffineMatrixInequality]) -> None:
    """Write the inequality system as plain text.

    Format: for each block a header ``# block <name> strict=<0|1> dim=<d> vars=<n>``
    followed by ``n + 1`` matrices (constant first), each as ``d`` whitespace
    separated rows in ``%.17g`` and terminated by a blank line.
    """
    with open(path, "w") as fh:
        for F in inequalities:
            fh.write(f"# block {F.name or '-'} strict={int(F.strict)} dim={F.dim} vars={F.n_vars}\n")
            for M in [F.constant] + list(F.coefficients):
                for row in M:
                    fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
                fh.write("\n")
