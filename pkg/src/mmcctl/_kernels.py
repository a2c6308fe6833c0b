"""Closed-loop recursions.

Two implementations of each loop: explicit scalar loops compiled with numba,
and a per-step numpy version.  ``MMCCTL_DISABLE_JIT=1`` (or a missing numba)
selects numpy.  Both return the number of completed steps; a value below
``steps`` means the divergence guard tripped at that step.
"""

from __future__ import annotations

import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

_DISABLED = os.environ.get("MMCCTL_DISABLE_JIT", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


USE_JIT = HAVE_NUMBA and not _DISABLED

# full-state index of the arm currents, per phase [iu, il, vu, vl]
_CUR = np.array([0, 1, 4, 5, 8, 9])


# --------------------------------------------------------------------------
# numpy versions


def linear_loop_numpy(A, B, E, S, Kx, Kw, x0, w0, steps, limit, X, U, W):
    x = x0.copy()
    w = w0.copy()
    for k in range(steps):
        u = Kx @ x + Kw @ w
        X[k] = x
        U[k] = u
        W[k] = w
        if not (np.all(np.isfinite(x)) and np.max(np.abs(x)) <= limit):
            return k
        x = A @ x + B @ u + E @ w
        w = S @ w
    return steps


def bilinear_loop_numpy(k1, k2, k3, E, S, Kx, Kw, x0, xt0, w0, steps, vbase, limit, X, XT, U, ETA, W, SAT):
    x = x0.copy()
    xt = xt0.copy()
    w = w0.copy()
    iu = np.array([0, 4, 8])
    il = iu + 1
    vu = iu + 2
    vl = iu + 3
    for k in range(steps):
        u = Kx @ x[_CUR] + Kw @ w
        xi = u / vbase
        eta = np.clip(xi, -1.0, 1.0)
        X[k] = x
        XT[k] = xt
        U[k] = u
        ETA[k] = eta
        W[k] = w
        SAT[k] = np.any(np.abs(xi) > 1.0)
        if not (np.all(np.isfinite(x)) and np.max(np.abs(x)) <= limit):
            return k
        eu, el = eta[0::2], eta[1::2]
        ew = E @ w
        xn = np.empty_like(x)
        xn[iu] = k1 * x[iu] + k2 * eu * x[vu]
        xn[il] = k1 * x[il] + k2 * el * x[vl]
        xn[vu] = k3 * eu * x[iu] + x[vu]
        xn[vl] = k3 * el * x[il] + x[vl]
        xtn = np.empty_like(xt)
        xtn[iu] = k1 * xt[iu] + k2 * eu * xt[vu]
        xtn[il] = k1 * xt[il] + k2 * el * xt[vl]
        xtn[vu] = xt[vu]
        xtn[vl] = xt[vl]
        x = xn + ew
        xt = xtn + ew
        w = S @ w
    return steps


# --------------------------------------------------------------------------
# compiled versions


@njit(cache=True)
def _affine(M, v, out):
    n, m = M.shape
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += M[i, j] * v[j]
        out[i] = acc


@njit(cache=True)
def linear_loop_jit(A, B, E, S, Kx, Kw, x0, w0, steps, limit, X, U, W):
    n = x0.shape[0]
    q = w0.shape[0]
    x = x0.copy()
    w = w0.copy()
    u = np.empty(Kx.shape[0])
    t1 = np.empty(Kx.shape[0])
    t2 = np.empty(n)
    t3 = np.empty(n)
    t4 = np.empty(n)
    wn = np.empty(q)
    for k in range(steps):
        _affine(Kx, x, u)
        _affine(Kw, w, t1)
        for i in range(u.shape[0]):
            u[i] += t1[i]
        bad = False
        for i in range(n):
            X[k, i] = x[i]
            if not (abs(x[i]) <= limit):
                bad = True
        for i in range(u.shape[0]):
            U[k, i] = u[i]
        for i in range(q):
            W[k, i] = w[i]
        if bad:
            return k
        _affine(A, x, t2)
        _affine(B, u, t3)
        _affine(E, w, t4)
        for i in range(n):
            x[i] = t2[i] + t3[i] + t4[i]
        _affine(S, w, wn)
        for i in range(q):
            w[i] = wn[i]
    return steps


@njit(cache=True)
def bilinear_loop_jit(k1, k2, k3, E, S, Kx, Kw, x0, xt0, w0, steps, vbase, limit, X, XT, U, ETA, W, SAT):
    q = w0.shape[0]
    x = x0.copy()
    xt = xt0.copy()
    w = w0.copy()
    xbar = np.empty(6)
    u = np.empty(6)
    t1 = np.empty(6)
    eta = np.empty(6)
    ew = np.empty(12)
    wn = np.empty(q)
    for k in range(steps):
        for m in range(3):
            xbar[2 * m] = x[4 * m]
            xbar[2 * m + 1] = x[4 * m + 1]
        _affine(Kx, xbar, u)
        _affine(Kw, w, t1)
        sat = False
        for i in range(6):
            u[i] += t1[i]
            xi = u[i] / vbase
            if xi > 1.0:
                eta[i] = 1.0
                sat = True
            elif xi < -1.0:
                eta[i] = -1.0
                sat = True
            else:
                eta[i] = xi
        bad = False
        for i in range(12):
            X[k, i] = x[i]
            XT[k, i] = xt[i]
            if not (abs(x[i]) <= limit):
                bad = True
        for i in range(6):
            U[k, i] = u[i]
            ETA[k, i] = eta[i]
        for i in range(q):
            W[k, i] = w[i]
        SAT[k] = sat
        if bad:
            return k
        _affine(E, w, ew)
        for m in range(3):
            b = 4 * m
            eu = eta[2 * m]
            el = eta[2 * m + 1]
            iu, il, vu, vl = x[b], x[b + 1], x[b + 2], x[b + 3]
            x[b] = k1 * iu + k2 * eu * vu + ew[b]
            x[b + 1] = k1 * il + k2 * el * vl + ew[b + 1]
            x[b + 2] = k3 * eu * iu + vu + ew[b + 2]
            x[b + 3] = k3 * el * il + vl + ew[b + 3]
            iu, il, vu, vl = xt[b], xt[b + 1], xt[b + 2], xt[b + 3]
            xt[b] = k1 * iu + k2 * eu * vu + ew[b]
            xt[b + 1] = k1 * il + k2 * el * vl + ew[b + 1]
            xt[b + 2] = vu + ew[b + 2]
            xt[b + 3] = vl + ew[b + 3]
        _affine(S, w, wn)
        for i in range(q):
            w[i] = wn[i]
    return steps


def linear_loop(*args, jit=None):
    use = USE_JIT if jit is None else (jit and HAVE_NUMBA)
    return (linear_loop_jit if use else linear_loop_numpy)(*args)


def bilinear_loop(*args, jit=None):
    use = USE_JIT if jit is None else (jit and HAVE_NUMBA)
    return (bilinear_loop_jit if use else bilinear_loop_numpy)(*args)
