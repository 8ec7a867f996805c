"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen from ``OPE_DOPE_NUMBA`` at import time ("0" forces the
numpy path) and can be switched at runtime with :func:`set_backend`.  Both
paths are tested against each other; the numpy path is the reference.
"""
from __future__ import annotations

import os
import warnings

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

_PAIR_BLOCK = 512


def _env_backend() -> str:
    flag = os.environ.get("OPE_DOPE_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off"):
        return "numpy"
    if not HAS_NUMBA:
        warnings.warn("numba is not available, using the numpy kernels", RuntimeWarning)
        return "numpy"
    return "numba"


_BACKEND = _env_backend()


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    previous, _BACKEND = _BACKEND, name
    return previous


def _norm_code(p: float) -> int:
    if p == 1:
        return 1
    if p == 2:
        return 2
    if np.isinf(p):
        return 0
    raise ValueError(f"norm order must be 1, 2 or inf, got {p!r}")


# ---------------------------------------------------------------- numpy path


def _np_sum_sq_pairwise(X: np.ndarray, code: int) -> float:
    m = X.shape[0]
    total = 0.0
    for start in range(0, m, _PAIR_BLOCK):
        block = X[start : start + _PAIR_BLOCK]
        diff = np.abs(block[:, None, :] - X[None, :, :])
        if code == 1:
            dist = diff.sum(axis=2)
        elif code == 2:
            dist = np.sqrt((diff * diff).sum(axis=2))
        else:
            dist = diff.max(axis=2)
        rows = np.arange(start, start + block.shape[0])[:, None]
        upper = np.arange(m)[None, :] > rows
        total += float(np.sum(dist[upper] ** 2))
    return total


def _np_cumulative_ratios(u: np.ndarray) -> np.ndarray:
    return np.cumprod(u, axis=1)


def _np_ratio_adjoint(u: np.ndarray, rho: np.ndarray, g: np.ndarray) -> np.ndarray:
    n_ep, horizon = u.shape
    acc = np.zeros_like(u)
    acc[:, horizon - 1] = g[:, horizon - 1]
    for t in range(horizon - 2, -1, -1):
        acc[:, t] = g[:, t] + u[:, t + 1] * acc[:, t + 1]
    prev = np.ones_like(u)
    prev[:, 1:] = rho[:, :-1]
    return prev * acc


def _np_softmax_hessian(X: np.ndarray, probs: np.ndarray) -> np.ndarray:
    n, d = X.shape
    A = probs.shape[1]
    # W[i, c, c'] = p_ic (delta_cc' - p_ic')
    W = -probs[:, :, None] * probs[:, None, :]
    idx = np.arange(A)
    W[:, idx, idx] += probs
    H = np.einsum("ick,ia,ib->cakb", W, X, X, optimize=True)
    return H.reshape(A * d, A * d)


def _np_per_decision_sum(w: np.ndarray, v: np.ndarray, disc: np.ndarray) -> float:
    per_step = np.sum(w * v, axis=0)
    return float(np.sum(disc * per_step))


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @numba.njit(cache=True)
    def _nb_sum_sq_pairwise(X, code):
        m, d = X.shape
        total = 0.0
        for i in range(m):
            for j in range(i + 1, m):
                acc = 0.0
                for k in range(d):
                    diff = abs(X[i, k] - X[j, k])
                    if code == 1:
                        acc += diff
                    elif code == 2:
                        acc += diff * diff
                    elif diff > acc:
                        acc = diff
                if code == 2:
                    total += acc
                else:
                    total += acc * acc
        return total

    @numba.njit(cache=True)
    def _nb_cumulative_ratios(u):
        n_ep, horizon = u.shape
        out = np.empty_like(u)
        for i in range(n_ep):
            run = 1.0
            for t in range(horizon):
                run = run * u[i, t]
                out[i, t] = run
        return out

    @numba.njit(cache=True)
    def _nb_ratio_adjoint(u, rho, g):
        n_ep, horizon = u.shape
        out = np.empty_like(u)
        for i in range(n_ep):
            acc = g[i, horizon - 1]
            for t in range(horizon - 1, -1, -1):
                if t < horizon - 1:
                    acc = g[i, t] + u[i, t + 1] * acc
                prev = 1.0 if t == 0 else rho[i, t - 1]
                out[i, t] = prev * acc
        return out

    @numba.njit(cache=True)
    def _nb_softmax_hessian(X, probs):
        n, d = X.shape
        A = probs.shape[1]
        H = np.zeros((A * d, A * d))
        for i in range(n):
            for c in range(A):
                for c2 in range(A):
                    w = -probs[i, c] * probs[i, c2]
                    if c == c2:
                        w += probs[i, c]
                    if w == 0.0:
                        continue
                    for k in range(d):
                        wk = w * X[i, k]
                        for l in range(d):
                            H[c * d + k, c2 * d + l] += wk * X[i, l]
        return H

    @numba.njit(cache=True)
    def _nb_per_decision_sum(w, v, disc):
        n_ep, horizon = w.shape
        total = 0.0
        for t in range(horizon):
            step = 0.0
            for i in range(n_ep):
                step += w[i, t] * v[i, t]
            total += disc[t] * step
        return total


# ---------------------------------------------------------------- dispatch


def mean_sq_pairwise(X: np.ndarray, p: float) -> float:
    """Mean of squared p-norm distances over all unordered row pairs."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    m = X.shape[0]
    if m < 2:
        raise ValueError("need at least two feature vectors")
    code = _norm_code(p)
    if _BACKEND == "numba":
        total = _nb_sum_sq_pairwise(X, code)
    else:
        total = _np_sum_sq_pairwise(X, code)
    return 2.0 * total / (m * (m - 1))


def cumulative_ratios(u: np.ndarray) -> np.ndarray:
    u = np.ascontiguousarray(u, dtype=np.float64)
    if _BACKEND == "numba":
        return _nb_cumulative_ratios(u)
    return _np_cumulative_ratios(u)


def ratio_adjoint(u: np.ndarray, rho: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull a gradient on cumulative ratios back onto per-step ratios.

    ``g[i, t]`` is dV/d rho[i, t]; the result is dV/du[i, t] where
    ``rho = cumprod(u, axis=1)``.  No division by ``u``, so zero ratios are
    handled exactly.
    """
    u = np.ascontiguousarray(u, dtype=np.float64)
    rho = np.ascontiguousarray(rho, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if _BACKEND == "numba":
        return _nb_ratio_adjoint(u, rho, g)
    return _np_ratio_adjoint(u, rho, g)


def softmax_hessian(X: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Unregularised Hessian of the multinomial-logistic NLL, (A*d) x (A*d)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    if _BACKEND == "numba":
        return _nb_softmax_hessian(X, probs)
    return _np_softmax_hessian(X, probs)


def per_decision_sum(w: np.ndarray, v: np.ndarray, disc: np.ndarray) -> float:
    """sum_t disc[t] * sum_i w[i, t] * v[i, t]."""
    w = np.ascontiguousarray(w, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    disc = np.ascontiguousarray(disc, dtype=np.float64)
    if _BACKEND == "numba":
        return float(_nb_per_decision_sum(w, v, disc))
    return _np_per_decision_sum(w, v, disc)
