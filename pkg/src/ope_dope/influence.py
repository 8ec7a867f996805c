"""Influence of individual transitions on an OPE value estimate.

For a method with parameters theta fitted by minimising L(theta, Psi) the
score of transition i is

    I_i = d rho / d Psi_i + (d rho / d theta) (d theta / d Psi_i),
    d theta / d Psi_i = -H^{-1} d^2 L / (d theta d Psi_i),

evaluated at the fitted theta.  One Hessian-inverse-vector product
c = H^{-1} d rho / d theta is shared across all transitions, after which each
score is a contraction of c with that transition's mixed partial.

Parameter layouts: BRM uses eta, the IS family uses theta_b, DR/WDR use the
concatenation (theta_b, eta) with loss CEL + MSBR.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import Dataset, FeatureMatrixSet, build_feature_matrices
from .estimators import (
    DR_METHODS,
    IS_METHODS,
    METHODS,
    BehaviorModel,
    EstimatorSettings,
    QModel,
    RhoTable,
    _normalisers,
    cel_grad,
    cel_hessian,
    dr_terms,
    dr_weights,
    fit_behavior_mle,
    fit_brm,
    importance_ratios,
    value_brm,
    value_cpdis,
    value_dr,
    value_pdis,
    value_wis,
)
from . import _kernels
from .policies import PolicySpec

TARGETS = ("features", "rewards")
DIRECT_SOLVE_MAX_P = 2000


class InfluenceError(ValueError):
    pass


def dual_order(p: float) -> float:
    if p == 1:
        return np.inf
    if p == 2:
        return 2.0
    if np.isinf(p):
        return 1.0
    raise ValueError(f"norm order must be 1, 2 or inf, got {p!r}")


def row_norms(M: np.ndarray, q: float) -> np.ndarray:
    return np.linalg.norm(np.atleast_2d(M), ord=q, axis=1)


@dataclass(frozen=True, eq=False)
class InfluenceReport:
    scores: np.ndarray  # (n, Q)
    dual_norms: np.ndarray  # (n,)
    method: str
    target: str
    q: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        Q = self.scores.shape[1]
        w.writerow(["index", "dual_norm"] + [f"score_{j}" for j in range(Q)])
        for i, (nrm, row) in enumerate(zip(self.dual_norms, self.scores)):
            w.writerow([i, repr(float(nrm))] + [repr(float(v)) for v in row])
        return buf.getvalue()

    def scaled(self, c: float) -> "InfluenceReport":
        return InfluenceReport(self.scores * c, self.dual_norms * abs(c), self.method, self.target, self.q)


# ------------------------------------------------------------- fitted state


@dataclass(frozen=True, eq=False)
class FittedMethod:
    """Everything needed to differentiate one estimator at its fitted parameters."""

    method: str
    dataset: Dataset
    policy: PolicySpec
    settings: EstimatorSettings
    fm: FeatureMatrixSet | None
    q: QModel | None
    behavior: BehaviorModel | None
    table: RhoTable | None
    value: float

    @property
    def uses_behavior(self) -> bool:
        return self.method in IS_METHODS or self.method in DR_METHODS

    @property
    def uses_q(self) -> bool:
        return self.method == "brm" or self.method in DR_METHODS

    @property
    def theta(self) -> np.ndarray:
        parts = []
        if self.uses_behavior:
            parts.append(self.behavior.theta_b)
        if self.uses_q:
            parts.append(self.q.eta)
        return np.concatenate(parts)


def fit_method(dataset: Dataset, method: str, policy: PolicySpec,
               settings: EstimatorSettings = EstimatorSettings(), theta0=None) -> FittedMethod:
    if method not in METHODS:
        raise ValueError(f"unknown estimator {method!r}")
    fm = build_feature_matrices(dataset, policy)
    q = beh = table = None
    if method == "brm" or method in DR_METHODS:
        q = fit_brm(fm, settings.lambda_q)
    if method in IS_METHODS or method in DR_METHODS:
        beh = fit_behavior_mle(dataset, settings.lambda_b, settings.epochs, settings.lr,
                               settings.behavior_solver, settings.behavior_tol, settings.clip,
                               theta0=theta0)
        table = importance_ratios(dataset, beh, policy, settings.clip)
    if method == "brm":
        value = value_brm(q, fm)
    elif method == "wis":
        value = value_wis(table.rho, table.returns)
    elif method == "pdis":
        value = value_pdis(table.rho, table.rewards, dataset.gamma)
    elif method == "cpdis":
        value = value_cpdis(table.rho, table.rewards, dataset.gamma)
    else:
        value = value_dr(table, q, fm, method == "wdr", settings.discount_mode)
    return FittedMethod(method, dataset, policy, settings, fm, q, beh, table, float(value))


# ------------------------------------------------------- loss derivatives


def _msbr_parts(fm: FeatureMatrixSet, eta: np.ndarray):
    Amat = fm.Phi - fm.gamma * fm.PhiNext
    resid = Amat @ eta - fm.rewards
    return Amat, resid


def loss_grad_hessian(method: str, theta: np.ndarray, dataset: Dataset, policy: PolicySpec,
                      settings: EstimatorSettings = EstimatorSettings()):
    """Analytic gradient and Hessian of the method's regularised training loss."""
    P_block = dataset.n_actions * dataset.d
    grads, hessians = [], []
    offset = 0
    if method in IS_METHODS or method in DR_METHODS:
        tb = theta[offset : offset + P_block]
        offset += P_block
        grads.append(cel_grad(tb, dataset.states, dataset.actions, dataset.n_actions, settings.lambda_b))
        hessians.append(cel_hessian(tb, dataset.states, dataset.n_actions, settings.lambda_b))
    if method == "brm" or method in DR_METHODS:
        eta = theta[offset : offset + P_block]
        fm = build_feature_matrices(dataset, policy)
        Amat, resid = _msbr_parts(fm, eta)
        grads.append(2.0 * Amat.T @ resid + 2.0 * settings.lambda_q * eta)
        hessians.append(2.0 * Amat.T @ Amat + 2.0 * settings.lambda_q * np.eye(P_block))
    if not grads:
        raise ValueError(f"unknown estimator {method!r}")
    P = sum(g.size for g in grads)
    H = np.zeros((P, P))
    pos = 0
    for h in hessians:
        k = h.shape[0]
        H[pos : pos + k, pos : pos + k] = h
        pos += k
    return np.concatenate(grads), H


def _placement(actions: np.ndarray, n_actions: int, d: int) -> np.ndarray:
    """(n, A*d, d) stack of block-placement matrices E_{a_i}."""
    n = actions.shape[0]
    E = np.zeros((n, n_actions, d, d))
    E[np.arange(n), actions] = np.eye(d)
    return E.reshape(n, n_actions * d, d)


def _cel_mixed(fitted: FittedMethod, target: str) -> np.ndarray:
    ds = fitted.dataset
    n, d, A = ds.n, ds.d, ds.n_actions
    if target == "rewards":
        return np.zeros((n, A * d, 1))
    X = ds.states
    Theta = fitted.behavior.blocks
    Pb = fitted.behavior.action_probs(X)
    Y = np.zeros_like(Pb)
    Y[np.arange(n), ds.actions] = 1.0
    theta_bar = Pb @ Theta
    g = Pb[:, :, None] * (Theta[None, :, :] - theta_bar[:, None, :])  # (n, A, d)
    M = np.einsum("ik,icl->ickl", X, g)
    M += (Pb - Y)[:, :, None, None] * np.eye(d)[None, None, :, :]
    return M.reshape(n, A * d, d)


def _msbr_mixed(fitted: FittedMethod, target: str) -> np.ndarray:
    fm, eta = fitted.fm, fitted.q.eta
    Amat, resid = _msbr_parts(fm, eta)
    if target == "rewards":
        return (-2.0 * Amat)[:, :, None]
    ds = fitted.dataset
    d, A = ds.d, ds.n_actions
    eta_a = eta.reshape(A, d)[ds.actions]  # (n, d)
    M = 2.0 * resid[:, None, None] * _placement(ds.actions, A, d)
    M += 2.0 * Amat[:, :, None] * eta_a[:, None, :]
    return M


def mixed_partials(fitted: FittedMethod, target: str) -> np.ndarray:
    """d^2 L / (d theta d Psi_i) for every transition: shape (n, P, Q)."""
    _check_target(target)
    parts = []
    if fitted.uses_behavior:
        parts.append(_cel_mixed(fitted, target))
    if fitted.uses_q:
        parts.append(_msbr_mixed(fitted, target))
    return np.concatenate(parts, axis=1)


def loss_input_gradient(fitted: FittedMethod, target: str) -> np.ndarray:
    """dL/dPsi_i at the fitted parameters, shape (n, Q)."""
    _check_target(target)
    ds = fitted.dataset
    n, d, A = ds.n, ds.d, ds.n_actions
    out = np.zeros((n, 1 if target == "rewards" else d))
    if fitted.uses_behavior and target == "features":
        Theta = fitted.behavior.blocks
        Pb = fitted.behavior.action_probs(ds.states)
        out += -(Theta[ds.actions] - Pb @ Theta)
    if fitted.uses_q:
        _, resid = _msbr_parts(fitted.fm, fitted.q.eta)
        if target == "rewards":
            out[:, 0] += -2.0 * resid
        else:
            out += 2.0 * resid[:, None] * fitted.q.eta.reshape(A, d)[ds.actions]
    return out


# ------------------------------------------------------ value derivatives


def _is_value_grads(fitted: FittedMethod, rho_grad: np.ndarray):
    """Pull dV/drho back to theta_b and to the state features (direct term)."""
    ds, table, beh, settings = fitted.dataset, fitted.table, fitted.behavior, fitted.settings
    n, d, A = ds.n, ds.d, ds.n_actions
    dV_du = _kernels.ratio_adjoint(table.ratios, table.rho, rho_grad).reshape(-1)
    X = ds.states
    idx = np.arange(n)
    u = table.ratios.reshape(-1)
    pb = table.behavior_probs.reshape(-1)
    live = (pb > settings.clip).astype(np.float64)  # clipped branch is constant in theta_b
    Theta = beh.blocks
    Pb = beh.action_probs(X)
    Y = np.zeros_like(Pb)
    Y[idx, ds.actions] = 1.0
    # d u / d theta_c = -[live] u (y_c - pb_c) xi
    coef = -(live * u)[:, None] * (Y - Pb)
    grad_theta = np.einsum("i,ic,ik->ck", dV_du, coef, X).reshape(-1)
    # d u / d xi = (d pi_a/d xi) / max(pb, clip) - [live] u (Theta_a - theta_bar)
    jac = fitted.policy.action_jacobian(X)[idx, ds.actions]  # (n, d)
    du_dx = jac / np.maximum(pb, settings.clip)[:, None]
    du_dx -= (live * u)[:, None] * (Theta[ds.actions] - Pb @ Theta)
    direct_x = dV_du[:, None] * du_dx
    return grad_theta, direct_x


def value_gradients(fitted: FittedMethod, target: str):
    """Return (direct term (n, Q), d rho / d theta (P,))."""
    _check_target(target)
    m = fitted.method
    ds = fitted.dataset
    n, d, A = ds.n, ds.d, ds.n_actions
    if m == "brm":
        return np.zeros((n, 1 if target == "rewards" else d)), fitted.fm.initial_weights.copy()

    table = fitted.table
    rho, r = table.rho, table.rewards
    N, T = rho.shape
    disc = table.discounts
    if m == "wis":
        S = rho[:, -1].sum()
        G = np.zeros_like(rho)
        G[:, -1] = (table.returns - fitted.value) / S
        dV_dr = disc[None, :] * (rho[:, -1] / S)[:, None]
    elif m == "pdis":
        G = disc * r / N
        dV_dr = disc * rho / N
    elif m == "cpdis":
        S = _normalisers(rho, "cpdis")
        mean_r = (rho * r).sum(axis=0) / S
        G = disc * (r - mean_r) / S
        dV_dr = disc * rho / S
    else:
        K, discounted = dr_terms(fitted.q, fitted.fm, fitted.settings.discount_mode)
        eta = fitted.q.eta
        delta = (r.reshape(-1) + K @ eta).reshape(N, T)
        dd = disc if discounted else np.ones(T)
        if m == "wdr":
            S = _normalisers(rho, "wdr")
            mean_d = (rho * delta).sum(axis=0) / S
            G = dd * (delta - mean_d) / S
        else:
            G = dd * delta / N
        dV_ddelta = dd * dr_weights(rho, m == "wdr")
        dV_dr = dV_ddelta

    grad_b, direct_x = _is_value_grads(fitted, G)
    if m in IS_METHODS:
        grad_theta = grad_b
        if target == "rewards":
            return dV_dr.reshape(n, 1), grad_theta
        return direct_x, grad_theta

    # doubly robust: extra paths through delta
    w = dV_ddelta.reshape(-1)
    grad_eta = fitted.fm.initial_weights + K.T @ w
    grad_theta = np.concatenate([grad_b, grad_eta])
    if target == "rewards":
        return dV_dr.reshape(n, 1), grad_theta
    eta_blocks = eta.reshape(A, d)
    ddelta_dx = -eta_blocks[ds.actions]
    if fitted.settings.discount_mode == "paper-literal":
        X = ds.states
        probs = fitted.policy.action_probs(X)
        jac = fitted.policy.action_jacobian(X)  # (n, A, d)
        qvals = X @ eta_blocks.T  # (n, A)
        ddelta_dx += np.einsum("iak,ia->ik", jac, qvals) + probs @ eta_blocks
    return direct_x + w[:, None] * ddelta_dx, grad_theta


# -------------------------------------------------------------- HIVP solve


def conjugate_gradient(matvec, v: np.ndarray, tol: float = 1e-12, max_iter: int | None = None):
    x = np.zeros_like(v)
    r = v.copy()
    p = r.copy()
    rs = r @ r
    target = (tol * np.linalg.norm(v)) ** 2
    max_iter = max_iter or 10 * v.size
    for _ in range(max_iter):
        if rs <= target:
            break
        Ap = matvec(p)
        curv = p @ Ap
        if curv <= 0:
            raise InfluenceError("Hessian is not positive definite; increase damping")
        step = rs / curv
        x += step * p
        r -= step * Ap
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def solve_hivp(H, v: np.ndarray, damping: float = 0.0, backend: str = "auto") -> np.ndarray:
    """Solve (H + damping I) x = v.

    ``H`` may be a matrix or a Hessian-vector-product callable (CG only).
    ``backend`` is "direct" (Cholesky), "cg" or "auto" (direct up to
    P = 2000 when H is a matrix).
    """
    v = np.asarray(v, dtype=np.float64)
    if damping < 0:
        raise ValueError("damping must be non-negative")
    matrix = not callable(H)
    if backend == "auto":
        backend = "direct" if matrix and v.shape[0] <= DIRECT_SOLVE_MAX_P else "cg"
    if backend == "direct":
        if not matrix:
            raise ValueError("direct backend needs an explicit matrix")
        Hd = np.asarray(H) + damping * np.eye(v.shape[0])
        try:
            L = np.linalg.cholesky(Hd)
        except np.linalg.LinAlgError:
            raise InfluenceError("H + damping*I is not positive definite; increase damping") from None
        x = np.linalg.solve(L.T, np.linalg.solve(L, v))
        # one step of iterative refinement
        x += np.linalg.solve(L.T, np.linalg.solve(L, v - Hd @ x))
        return x
    if backend == "cg":
        if matrix:
            Hm = np.asarray(H)
            matvec = lambda p: Hm @ p + damping * p  # noqa: E731
        else:
            matvec = lambda p: H(p) + damping * p  # noqa: E731
        if v.ndim == 2:
            return np.column_stack([conjugate_gradient(matvec, v[:, j]) for j in range(v.shape[1])])
        return conjugate_gradient(matvec, v)
    raise ValueError(f"unknown backend {backend!r}")


# ------------------------------------------------------------------ scores


def _check_target(target: str):
    if target not in TARGETS:
        raise ValueError(f"unknown influence target {target!r}; choose from {TARGETS}")


def param_sensitivity(fitted: FittedMethod, i: int, target: str, damping: float = 0.0,
                      hessian: np.ndarray | None = None) -> np.ndarray:
    """d theta / d Psi_i = -H^{-1} d^2 L / (d theta d Psi_i), shape (P, Q)."""
    if hessian is None:
        _, hessian = loss_grad_hessian(fitted.method, fitted.theta, fitted.dataset,
                                       fitted.policy, fitted.settings)
    M = mixed_partials(fitted, target)[i]
    return -solve_hivp(hessian, M, damping)


def influence_scores(method_or_fitted, dataset: Dataset | None = None, target: str = "features",
                     policy: PolicySpec | None = None, settings: EstimatorSettings = EstimatorSettings(),
                     p: float = 1, damping: float = 0.0, naive: bool = False) -> InfluenceReport:
    """Influence of every transition on the method's value estimate.

    Pass either a :class:`FittedMethod` or ``(method, dataset, target, policy)``.
    ``naive=True`` solves one Hessian system per transition instead of the
    shared Hessian-inverse-vector product (used for cross-checking).
    """
    _check_target(target)
    if isinstance(method_or_fitted, FittedMethod):
        fitted = method_or_fitted
    else:
        if dataset is None or policy is None:
            raise InfluenceError("need a dataset and an evaluation policy to fit the method")
        fitted = fit_method(dataset, method_or_fitted, policy, settings)
    _, H = loss_grad_hessian(fitted.method, fitted.theta, fitted.dataset, fitted.policy, fitted.settings)
    direct, grad_theta = value_gradients(fitted, target)
    M = mixed_partials(fitted, target)
    if naive:
        indirect = np.stack([-grad_theta @ solve_hivp(H, M[i], damping) for i in range(M.shape[0])])
    else:
        c = solve_hivp(H, grad_theta, damping)
        indirect = -np.einsum("p,npq->nq", c, M)
    scores = direct + indirect
    if not np.all(np.isfinite(scores)):
        raise InfluenceError("non-finite influence scores")
    qn = dual_order(p)
    return InfluenceReport(scores, row_norms(scores, qn), fitted.method, target, qn)


# ------------------------------------------------ closed forms for BRM


def _brm_gram(fm: FeatureMatrixSet, lam: float):
    Amat = fm.Phi - fm.gamma * fm.PhiNext
    G = Amat.T @ Amat + lam * np.eye(Amat.shape[1])
    return Amat, G


def brm_influence_rewards(fm: FeatureMatrixSet, policy: PolicySpec | None = None,
                          lam: float = 1e-2) -> np.ndarray:
    """Closed-form reward influence for BRM: 4 c0^T G^{-1} A^T (one entry per transition).

    c0 collects p0 and the evaluation policy over D0, A = Phi - gamma PhiNext
    and G = A^T A + lam I.  Equal to the general chain-rule score times 4.
    """
    Amat, G = _brm_gram(fm, lam)
    z = solve_hivp(G, _initial_weights(fm, policy))
    return 4.0 * Amat @ z


def brm_influence_features(fm: FeatureMatrixSet, policy: PolicySpec | None = None,
                           q: QModel | None = None, lam: float = 1e-2) -> np.ndarray:
    """Closed-form state-feature influence for BRM, one d-block per transition.

    -4 c0^T G^{-1} (2 A_i^T eta_{a_i}^T + 2 e_i E_{a_i}) with residual
    e_i = A_i eta - r_i; equal to the general chain-rule score times 8.
    """
    if q is None:
        q = fit_brm(fm, lam)
    Amat, G = _brm_gram(fm, lam)
    z = solve_hivp(G, _initial_weights(fm, policy))
    A, d = fm.n_actions, fm.d
    resid = Amat @ q.eta - fm.rewards
    eta_a = q.eta.reshape(A, d)[fm.actions]
    z_a = z.reshape(A, d)[fm.actions]
    return -4.0 * (2.0 * (Amat @ z)[:, None] * eta_a + 2.0 * resid[:, None] * z_a)


def _initial_weights(fm: FeatureMatrixSet, policy: PolicySpec | None) -> np.ndarray:
    if policy is None:
        return fm.initial_weights
    d = fm.d
    pi0 = policy.action_probs(fm.Phi0[:, 0, :d])
    return np.einsum("s,sa,sap->p", fm.p0, pi0, fm.Phi0)
