"""Model-free OPE estimators (BRM, WIS, PDIS, CPDIS, DR/WDR) and their fitted models."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .data import Dataset, FeatureMatrixSet, build_feature_matrices
from .policies import PolicySpec, softmax

log = logging.getLogger(__name__)

METHODS = ("brm", "wis", "pdis", "cpdis", "dr", "wdr")
IS_METHODS = ("wis", "pdis", "cpdis")
DR_METHODS = ("dr", "wdr")

_COND_LIMIT = 1e12


class EstimatorError(ValueError):
    """Raised when an estimate is undefined (e.g. a zero normaliser)."""


@dataclass(frozen=True)
class EstimatorSettings:
    lambda_q: float = 1e-2
    lambda_b: float = 1e-2
    epochs: int = 5000
    lr: float = 0.5
    clip: float = 0.01
    discount_mode: str = "standard"  # or "paper-literal" (DR only)
    behavior_solver: str = "newton"  # or "gd"
    behavior_tol: float = 1e-10

    def __post_init__(self):
        if self.discount_mode not in ("standard", "paper-literal"):
            raise ValueError(f"unknown discount_mode {self.discount_mode!r}")
        if self.behavior_solver not in ("newton", "gd"):
            raise ValueError(f"unknown behavior_solver {self.behavior_solver!r}")


@dataclass(frozen=True, eq=False)
class QModel:
    eta: np.ndarray
    lam: float
    gamma: float

    def q_values(self, Phi: np.ndarray) -> np.ndarray:
        return Phi @ self.eta


@dataclass(frozen=True, eq=False)
class BehaviorModel:
    theta_b: np.ndarray
    lam: float
    n_actions: int
    clip: float = 0.01
    converged: bool = True
    n_iter: int = 0
    grad_norm: float = 0.0

    @property
    def blocks(self) -> np.ndarray:
        return self.theta_b.reshape(self.n_actions, -1)

    def action_probs(self, X: np.ndarray) -> np.ndarray:
        return softmax(np.atleast_2d(X) @ self.blocks.T)


@dataclass(frozen=True, eq=False)
class RhoTable:
    rho: np.ndarray  # (N, T) cumulative ratios rho_{0:t}
    ratios: np.ndarray  # (N, T) per-step ratios
    rewards: np.ndarray  # (N, T)
    gamma: float
    eval_probs: np.ndarray = field(repr=False, default=None)  # pi(a_t|s_t), (N, T)
    behavior_probs: np.ndarray = field(repr=False, default=None)  # pi_b-hat(a_t|s_t), (N, T)

    @property
    def discounts(self) -> np.ndarray:
        return self.gamma ** np.arange(self.rho.shape[1])

    @property
    def returns(self) -> np.ndarray:
        return self.rewards @ self.discounts


@dataclass(frozen=True, eq=False)
class OpeEstimate:
    method: str
    value: float
    q: QModel | None = None
    behavior: BehaviorModel | None = None


# ----------------------------------------------------------------------- BRM


def fit_brm(fm: FeatureMatrixSet, lam: float = 1e-2) -> QModel:
    """Ridge-regularised Bellman residual minimiser.

    eta = (A^T A + lam I)^{-1} A^T r with A = Phi - gamma * PhiNext, the exact
    minimiser of ||A eta - r||^2 + lam ||eta||^2.
    """
    A = fm.Phi - fm.gamma * fm.PhiNext
    G = A.T @ A + lam * np.eye(A.shape[1])
    b = A.T @ fm.rewards
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        damp = 1e-8 * max(np.trace(G) / G.shape[0], 1.0)
        warnings.warn(f"BRM normal equations ill-conditioned (cond={cond:.3g}); "
                      f"adding damping {damp:.3g}", RuntimeWarning)
        G = G + damp * np.eye(G.shape[0])
    eta = np.linalg.solve(G, b)
    return QModel(eta, lam, fm.gamma)


def msbr_loss(eta: np.ndarray, fm: FeatureMatrixSet, lam: float) -> float:
    resid = (fm.Phi - fm.gamma * fm.PhiNext) @ eta - fm.rewards
    return float(resid @ resid + lam * eta @ eta)


def value_brm(q: QModel, fm: FeatureMatrixSet, policy: PolicySpec | None = None) -> float:
    """sum_{s in D0} sum_a p0(s) pi(a|s) q(s, a)."""
    if fm.Phi0.shape[0] == 0:
        raise EstimatorError("BRM value needs a non-empty initial-state set")
    pi0 = fm.pi0 if policy is None else policy.action_probs(fm.Phi0[:, 0, : fm.Phi0.shape[2] // fm.Phi0.shape[1]])
    return float(np.einsum("s,sa,sap,p->", fm.p0, pi0, fm.Phi0, q.eta))


# --------------------------------------------------------- behaviour (CEL)


def cel_loss(theta: np.ndarray, X: np.ndarray, actions: np.ndarray, n_actions: int, lam: float) -> float:
    """Negative log-likelihood of the multinomial logit plus lam ||theta||^2."""
    logits = X @ theta.reshape(n_actions, -1).T
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    nll = np.sum(lse - logits[np.arange(X.shape[0]), actions])
    return float(nll + lam * theta @ theta)


def cel_grad(theta, X, actions, n_actions, lam):
    probs = softmax(X @ theta.reshape(n_actions, -1).T)
    resid = probs
    resid[np.arange(X.shape[0]), actions] -= 1.0
    return (resid.T @ X).reshape(-1) + 2.0 * lam * theta


def cel_hessian(theta, X, n_actions, lam):
    probs = softmax(X @ theta.reshape(n_actions, -1).T)
    H = _kernels.softmax_hessian(X, probs)
    H[np.diag_indices_from(H)] += 2.0 * lam
    return H


def fit_behavior_mle(dataset: Dataset, lam: float = 1e-2, epochs: int = 5000, lr: float = 0.5,
                     solver: str = "newton", tol: float = 1e-10, clip: float = 0.01,
                     theta0: np.ndarray | None = None) -> BehaviorModel:
    """Fit the multinomial-logistic behaviour model by regularised MLE.

    ``solver="gd"`` runs ``epochs`` full-batch gradient steps of size
    ``lr`` on the per-sample mean loss; ``solver="newton"`` runs damped Newton
    steps until the gradient norm falls below ``tol * n``.
    """
    X, acts, A = dataset.states, dataset.actions, dataset.n_actions
    n = X.shape[0]
    theta = np.zeros(A * X.shape[1]) if theta0 is None else np.array(theta0, dtype=np.float64)
    loss = cel_loss(theta, X, acts, A, lam)
    if not np.isfinite(loss):
        raise EstimatorError("non-finite cross-entropy loss at the initial point")
    threshold = tol * max(n, 1)
    it = 0
    g = cel_grad(theta, X, acts, A, lam)
    if solver == "gd":
        for it in range(1, epochs + 1):
            theta = theta - lr * g / n
            g = cel_grad(theta, X, acts, A, lam)
            if np.linalg.norm(g) <= threshold:
                break
        loss = cel_loss(theta, X, acts, A, lam)
    else:
        max_iter = 200
        for it in range(1, max_iter + 1):
            if np.linalg.norm(g) <= threshold:
                it -= 1
                break
            H = cel_hessian(theta, X, A, lam)
            step = np.linalg.solve(H, g)
            # Near the optimum the loss decrease drops below float resolution;
            # accept the full step there if it shrinks the gradient.
            cand = theta - step
            g_full = cel_grad(cand, X, acts, A, lam)
            if np.linalg.norm(g_full) < 0.5 * np.linalg.norm(g):
                theta, loss, g = cand, cel_loss(cand, X, acts, A, lam), g_full
                continue
            t = 1.0
            while True:
                cand = theta - t * step
                cand_loss = cel_loss(cand, X, acts, A, lam)
                if cand_loss <= loss - 1e-4 * t * (g @ step) or t < 1e-10:
                    break
                t *= 0.5
            if cand_loss > loss:  # no descent possible at machine precision
                break
            theta, loss = cand, cand_loss
            g = cel_grad(theta, X, acts, A, lam)
    if not np.isfinite(loss):
        raise EstimatorError("cross-entropy loss diverged")
    gnorm = float(np.linalg.norm(g))
    converged = gnorm <= max(threshold, 1e-5 * n)
    if not converged:
        log.warning("behaviour model did not converge: |grad|=%.3g after %d iterations", gnorm, it)
    return BehaviorModel(theta, lam, A, clip, converged, it, gnorm)


# ------------------------------------------------------------ IS estimators


def importance_ratios(dataset: Dataset, behavior: BehaviorModel, policy: PolicySpec,
                      clip: float | None = None) -> RhoTable:
    """Cumulative ratios with per-step denominator max(pi_b-hat(a|s), clip)."""
    clip = behavior.clip if clip is None else clip
    idx = np.arange(dataset.n)
    pi = policy.action_probs(dataset.states)[idx, dataset.actions]
    pb = behavior.action_probs(dataset.states)[idx, dataset.actions]
    u = pi / np.maximum(pb, clip)
    shape = (dataset.n_episodes, dataset.horizon)
    u = u.reshape(shape)
    return RhoTable(_kernels.cumulative_ratios(u), u, dataset.rewards.reshape(shape),
                    dataset.gamma, pi.reshape(shape), pb.reshape(shape))


def _normalisers(rho: np.ndarray, name: str) -> np.ndarray:
    s = rho.sum(axis=0)
    bad = np.flatnonzero(~(s > 0))
    if bad.size:
        raise EstimatorError(f"{name}: importance weights sum to zero at time step {int(bad[0])}")
    return s


def value_wis(rho: np.ndarray, returns: np.ndarray) -> float:
    last = rho[:, -1]
    total = last.sum()
    if not total > 0:
        raise EstimatorError("wis: importance weights sum to zero at the final time step")
    # normalise first so that a single episode gets weight exactly 1
    return float((last / total) @ returns)


def value_pdis(rho: np.ndarray, rewards: np.ndarray, gamma: float) -> float:
    disc = gamma ** np.arange(rho.shape[1])
    return _kernels.per_decision_sum(rho / rho.shape[0], rewards, disc)


def value_cpdis(rho: np.ndarray, rewards: np.ndarray, gamma: float) -> float:
    disc = gamma ** np.arange(rho.shape[1])
    return _kernels.per_decision_sum(rho / _normalisers(rho, "cpdis"), rewards, disc)


def dr_terms(q: QModel, fm: FeatureMatrixSet, discount_mode: str = "standard"):
    """Per-transition correction features K (delta = r + K eta) and step discounts.

    standard:      delta_t = r_t - q(s_t, a_t) + gamma * v(s'_t), weighted by gamma^t
    paper-literal: delta_t = r_t - q(s_t, a_t) + v(s_t), no per-step discount
    """
    if discount_mode == "standard":
        return -fm.Phi + fm.gamma * fm.PhiNext, True
    if discount_mode == "paper-literal":
        return -fm.Phi + fm.PhiPi, False
    raise ValueError(f"unknown discount_mode {discount_mode!r}")


def dr_weights(rho: np.ndarray, weighted: bool) -> np.ndarray:
    if weighted:
        return rho / _normalisers(rho, "wdr")
    return rho / rho.shape[0]


def value_dr(table: RhoTable, q: QModel, fm: FeatureMatrixSet, weighted: bool = False,
             discount_mode: str = "standard") -> float:
    """Doubly robust value: direct-method baseline plus per-decision corrections."""
    K, discounted = dr_terms(q, fm, discount_mode)
    N, T = table.rho.shape
    delta = (table.rewards.reshape(-1) + K @ q.eta).reshape(N, T)
    disc = table.discounts if discounted else np.ones(T)
    correction = _kernels.per_decision_sum(dr_weights(table.rho, weighted), delta, disc)
    return correction + float(fm.initial_weights @ q.eta)


# ------------------------------------------------------------------ facade


def estimate(dataset: Dataset, method: str, policy: PolicySpec,
             settings: EstimatorSettings = EstimatorSettings(), theta0=None) -> OpeEstimate:
    """Fit whatever ``method`` needs on ``dataset`` and return its value."""
    if method not in METHODS:
        raise ValueError(f"unknown estimator {method!r}; choose from {METHODS}")
    q = beh = None
    fm = None
    if method == "brm" or method in DR_METHODS:
        fm = build_feature_matrices(dataset, policy)
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
    return OpeEstimate(method, float(value), q, beh)
