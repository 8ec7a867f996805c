"""Budgeted data-poisoning attacks on OPE estimates.

DOPE ranks transitions by the dual norm of their influence scores, gives each
selected transition the budget-feasible perturbation that maximises the
first-order change of the estimate, then backtracks the step size with exact
refits.  Random, Random-DOPE, FGSM and Projected-DOPE are the baselines.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .estimators import EstimatorSettings
from .influence import (
    InfluenceReport,
    dual_order,
    fit_method,
    influence_scores,
    loss_input_gradient,
    row_norms,
)
from .policies import PolicySpec

ATTACKS = ("dope", "random", "random-dope", "fgsm", "projected-dope")
LINE_SEARCH_RESOLUTION = 20
_NORMS = (1, 2, np.inf)


class AttackError(ValueError):
    pass


def _check_norm(p) -> float:
    p = float(p)
    if p not in _NORMS:
        raise ValueError(f"norm order must be 1, 2 or inf, got {p!r}")
    return p


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float
    p: float = 1
    direction: int = 1
    resolution: int = LINE_SEARCH_RESOLUTION
    min_threshold: float | None = None  # in percent-error units, signed by direction
    seed: int = 0
    iterations: int = 1

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")
        if self.resolution < 1 or self.iterations < 1:
            raise ValueError("resolution and iterations must be >= 1")
        object.__setattr__(self, "p", _check_norm(self.p))


@dataclass(frozen=True, eq=False)
class AttackResult:
    attack: str
    method: str
    target: str
    selected: np.ndarray
    delta: np.ndarray  # (n, Q), zero outside `selected`
    beta: float
    v_org: float
    v_pert: float
    n_refits: int = 0
    info: dict = field(default_factory=dict)

    @property
    def pct_error(self) -> float:
        return percent_error(self.v_org, self.v_pert)


def percent_error(v_org: float, v_pert: float) -> float:
    if v_org == 0:
        raise AttackError("percentage error is undefined for a zero original estimate")
    return 100.0 * (v_pert - v_org) / abs(v_org)


# ---------------------------------------------------------------- pieces


def budget_size(alpha: float, n: int) -> int:
    # round first so that e.g. 0.07 * 100 does not become 8
    return min(n, math.ceil(round(alpha * n, 9)))


def select_influential_set(report, alpha: float) -> np.ndarray:
    """Indices of the ceil(alpha n) largest dual norms, ties to the lowest index.

    ``report`` is an InfluenceReport or a vector of dual norms.
    """
    norms = report.dual_norms if isinstance(report, InfluenceReport) else np.asarray(report, dtype=np.float64)
    k = budget_size(alpha, norms.shape[0])
    order = np.argsort(-norms, kind="stable")
    return np.sort(order[:k])


def optimal_delta(I, epsilon: float, p) -> np.ndarray:
    """Maximiser of I . delta over the epsilon-radius p-ball.

    Accepts one vector or a stack of row vectors.
    """
    p = _check_norm(p)
    I = np.asarray(I, dtype=np.float64)
    rows = np.atleast_2d(I)
    if np.isinf(p):
        out = epsilon * np.sign(rows)
    elif p == 2:
        nrm = np.linalg.norm(rows, axis=1, keepdims=True)
        out = np.divide(epsilon * rows, nrm, out=np.zeros_like(rows), where=nrm > 0)
    else:
        out = np.zeros_like(rows)
        j = np.argmax(np.abs(rows), axis=1)  # first maximum on ties
        idx = np.arange(rows.shape[0])
        out[idx, j] = epsilon * np.sign(rows[idx, j])
    return out.reshape(I.shape)


def _project_l1(v: np.ndarray, radius: float) -> np.ndarray:
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    if radius == 0:
        return np.zeros_like(v)
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    rho = np.nonzero(u * k > css - radius)[0][-1]
    tau = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - tau, 0.0)


def project_ball(v, epsilon: float, p) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the epsilon-radius p-ball."""
    p = _check_norm(p)
    v = np.asarray(v, dtype=np.float64)
    rows = np.atleast_2d(v)
    if np.isinf(p):
        out = np.clip(rows, -epsilon, epsilon)
    elif p == 2:
        nrm = np.linalg.norm(rows, axis=1, keepdims=True)
        scale = np.minimum(1.0, np.divide(epsilon, nrm, out=np.ones_like(nrm), where=nrm > 0))
        out = rows * scale
    else:
        out = np.stack([_project_l1(r, epsilon) for r in rows]) if rows.shape[0] else rows.copy()
    return out.reshape(v.shape)


def sample_ball(rng: np.random.Generator, k: int, Q: int, epsilon: float, p) -> np.ndarray:
    """k points drawn uniformly from the epsilon-radius p-ball in R^Q."""
    p = _check_norm(p)
    if np.isinf(p):
        return rng.uniform(-epsilon, epsilon, size=(k, Q))
    if p == 2:
        g = rng.standard_normal((k, Q))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return epsilon * g * rng.random((k, 1)) ** (1.0 / Q)
    # uniform on the simplex {x >= 0, sum x <= 1} from Q+1 exponential spacings
    e = rng.exponential(size=(k, Q + 1))
    x = e[:, :Q] / e.sum(axis=1, keepdims=True)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(k, Q))
    return epsilon * signs * x


def perturb(dataset: Dataset, target: str, delta: np.ndarray) -> Dataset:
    if target == "features":
        return dataset.with_states(dataset.states + delta)
    if target == "rewards":
        return dataset.with_rewards(dataset.rewards + delta[:, 0])
    raise ValueError(f"unknown target {target!r}")


def _target_width(dataset: Dataset, target: str) -> int:
    return dataset.d if target == "features" else 1


class _Evaluator:
    """Refits the method on perturbed copies of one dataset and counts refits."""

    def __init__(self, dataset, method, target, policy, settings, fitted=None):
        self.dataset, self.method, self.target = dataset, method, target
        self.policy, self.settings = policy, settings
        self.fitted = fitted if fitted is not None else fit_method(dataset, method, policy, settings)
        self.v_org = self.fitted.value
        self._theta0 = self.fitted.behavior.theta_b if self.fitted.behavior is not None else None
        self.n_refits = 0

    def value(self, delta: np.ndarray) -> float:
        if not np.any(delta):
            return self.v_org
        self.n_refits += 1
        ds = perturb(self.dataset, self.target, delta)
        return fit_method(ds, self.method, self.policy, self.settings, theta0=self._theta0).value


def line_search(evaluator: _Evaluator, delta: np.ndarray, direction: int = 1,
                resolution: int = LINE_SEARCH_RESOLUTION, min_threshold: float | None = None,
                base: np.ndarray | None = None, base_error: float = 0.0):
    """Largest beta on {1, 1 - 1/K, ..., 0} whose refit error beats the threshold.

    The candidate perturbation is ``(1 - beta) * base + beta * delta`` (``base``
    defaults to zero).  Error is direction * percentage error and must exceed
    max(0, min_threshold, base_error).  Returns ``(beta, v_pert)``; beta = 0
    leaves the base perturbation in place.
    """
    if base is None:
        base = np.zeros_like(delta)
    v0 = evaluator.value(base) if np.any(base) else evaluator.v_org
    if not np.any(delta - base):
        return 0.0, v0
    floor = max(0.0, base_error, -np.inf if min_threshold is None else float(min_threshold))
    for k in range(resolution, 0, -1):
        beta = k / resolution
        v = evaluator.value((1.0 - beta) * base + beta * delta)
        if direction * percent_error(evaluator.v_org, v) > floor:
            return beta, v
    return 0.0, v0


# --------------------------------------------------------------- attacks


def _result(name, ev: _Evaluator, selected, delta, beta, v_pert, **info) -> AttackResult:
    return AttackResult(name, ev.method, ev.target, np.asarray(selected, dtype=np.int64), delta,
                        float(beta), float(ev.v_org), float(v_pert), ev.n_refits, info)


def _zero_delta(dataset, target):
    return np.zeros((dataset.n, _target_width(dataset, target)))


def _influence_guided(name, dataset, method, target, cfg, policy, settings, choose, make_delta,
                      prepared=None):
    fitted, report0 = prepared if prepared is not None else (None, None)
    ev = _Evaluator(dataset, method, target, policy, settings, fitted)
    current = _zero_delta(dataset, target)
    if cfg.epsilon == 0 or budget_size(cfg.alpha, dataset.n) == 0:
        return _result(name, ev, np.empty(0, np.int64), current, 0.0, ev.v_org)
    selected = None
    v_cur, err_cur, beta = ev.v_org, 0.0, 0.0
    for it in range(cfg.iterations):
        if it == 0 and report0 is not None:
            report = report0
        else:
            fitted = ev.fitted if it == 0 else fit_method(perturb(dataset, target, current), method, policy, settings)
            report = influence_scores(fitted, target=target, p=cfg.p)
        scores = cfg.direction * report.scores
        if selected is None:
            selected = choose(report)
        proposal = current.copy()
        proposal[selected] = make_delta(scores[selected])
        b, v = line_search(ev, proposal, cfg.direction, cfg.resolution,
                           cfg.min_threshold if it == 0 else None, base=current, base_error=err_cur)
        if b == 0.0:
            break
        current = (1.0 - b) * current + b * proposal
        v_cur, err_cur = v, cfg.direction * percent_error(ev.v_org, v)
        beta = b if it == 0 else beta
    if not np.any(current):
        selected_out = np.empty(0, np.int64)
    else:
        selected_out = selected
    return _result(name, ev, selected_out, current, beta, v_cur)


def dope_attack(dataset: Dataset, method: str, target: str, cfg: AttackConfig, policy: PolicySpec,
                settings: EstimatorSettings = EstimatorSettings(), prepared=None) -> AttackResult:
    """Influence-guided attack: top-influence set, closed-form deltas, line search."""
    return _influence_guided(
        "dope", dataset, method, target, cfg, policy, settings,
        choose=lambda rep: select_influential_set(rep, cfg.alpha),
        make_delta=lambda s: optimal_delta(s, cfg.epsilon, cfg.p), prepared=prepared,
    )


def random_dope(dataset: Dataset, method: str, target: str, cfg: AttackConfig, policy: PolicySpec,
                settings: EstimatorSettings = EstimatorSettings(), prepared=None) -> AttackResult:
    """Random index set with DOPE's closed-form deltas and line search."""
    rng = np.random.default_rng(cfg.seed)

    def choose(rep):
        k = budget_size(cfg.alpha, dataset.n)
        return np.sort(rng.choice(dataset.n, size=k, replace=False))

    return _influence_guided("random-dope", dataset, method, target, cfg, policy, settings,
                             choose, lambda s: optimal_delta(s, cfg.epsilon, cfg.p), prepared)


def projected_dope(dataset: Dataset, method: str, target: str, cfg: AttackConfig, policy: PolicySpec,
                   settings: EstimatorSettings = EstimatorSettings(), prepared=None) -> AttackResult:
    """DOPE with each delta the projection of the (signed) influence onto the ball."""
    return _influence_guided(
        "projected-dope", dataset, method, target, cfg, policy, settings,
        choose=lambda rep: select_influential_set(rep, cfg.alpha),
        make_delta=lambda s: project_ball(s, cfg.epsilon, cfg.p), prepared=prepared,
    )


def random_attack(dataset: Dataset, method: str, target: str, cfg: AttackConfig, policy: PolicySpec,
                  settings: EstimatorSettings = EstimatorSettings(), prepared=None) -> AttackResult:
    """Uniform ball samples on uniformly chosen transitions, no line search."""
    ev = _Evaluator(dataset, method, target, policy, settings, prepared[0] if prepared else None)
    rng = np.random.default_rng(cfg.seed)
    k = budget_size(cfg.alpha, dataset.n)
    selected = np.sort(rng.choice(dataset.n, size=k, replace=False))
    delta = _zero_delta(dataset, target)
    delta[selected] = sample_ball(rng, k, delta.shape[1], cfg.epsilon, cfg.p)
    if cfg.epsilon == 0:
        selected = np.empty(0, np.int64)
    return _result("random", ev, selected, delta, 1.0, ev.value(delta))


def fgsm_attack(dataset: Dataset, method: str, target: str, cfg: AttackConfig, policy: PolicySpec,
                settings: EstimatorSettings = EstimatorSettings(), prepared=None) -> AttackResult:
    """Ascend the training loss: largest loss-gradient dual norms, one refit."""
    ev = _Evaluator(dataset, method, target, policy, settings, prepared[0] if prepared else None)
    grad = loss_input_gradient(ev.fitted, target)
    selected = select_influential_set(row_norms(grad, dual_order(cfg.p)), cfg.alpha)
    delta = _zero_delta(dataset, target)
    delta[selected] = optimal_delta(grad[selected], cfg.epsilon, cfg.p)
    if cfg.epsilon == 0:
        selected = np.empty(0, np.int64)
    return _result("fgsm", ev, selected, delta, 1.0, ev.value(delta))


_DISPATCH = {
    "dope": dope_attack,
    "random": random_attack,
    "random-dope": random_dope,
    "fgsm": fgsm_attack,
    "projected-dope": projected_dope,
}

LINE_SEARCHED = ("dope", "random-dope", "projected-dope")


def run_attack(name: str, dataset: Dataset, method: str, target: str, cfg: AttackConfig,
               policy: PolicySpec, settings: EstimatorSettings = EstimatorSettings(),
               prepared=None) -> AttackResult:
    """Dispatch by attack name.

    ``prepared`` is an optional ``(fitted, influence_report)`` pair computed on
    the clean dataset; the report must use the same target and norm as ``cfg``.
    """
    try:
        fn = _DISPATCH[name]
    except KeyError:
        raise ValueError(f"unknown attack {name!r}; choose from {ATTACKS}") from None
    return fn(dataset, method, target, cfg, policy, settings, prepared=prepared)
