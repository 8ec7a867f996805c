"""Batch RL datasets, state-action featurisation and the sigma budget scale."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import _kernels
from .policies import PolicySpec

SIGMA_MAX_FEATURES = 10_000


class ConfigurationError(ValueError):
    """Inconsistent shapes or settings between a dataset and its consumers."""


@dataclass(frozen=True)
class Transition:
    episode_id: int
    t: int
    state_features: np.ndarray
    action: int
    reward: float
    next_state_features: np.ndarray
    is_terminal: bool = False


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """N fixed-length episodes of T transitions stored column-wise.

    Rows are ordered by (episode, t).  ``initial_states`` is the set D0 used
    by the direct-method value; it is kept separately so that perturbing the
    t=0 transitions leaves D0 untouched.
    """

    episode: np.ndarray
    t: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    initial_states: np.ndarray
    n_episodes: int
    horizon: int
    n_actions: int
    gamma: float = 0.95
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "episode", _frozen(self.episode, np.int64))
        object.__setattr__(self, "t", _frozen(self.t, np.int64))
        object.__setattr__(self, "states", _frozen(np.atleast_2d(self.states), np.float64))
        object.__setattr__(self, "actions", _frozen(self.actions, np.int64))
        object.__setattr__(self, "rewards", _frozen(self.rewards, np.float64))
        object.__setattr__(self, "next_states", _frozen(np.atleast_2d(self.next_states), np.float64))
        object.__setattr__(self, "terminal", _frozen(self.terminal, bool))
        object.__setattr__(self, "initial_states", _frozen(np.atleast_2d(self.initial_states), np.float64))
        n = self.n_episodes * self.horizon
        if self.n_episodes < 1 or self.horizon < 1:
            raise ConfigurationError("need at least one episode of length >= 1")
        for name in ("episode", "t", "actions", "rewards", "terminal"):
            if getattr(self, name).shape != (n,):
                raise ConfigurationError(f"{name} must have N*T = {n} entries")
        if self.states.shape != (n, self.d) or self.next_states.shape != (n, self.d):
            raise ConfigurationError("state and next-state features must be (N*T, d)")
        if self.initial_states.shape[1] != self.d or self.initial_states.shape[0] < 1:
            raise ConfigurationError("initial states must be a non-empty (|D0|, d) array")
        if np.any(self.actions < 0) or np.any(self.actions >= self.n_actions):
            raise ConfigurationError("actions must lie in [0, A)")
        expected_t = np.tile(np.arange(self.horizon), self.n_episodes)
        if not np.array_equal(self.t, expected_t):
            raise ConfigurationError("time steps must run 0..T-1 within every episode")
        if not np.array_equal(self.episode, np.repeat(self.episode[:: self.horizon], self.horizon)):
            raise ConfigurationError("rows must be grouped by episode")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in (0, 1)")

    @property
    def n(self) -> int:
        return self.n_episodes * self.horizon

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @classmethod
    def from_arrays(cls, states, actions, rewards, next_states, n_episodes, horizon,
                    n_actions, gamma=0.95, terminal=None, initial_states=None, meta=None):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        n = n_episodes * horizon
        if states.shape[0] != n:
            raise ConfigurationError(f"expected {n} rows, got {states.shape[0]}")
        if initial_states is None:
            initial_states = states[::horizon]
        return cls(
            episode=np.repeat(np.arange(n_episodes), horizon),
            t=np.tile(np.arange(horizon), n_episodes),
            states=states,
            actions=actions,
            rewards=rewards,
            next_states=next_states,
            terminal=np.zeros(n, bool) if terminal is None else terminal,
            initial_states=initial_states,
            n_episodes=n_episodes,
            horizon=horizon,
            n_actions=n_actions,
            gamma=gamma,
            meta=dict(meta or {}),
        )

    @classmethod
    def from_transitions(cls, transitions, n_actions, gamma=0.95, initial_states=None, meta=None):
        transitions = list(transitions)
        eps = sorted({tr.episode_id for tr in transitions})
        if not transitions or len(transitions) % len(eps):
            raise ConfigurationError("episodes must all have the same length")
        horizon = len(transitions) // len(eps)
        transitions.sort(key=lambda tr: (tr.episode_id, tr.t))
        ds = cls.from_arrays(
            states=np.array([tr.state_features for tr in transitions], dtype=np.float64),
            actions=np.array([tr.action for tr in transitions]),
            rewards=np.array([tr.reward for tr in transitions], dtype=np.float64),
            next_states=np.array([tr.next_state_features for tr in transitions], dtype=np.float64),
            n_episodes=len(eps),
            horizon=horizon,
            n_actions=n_actions,
            gamma=gamma,
            terminal=np.array([tr.is_terminal for tr in transitions]),
            initial_states=initial_states,
            meta=meta,
        )
        object.__setattr__(ds, "episode", _frozen(np.repeat(eps, horizon), np.int64))
        return ds

    def transitions(self) -> Iterator[Transition]:
        for i in range(self.n):
            yield Transition(int(self.episode[i]), int(self.t[i]), self.states[i],
                             int(self.actions[i]), float(self.rewards[i]),
                             self.next_states[i], bool(self.terminal[i]))

    def episode_view(self, values: np.ndarray) -> np.ndarray:
        """Reshape a per-transition array to (N, T, ...)."""
        return np.asarray(values).reshape((self.n_episodes, self.horizon) + np.shape(values)[1:])

    def with_states(self, states: np.ndarray) -> "Dataset":
        return replace(self, states=states)

    def with_rewards(self, rewards: np.ndarray) -> "Dataset":
        return replace(self, rewards=rewards)


# ------------------------------------------------------------- featurisation


def build_state_action_features(xi, a: int, n_actions: int) -> np.ndarray:
    xi = np.asarray(xi, dtype=np.float64)
    if not 0 <= a < n_actions:
        raise IndexError(f"action {a} out of range for {n_actions} actions")
    d = xi.shape[0]
    out = np.zeros(n_actions * d)
    out[a * d : (a + 1) * d] = xi
    return out


def state_action_rows(X: np.ndarray, actions: np.ndarray, n_actions: int) -> np.ndarray:
    """Row-wise :func:`build_state_action_features` for an (n, d) matrix."""
    n, d = X.shape
    actions = np.asarray(actions, dtype=np.int64)
    if np.any(actions < 0) or np.any(actions >= n_actions):
        raise IndexError("action out of range")
    out = np.zeros((n, n_actions, d))
    out[np.arange(n), actions] = X
    return out.reshape(n, n_actions * d)


def expected_action_rows(X: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """sum_a probs[i, a] * phi(x_i, a) for every row."""
    n, d = X.shape
    return (probs[:, :, None] * X[:, None, :]).reshape(n, probs.shape[1] * d)


@dataclass(frozen=True, eq=False)
class FeatureMatrixSet:
    Phi: np.ndarray
    PhiNext: np.ndarray
    rewards: np.ndarray
    Phi0: np.ndarray  # (|D0|, A, A*d): phi(s0, a) for every action
    p0: np.ndarray
    gamma: float
    pi0: np.ndarray  # (|D0|, A): evaluation policy at the initial states
    PhiPi: np.ndarray  # (n, A*d): sum_a pi(a|s_i) phi(s_i, a) at the logged states
    actions: np.ndarray

    @property
    def n_actions(self) -> int:
        return self.Phi0.shape[1]

    @property
    def d(self) -> int:
        return self.Phi.shape[1] // self.n_actions

    @property
    def initial_weights(self) -> np.ndarray:
        """c0 = sum_s p0(s) sum_a pi(a|s) phi(s, a); the BRM value is c0 . eta."""
        return np.einsum("s,sa,sap->p", self.p0, self.pi0, self.Phi0)


def build_feature_matrices(dataset: Dataset, policy: PolicySpec, gamma: float | None = None) -> FeatureMatrixSet:
    gamma = dataset.gamma if gamma is None else gamma
    if policy.n_actions != dataset.n_actions:
        raise ConfigurationError("policy and dataset disagree on the number of actions")
    if policy.kind == "softmax" and policy.weights.shape[1] != dataset.d:
        raise ConfigurationError("policy weights do not match the feature dimension")
    A = dataset.n_actions
    Phi = state_action_rows(dataset.states, dataset.actions, A)
    PhiNext = expected_action_rows(dataset.next_states, policy.action_probs(dataset.next_states))
    X0 = dataset.initial_states
    m0, d = X0.shape
    Phi0 = np.zeros((m0, A, A * d))
    for a in range(A):
        Phi0[:, a, a * d : (a + 1) * d] = X0
    p0 = np.full(m0, 1.0 / m0)
    PhiPi = expected_action_rows(dataset.states, policy.action_probs(dataset.states))
    return FeatureMatrixSet(Phi, PhiNext, dataset.rewards.copy(), Phi0, p0, float(gamma),
                            policy.action_probs(X0), PhiPi, dataset.actions.copy())


def pairwise_sigma(dataset_or_features, p: float = 1, max_features: int = SIGMA_MAX_FEATURES,
                   seed: int = 0) -> float:
    """Root mean squared pairwise p-norm distance between state features.

    Features are subsampled (seeded, without replacement) to at most
    ``max_features`` rows before the O(M^2) pass.
    """
    if isinstance(dataset_or_features, Dataset):
        X = dataset_or_features.states
    else:
        X = np.atleast_2d(np.asarray(dataset_or_features, dtype=np.float64))
    if X.shape[0] < 2:
        raise ValueError("pairwise sigma needs at least two feature vectors")
    if X.shape[0] > max_features:
        rng = np.random.default_rng(seed)
        X = X[np.sort(rng.choice(X.shape[0], max_features, replace=False))]
    return float(np.sqrt(_kernels.mean_sq_pairwise(X, p)))


# ------------------------------------------------------------------- file IO


def _fmt(x: float) -> str:
    return repr(float(x))


def dataset_to_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = dataset.d
    w.writerow(["episode", "t", "action", "reward", "terminal"]
               + [f"s_{k}" for k in range(d)] + [f"sp_{k}" for k in range(d)])
    for i in range(dataset.n):
        w.writerow([int(dataset.episode[i]), int(dataset.t[i]), int(dataset.actions[i]),
                    _fmt(dataset.rewards[i]), int(dataset.terminal[i])]
                   + [_fmt(v) for v in dataset.states[i]]
                   + [_fmt(v) for v in dataset.next_states[i]])
    return buf.getvalue()


def dataset_meta_text(dataset: Dataset) -> str:
    meta = {"N": dataset.n_episodes, "T": dataset.horizon, "A": dataset.n_actions,
            "d": dataset.d, "gamma": _fmt(dataset.gamma)}
    for key, val in dataset.meta.items():
        meta.setdefault(key, val)
    return "".join(f"{k}={v}\n" for k, v in meta.items())


def write_dataset(dataset: Dataset, path) -> tuple[Path, Path]:
    """Write ``<path>`` (CSV) and ``<path minus .csv>.meta``."""
    path = Path(path)
    meta_path = path.with_suffix(".meta")
    path.write_text(dataset_to_csv(dataset))
    meta_path.write_text(dataset_meta_text(dataset))
    return path, meta_path


def read_meta(path) -> dict:
    meta = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, val = line.partition("=")
        meta[key.strip()] = val.strip()
    return meta


def read_dataset(path) -> Dataset:
    path = Path(path)
    meta = read_meta(path.with_suffix(".meta"))
    N, T, A, d = (int(meta[k]) for k in ("N", "T", "A", "d"))
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if len(header) != 5 + 2 * d:
        raise ConfigurationError("CSV header does not match the metadata dimension d")
    arr = np.array(body, dtype=object)
    extra = {k: v for k, v in meta.items() if k not in ("N", "T", "A", "d", "gamma")}
    ds = Dataset.from_arrays(
        states=arr[:, 5 : 5 + d].astype(np.float64),
        actions=arr[:, 2].astype(np.int64),
        rewards=arr[:, 3].astype(np.float64),
        next_states=arr[:, 5 + d :].astype(np.float64),
        n_episodes=N,
        horizon=T,
        n_actions=A,
        gamma=float(meta["gamma"]),
        terminal=arr[:, 4].astype(np.int64).astype(bool),
        meta=extra,
    )
    object.__setattr__(ds, "episode", _frozen(arr[:, 0].astype(np.int64), np.int64))
    if not np.array_equal(ds.t, arr[:, 1].astype(np.int64)):
        raise ConfigurationError("time steps in the CSV are not 0..T-1 per episode")
    return ds
