"""Data-generating environments: Continuous Gridworld and small tabular chains."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .features import get_feature_map
from .policies import PolicySpec, epsilon_greedy, softmax_policy

# Gridworld dynamics are fixed constants of the domain, not configuration.
GRID_START = (1.0, 1.0)
GRID_A0_STEP = (0.2, 0.45)
GRID_A1_STEP = (0.3, 0.5)
GRID_A1_RESET_PROB = 0.05
GRID_REWARD_WEIGHTS = (1.0, 0.5)

GRIDWORLD_DEFAULTS = dict(n_episodes=500, horizon=50, gamma=0.95, behavior_epsilon=0.05)


def _grid_transition(states: np.ndarray, actions: np.ndarray, u: np.ndarray):
    states = np.asarray(states, dtype=np.float64)
    step = np.where((actions == 0)[:, None], np.array(GRID_A0_STEP), np.array(GRID_A1_STEP))
    nxt = states + step
    reset = (actions == 1) & (u < GRID_A1_RESET_PROB)
    nxt[reset] = GRID_START
    reward = GRID_REWARD_WEIGHTS[0] * nxt[:, 0] + GRID_REWARD_WEIGHTS[1] * nxt[:, 1]
    return nxt, reward


def gridworld_step(state, action: int, rng: np.random.Generator):
    """One Gridworld transition; returns ``(next_state, reward)``.

    Action 0 moves by (0.2, 0.45).  Action 1 moves by (0.3, 0.5) with
    probability 0.95 and otherwise resets to (1, 1).  The reward is
    x' + 0.5 y' of the realised successor.  One uniform is drawn from
    ``rng`` per call regardless of the action.
    """
    if action not in (0, 1):
        raise ValueError("gridworld actions are 0 or 1")
    u = rng.random()
    nxt, reward = _grid_transition(np.asarray(state, dtype=np.float64)[None, :],
                                   np.array([action]), np.array([u]))
    return nxt[0], float(reward[0])


@dataclass(frozen=True)
class Gridworld:
    feature_map: str = "affine"
    name: str = "gridworld"
    n_actions: int = 2

    def reset(self, u: np.ndarray) -> np.ndarray:
        return np.tile(np.array(GRID_START), (u.shape[0], 1))

    def step(self, states, actions, u):
        return _grid_transition(states, actions, u)

    def features(self, states: np.ndarray) -> np.ndarray:
        return get_feature_map(self.feature_map)(states)


# Fixed evaluation policy for the Gridworld: a low-temperature softmax that
# takes the fast-but-risky action a1 while x + y is small and the safe a0
# once a reset would be costly.  Weights act on affine features (1, x, y).
GRID_POLICY_SWITCH = 12.0
GRID_POLICY_TEMPERATURE = 0.01


def gridworld_evaluation_policy(feature_map: str = "affine",
                                temperature: float = GRID_POLICY_TEMPERATURE) -> PolicySpec:
    if feature_map == "affine":
        W = np.array([[0.0, 0.0, 0.0], [GRID_POLICY_SWITCH, -1.0, -1.0]])
        return softmax_policy(W, temperature)
    if feature_map == "poly2":
        W = np.zeros((2, 6))
        W[1, :3] = [GRID_POLICY_SWITCH, -1.0, -1.0]
        return softmax_policy(W, temperature)
    if feature_map == "raw":
        W = np.array([[0.0, 0.0], [-1.0, -1.0]])
        return softmax_policy(W, temperature, bias=[0.0, GRID_POLICY_SWITCH])
    raise ValueError(f"no Gridworld evaluation policy for feature map {feature_map!r}")


@dataclass(frozen=True, eq=False)
class ChainMdp:
    """Small tabular MDP with one-hot state features.

    P[s, a, s'] transition probabilities, R[s, a, s'] rewards.
    """

    P: np.ndarray
    R: np.ndarray
    gamma: float
    p0: np.ndarray
    name: str = "chain"

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("P must have shape (S, A, S)")
        if np.any(P < 0) or not np.allclose(P.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("each P[s, a, :] must be a probability vector")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", np.broadcast_to(np.asarray(self.R, dtype=np.float64), P.shape).copy())
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=np.float64))

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def reset(self, u: np.ndarray) -> np.ndarray:
        cdf = np.cumsum(self.p0)
        return np.minimum(np.searchsorted(cdf, u, side="right"), self.n_states - 1)

    def step(self, states, actions, u):
        states = np.asarray(states, dtype=np.int64)
        cdf = np.cumsum(self.P[states, actions], axis=1)
        nxt = np.minimum((u[:, None] >= cdf).sum(axis=1), self.n_states - 1)
        return nxt, self.R[states, actions, nxt]

    def features(self, states: np.ndarray) -> np.ndarray:
        return get_feature_map("onehot", self.n_states)(states)


def random_chain(n_states: int, n_actions: int = 2, gamma: float = 0.9, seed: int = 0,
                 deterministic: bool = False) -> ChainMdp:
    rng = np.random.default_rng(seed)
    if deterministic:
        P = np.zeros((n_states, n_actions, n_states))
        targets = rng.integers(0, n_states, size=(n_states, n_actions))
        P[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], targets] = 1.0
    else:
        P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.normal(size=(n_states, n_actions, n_states))
    p0 = rng.dirichlet(np.ones(n_states))
    return ChainMdp(P, R, gamma, p0)


def chain_evaluation_policy(n_states: int, n_actions: int = 2, seed: int = 0,
                            temperature: float = 1.0) -> PolicySpec:
    """Seeded softmax policy over one-hot chain states."""
    rng = np.random.default_rng([seed, 1])
    return softmax_policy(rng.normal(size=(n_actions, n_states)), temperature)


def tabular_policy_probs(env: ChainMdp, policy: PolicySpec) -> np.ndarray:
    return policy.action_probs(env.features(np.arange(env.n_states)))


def chain_exact_value(mdp: ChainMdp, policy) -> tuple[float, np.ndarray]:
    """Exact policy value p0 . v and per-state v from (I - gamma P_pi) v = r_pi.

    ``policy`` is either a PolicySpec over one-hot features or an (S, A)
    probability table.
    """
    if not 0.0 <= mdp.gamma < 1.0:
        raise ValueError("exact evaluation needs gamma < 1")
    pi = tabular_policy_probs(mdp, policy) if isinstance(policy, PolicySpec) else np.asarray(policy)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    r_pi = np.einsum("sa,sat,sat->s", pi, mdp.P, mdp.R)
    S = mdp.n_states
    v = np.linalg.solve(np.eye(S) - mdp.gamma * P_pi, r_pi)
    return float(mdp.p0 @ v), v


# ------------------------------------------------------------------ rollouts


def episode_streams(seed: int, n_episodes: int) -> list[np.random.Generator]:
    """One counter-based (Philox) generator per episode, independent of order."""
    children = np.random.SeedSequence(seed).spawn(n_episodes)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def _sample_actions(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


def generate_dataset(env, behavior: PolicySpec, n_episodes: int, horizon: int, seed: int,
                     gamma: float = 0.95) -> Dataset:
    """Roll out ``behavior`` for N episodes of exactly T steps.

    Every episode draws its uniforms from its own substream, so the result
    depends only on ``seed`` (and not on the order episodes are simulated).
    """
    if n_episodes < 1 or horizon < 1:
        raise ValueError("N and T must be >= 1")
    streams = episode_streams(seed, n_episodes)
    U = np.stack([g.random((horizon, 3)) for g in streams])  # (N, T, 3)
    s = env.reset(U[:, 0, 0])
    raw_states, raw_next, actions, rewards = [], [], [], []
    for t in range(horizon):
        X = env.features(s)
        a = _sample_actions(behavior.action_probs(X), U[:, t, 1])
        nxt, r = env.step(s, a, U[:, t, 2])
        raw_states.append(s)
        raw_next.append(nxt)
        actions.append(a)
        rewards.append(r)
        s = nxt
    # (T, N, ...) -> episode-major rows
    states = np.stack(raw_states, axis=1).reshape((n_episodes * horizon,) + np.shape(raw_states[0])[1:])
    nexts = np.stack(raw_next, axis=1).reshape(states.shape)
    return Dataset.from_arrays(
        states=env.features(states),
        actions=np.stack(actions, axis=1).reshape(-1),
        rewards=np.stack(rewards, axis=1).reshape(-1).astype(np.float64),
        next_states=env.features(nexts),
        n_episodes=n_episodes,
        horizon=horizon,
        n_actions=env.n_actions,
        gamma=gamma,
        meta={"environment": env.name, "seed": seed,
              "feature_map": getattr(env, "feature_map", "onehot")},
    )


def gridworld_dataset(seed: int, n_episodes: int = 500, horizon: int = 50, gamma: float = 0.95,
                      behavior_epsilon: float = 0.05, feature_map: str = "affine",
                      temperature: float = GRID_POLICY_TEMPERATURE):
    """Gridworld dataset from the epsilon-greedy version of the fixed evaluation policy.

    Returns ``(dataset, evaluation_policy)``.
    """
    env = Gridworld(feature_map=feature_map)
    pi = gridworld_evaluation_policy(feature_map, temperature)
    ds = generate_dataset(env, epsilon_greedy(pi, behavior_epsilon), n_episodes, horizon, seed, gamma)
    return ds, pi
