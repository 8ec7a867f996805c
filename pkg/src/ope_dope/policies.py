"""Evaluation/behaviour policies defined on state features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class PolicySpec:
    """A stochastic policy over ``n_actions`` actions acting on features.

    kinds
    -----
    ``softmax``
        pi(a|xi) = softmax_a((W xi + b)_a / temperature).
    ``epsilon-greedy``
        (1 - epsilon) * base(a|xi) + epsilon / A.  With a deterministic (or
        near-deterministic low-temperature) base this is the usual
        epsilon-greedy policy.
    ``table``
        Row ``argmax(xi)`` of an explicit S x A probability table; meant for
        one-hot features of tabular MDPs.  Its feature-Jacobian is zero.
    """

    kind: str
    n_actions: int
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    temperature: float = 1.0
    epsilon: float = 0.0
    base: "PolicySpec | None" = None
    table: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "softmax":
            if self.weights is None or self.weights.shape[0] != self.n_actions:
                raise ValueError("softmax policy needs an (A, d) weight matrix")
            if self.temperature <= 0:
                raise ValueError("temperature must be positive")
        elif self.kind == "epsilon-greedy":
            if self.base is None or not 0.0 <= self.epsilon <= 1.0:
                raise ValueError("epsilon-greedy needs a base policy and epsilon in [0, 1]")
        elif self.kind == "table":
            tab = self.table
            if tab is None or tab.shape[1] != self.n_actions:
                raise ValueError("table policy needs an (S, A) probability table")
            if np.any(tab < 0) or not np.allclose(tab.sum(axis=1), 1.0, atol=1e-12):
                raise ValueError("table rows must be probability vectors")
        else:
            raise ValueError(f"unknown policy kind {self.kind!r}")

    def _logits(self, X: np.ndarray) -> np.ndarray:
        z = X @ self.weights.T
        if self.bias is not None:
            z = z + self.bias
        return z / self.temperature

    def action_probs(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.kind == "softmax":
            return softmax(self._logits(X))
        if self.kind == "epsilon-greedy":
            return (1.0 - self.epsilon) * self.base.action_probs(X) + self.epsilon / self.n_actions
        return self.table[np.argmax(X, axis=1)]

    def action_jacobian(self, X: np.ndarray) -> np.ndarray:
        """d pi(a|xi) / d xi for every row: array of shape (n, A, d)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.kind == "softmax":
            P = softmax(self._logits(X))
            W = self.weights / self.temperature
            mean_w = P @ W
            return P[:, :, None] * (W[None, :, :] - mean_w[:, None, :])
        if self.kind == "epsilon-greedy":
            return (1.0 - self.epsilon) * self.base.action_jacobian(X)
        return np.zeros((X.shape[0], self.n_actions, X.shape[1]))

    def greedy_action(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.action_probs(X), axis=1)


def softmax_policy(weights, temperature: float = 1.0, bias=None) -> PolicySpec:
    W = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    b = None if bias is None else np.asarray(bias, dtype=np.float64)
    return PolicySpec("softmax", W.shape[0], weights=W, bias=b, temperature=float(temperature))


def epsilon_greedy(base: PolicySpec, epsilon: float) -> PolicySpec:
    return PolicySpec("epsilon-greedy", base.n_actions, epsilon=float(epsilon), base=base)


def table_policy(table) -> PolicySpec:
    tab = np.atleast_2d(np.asarray(table, dtype=np.float64))
    return PolicySpec("table", tab.shape[1], table=tab)
