"""State feature maps xi(s) selected by name in experiment configs."""
from __future__ import annotations

from typing import Callable

import numpy as np

FeatureMap = Callable[[np.ndarray], np.ndarray]


def raw_features(states: np.ndarray) -> np.ndarray:
    return np.asarray(states, dtype=np.float64).copy()


def affine_features(states: np.ndarray) -> np.ndarray:
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    return np.hstack([np.ones((states.shape[0], 1)), states])


def poly2_features(states: np.ndarray) -> np.ndarray:
    """Constant, linear and all degree-2 monomials (upper triangle)."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    k = states.shape[1]
    iu, ju = np.triu_indices(k)
    quad = states[:, iu] * states[:, ju]
    return np.hstack([np.ones((states.shape[0], 1)), states, quad])


def onehot_features(n_states: int) -> FeatureMap:
    def encode(states: np.ndarray) -> np.ndarray:
        idx = np.asarray(states, dtype=np.int64).reshape(-1)
        if np.any(idx < 0) or np.any(idx >= n_states):
            raise IndexError("state index out of range for one-hot features")
        out = np.zeros((idx.size, n_states))
        out[np.arange(idx.size), idx] = 1.0
        return out

    return encode


_NAMED = {
    "raw": raw_features,
    "affine": affine_features,
    "poly2": poly2_features,
}


def get_feature_map(name: str, n_states: int | None = None) -> FeatureMap:
    if name == "onehot":
        if n_states is None:
            raise ValueError("onehot features need n_states")
        return onehot_features(n_states)
    try:
        return _NAMED[name]
    except KeyError:
        raise ValueError(f"unknown feature map {name!r}") from None
