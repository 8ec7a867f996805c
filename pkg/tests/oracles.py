"""Independent reference computations shared by the test modules."""
import numpy as np

from ope_dope.envs import generate_dataset, random_chain
from ope_dope.estimators import EstimatorSettings
from ope_dope.influence import fit_method
from ope_dope.policies import softmax_policy

# Tight behaviour-model tolerance so refit differences are not solver noise.
TIGHT = EstimatorSettings(behavior_tol=1e-15)


def chain_instance(seed=0, n_states=4, n_episodes=5, horizon=6, gamma=0.9, jitter=0.0):
    """Small chain-MDP dataset with softmax evaluation and behaviour policies.

    ``jitter`` adds seeded noise to the one-hot features so that feature
    derivatives are exercised away from the lattice.
    """
    mdp = random_chain(n_states, 2, gamma, seed=seed)
    rng = np.random.default_rng(seed + 100)
    pi = softmax_policy(rng.normal(size=(2, n_states)), 1.0)
    beh = softmax_policy(rng.normal(size=(2, n_states)), 1.0)
    ds = generate_dataset(mdp, beh, n_episodes, horizon, seed=seed, gamma=gamma)
    if jitter:
        ds = ds.with_states(ds.states + jitter * rng.normal(size=ds.states.shape))
    return ds, pi


def refit_value(ds, method, pi, target, i, j, h, settings=TIGHT):
    if target == "rewards":
        r = ds.rewards.copy()
        r[i] += h
        pert = ds.with_rewards(r)
    else:
        X = ds.states.copy()
        X[i, j] += h
        pert = ds.with_states(X)
    return fit_method(pert, method, pi, settings).value


def refit_gradient(ds, method, pi, target, h=1e-5, settings=TIGHT):
    """Central differences of the refitted value for every (transition, coordinate)."""
    Q = 1 if target == "rewards" else ds.d
    out = np.zeros((ds.n, Q))
    for i in range(ds.n):
        for j in range(Q):
            out[i, j] = (refit_value(ds, method, pi, target, i, j, h, settings)
                         - refit_value(ds, method, pi, target, i, j, -h, settings)) / (2 * h)
    return out


def max_relative_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def numeric_gradient(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def iqm_oracle(values):
    """IQM by explicit sorting and hand-rolled linear-interpolation quartiles."""
    x = sorted(float(v) for v in values)
    n = len(x)

    def pct(q):
        pos = (n - 1) * q
        lo = int(np.floor(pos))
        hi = min(lo + 1, n - 1)
        return x[lo] + (pos - lo) * (x[hi] - x[lo])

    lo, hi = pct(0.25), pct(0.75)
    kept = [v for v in x if lo <= v <= hi]
    return sum(kept) / len(kept) if kept else x[n // 2] if n % 2 else 0.5 * (x[n // 2 - 1] + x[n // 2])
