"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs once per backend to warm up (numba compiles on first call)
and is then timed; results of the two backends are checked for agreement.
"""
import argparse
import time

import numpy as np

from ope_dope import _kernels


def _time(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    N, T, d, A = 500, 50, 3, 2
    n = N * T
    X = rng.normal(size=(n, d))
    logits = X @ rng.normal(size=(d, A))
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.uniform(0.5, 1.5, size=(N, T))
    rho = np.cumprod(u, axis=1)
    g = rng.normal(size=(N, T))
    disc = 0.95 ** np.arange(T)
    Xs = rng.normal(size=(4000, d))
    return {
        "mean_sq_pairwise (4000 x 3, p=1)": lambda: _kernels.mean_sq_pairwise(Xs, 1),
        "cumulative_ratios (500 x 50)": lambda: _kernels.cumulative_ratios(u),
        "ratio_adjoint (500 x 50)": lambda: _kernels.ratio_adjoint(u, rho, g),
        "softmax_hessian (25000 x 3, A=2)": lambda: _kernels.softmax_hessian(X, probs),
        "per_decision_sum (500 x 50)": lambda: _kernels.per_decision_sum(rho, g, disc),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    fns = cases(rng)
    print(f"{'kernel':40s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}")
    previous = _kernels.get_backend()
    try:
        for name, fn in fns.items():
            timings, outputs = {}, {}
            for backend in ("numpy", "numba"):
                _kernels.set_backend(backend)
                outputs[backend] = fn()
                timings[backend] = _time(fn, args.repeat)
            if not np.allclose(outputs["numpy"], outputs["numba"], rtol=1e-10, atol=1e-12):
                raise SystemExit(f"backends disagree on {name}")
            t_np, t_nb = timings["numpy"], timings["numba"]
            print(f"{name:40s} {1e3 * t_np:11.3f} {1e3 * t_nb:11.3f} {t_np / t_nb:7.1f}x")
    finally:
        _kernels.set_backend(previous)


if __name__ == "__main__":
    main()
