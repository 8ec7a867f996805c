"""Command line entry point: generate, estimate, attack, sweep, report."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .attack import ATTACKS, AttackConfig, run_attack
from .data import pairwise_sigma, read_dataset, write_dataset
from .estimators import METHODS, estimate
from .harness import (
    ExperimentConfig,
    config_from_meta,
    make_dataset,
    policy_from_meta,
    read_results,
    report_iqm,
    report_to_csv,
    results_to_csv,
    run_sweep,
    ResultRow,
    _norm_value,
)
from .influence import TARGETS


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_toml(args.config) if args.config else ExperimentConfig()
    if getattr(args, "env", None):
        cfg = replace(cfg, environment=args.env)
    return cfg


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    if args.episodes:
        cfg = replace(cfg, n_episodes=args.episodes)
    ds = make_dataset(cfg, args.seed)
    out = Path(args.out or "dataset.csv")
    csv_path, meta_path = write_dataset(ds, out)
    print(f"wrote {csv_path} and {meta_path} ({ds.n} transitions)")
    return 0


def _dataset_and_policy(args):
    ds = read_dataset(args.data)
    return ds, policy_from_meta({k: str(v) for k, v in ds.meta.items()})


def cmd_estimate(args) -> int:
    ds, pi = _dataset_and_policy(args)
    cfg = config_from_meta(ds.meta, _load_config(args))
    for method in args.method:
        est = estimate(ds, method, pi, cfg.settings)
        print(f"{method},{est.value!r}")
    return 0


def cmd_attack(args) -> int:
    cfg = _load_config(args)
    if args.data:
        ds, pi = _dataset_and_policy(args)
        cfg = config_from_meta(ds.meta, cfg)
    else:
        ds = make_dataset(cfg, args.seed)
        pi = policy_from_meta(ds.meta)
    p = _norm_value(args.p) if args.p is not None else cfg.p
    direction = args.direction if args.direction is not None else cfg.direction
    alpha = args.alpha if args.alpha is not None else cfg.alphas[0]
    sigma = pairwise_sigma(ds, p=p, max_features=cfg.sigma_max_features, seed=args.seed)
    eps = args.frac * sigma
    acfg = AttackConfig(epsilon=eps, alpha=alpha, p=p, direction=direction,
                        resolution=cfg.resolution, seed=args.seed, iterations=cfg.iterations)
    res = run_attack(args.attack, ds, args.method, args.target or cfg.target, acfg, pi, cfg.settings)
    row = ResultRow(cfg.environment, args.method, args.attack, args.frac, eps, alpha, p, args.seed, 0,
                    res.v_org, res.v_pert, res.pct_error, res.beta)
    _emit(results_to_csv([row]), args.out)
    return 0


def cmd_sweep(args) -> int:
    if not args.config:
        raise SystemExit("sweep needs --config")
    cfg = _load_config(args)
    rows = run_sweep(cfg, workers=args.workers)
    _emit(results_to_csv(rows), args.out or "results.csv")
    failed = sum(1 for r in rows if r.error)
    print(f"{len(rows)} rows written ({failed} failed cells)", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    rows = read_results(args.results)
    report = report_iqm(rows, B=args.bootstrap, seed=args.seed, absolute=args.absolute)
    _emit(report_to_csv(report), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ope-dope", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="experiment config (TOML)")
        p.add_argument("--out", help="output path (default: stdout or a fixed file name)")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("generate", help="roll out an environment into dataset.csv + dataset.meta")
    common(g)
    g.add_argument("--env", choices=("gridworld", "chain"))
    g.add_argument("--episodes", type=int)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("estimate", help="estimate the evaluation policy's value from a dataset")
    common(e)
    e.add_argument("--data", required=True, help="dataset CSV written by `generate`")
    e.add_argument("--method", nargs="+", default=list(METHODS), choices=METHODS)
    e.set_defaults(func=cmd_estimate)

    a = sub.add_parser("attack", help="run one attack cell and print its result row")
    common(a)
    a.add_argument("--data", help="dataset CSV; generated from --config/--seed if omitted")
    a.add_argument("--env", choices=("gridworld", "chain"))
    a.add_argument("--method", default="brm", choices=METHODS)
    a.add_argument("--attack", default="dope", choices=ATTACKS)
    a.add_argument("--target", choices=TARGETS)
    a.add_argument("--frac", type=float, default=0.5, help="budget as a fraction of sigma")
    a.add_argument("--alpha", type=float)
    a.add_argument("--p", help="1, 2 or inf")
    a.add_argument("--direction", type=int, choices=(1, -1))
    a.set_defaults(func=cmd_attack)

    s = sub.add_parser("sweep", help="run a config's full grid into results.csv")
    common(s, seed=False)
    s.add_argument("--workers", type=int, help="process count (default: OPE_DOPE_THREADS or all CPUs)")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="bootstrap-IQM table from results.csv")
    common(r)
    r.add_argument("results", help="results CSV written by `sweep`")
    r.add_argument("--bootstrap", type=int, default=2000)
    r.add_argument("--absolute", action="store_true", help="summarise |pct_error|")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:
        print(f"ope-dope {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
