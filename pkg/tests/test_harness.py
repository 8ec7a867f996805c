import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ope_dope.data import ConfigurationError, pairwise_sigma
from ope_dope.harness import (
    ExperimentConfig,
    ResultRow,
    _grid,
    bootstrap_iqm,
    iqm,
    make_dataset,
    read_results,
    report_iqm,
    report_to_csv,
    results_to_csv,
    run_cell,
    run_sweep,
    write_results,
)

from oracles import iqm_oracle

SMALL = ExperimentConfig(environment="chain", chain_states=4, behavior_epsilon=0.2, n_episodes=12,
                         horizon=5, gamma=0.9, methods=("brm", "pdis"), attacks=("dope",),
                         fracs=(0.0, 0.2), alphas=(0.1,), p=2.0, direction=1, seeds=(0, 1), trials=3)


# ----------------------------------------------------------------- config


def test_grid_forms():
    assert _grid({"start": 0.0, "stop": 0.51, "step": 0.05}, "f") == tuple(round(0.05 * k, 12) for k in range(11))
    assert _grid({"start": 0.0, "stop": 0.11, "step": 0.02}, "a") == (0.0, 0.02, 0.04, 0.06, 0.08, 0.1)
    assert _grid([0.5, 1], "f") == (0.5, 1.0)
    for bad in ([], {"start": 0, "stop": 1}, {"start": 0, "stop": 1, "step": 0}):
        with pytest.raises(ConfigurationError):
            _grid(bad, "f")


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.fracs[0] == 0.0 and cfg.fracs[-1] == 0.5 and len(cfg.fracs) == 11
    assert cfg.alphas == (0.05,) and len(cfg.seeds) == 10 and cfg.trials == 50
    s = cfg.settings
    assert (s.lambda_q, s.lambda_b, s.epochs, s.clip) == (1e-2, 1e-2, 5000, 0.01)
    assert (cfg.n_episodes, cfg.horizon, cfg.gamma) == (500, 50, 0.95)


def test_config_from_dict_and_toml(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('environment = "chain"\nseeds = 3\np = "inf"\nfracs = {start = 0.0, stop = 0.3, step = 0.1}\n')
    cfg = ExperimentConfig.from_toml(path)
    assert cfg.seeds == (0, 1, 2) and math.isinf(cfg.p) and cfg.fracs == (0.0, 0.1, 0.2)
    with pytest.raises(ConfigurationError, match="unknown config keys"):
        ExperimentConfig.from_dict({"sedes": 3})
    for bad in ({"methods": ["fqe"]}, {"attacks": ["pgd"]}, {"p": 3}, {"alphas": [2.0]},
                {"direction": 0}, {"environment": "hiv"}, {"methods": []}):
        with pytest.raises(ConfigurationError):
            ExperimentConfig.from_dict(bad)


def test_shipped_configs_parse():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.toml"))
    assert files
    for f in files:
        ExperimentConfig.from_toml(f)


# ------------------------------------------------------------------ sweep


def test_row_count_contract():
    cfg = replace(SMALL, methods=("brm",), attacks=("dope",))
    assert len(run_sweep(cfg, workers=1)) == 4
    cfg = replace(cfg, attacks=("random",))
    assert len(run_sweep(cfg, workers=1)) == 4 * 3


def test_zero_frac_rows_have_zero_error():
    cfg = replace(SMALL, attacks=("dope", "random", "random-dope", "fgsm", "projected-dope"))
    rows = run_sweep(cfg, workers=1)
    zero = [r for r in rows if r.frac == 0.0]
    assert zero and all(r.pct_error == 0.0 for r in zero)
    assert not any(r.error for r in rows)


def test_epsilon_is_frac_times_sigma():
    rows = run_sweep(SMALL, workers=1)
    for seed in SMALL.seeds:
        ds = make_dataset(SMALL, seed)
        sigma = pairwise_sigma(ds, p=SMALL.p, max_features=SMALL.sigma_max_features, seed=seed)
        for r in rows:
            if r.seed == seed:
                assert r.epsilon == r.frac * sigma


def test_sweep_byte_identical_and_worker_independent():
    a = results_to_csv(run_sweep(SMALL, workers=1))
    b = results_to_csv(run_sweep(SMALL, workers=1))
    c = results_to_csv(run_sweep(SMALL, workers=2))
    assert a == b == c


def test_threshold_trick_monotone():
    cfg = replace(SMALL, fracs=(0.0, 0.05, 0.1, 0.2, 0.4), attacks=("dope", "random-dope"),
                  methods=("brm", "pdis", "wdr"), direction=-1, p=1.0)
    rows = run_sweep(cfg, workers=1)
    cells = {}
    for r in rows:
        cells.setdefault((r.seed, r.method, r.attack, r.trial), []).append((r.frac, r.pct_error))
    for vals in cells.values():
        errs = [cfg.direction * e for _, e in sorted(vals)]
        assert all(b >= a for a, b in zip(errs, errs[1:]))


def test_failed_cells_are_recorded(monkeypatch):
    import ope_dope.harness as h

    def boom(*a, **k):
        raise RuntimeError("synthetic failure")

    monkeypatch.setattr(h, "run_attack", boom)
    rows = run_cell(SMALL, 0, "brm", "dope")
    assert len(rows) == 2 and all("synthetic failure" in r.error for r in rows)
    assert all(r.pct_error is None for r in rows)


def test_results_round_trip(tmp_path):
    rows = run_sweep(SMALL, workers=1)
    path = write_results(rows, tmp_path / "results.csv")
    back = read_results(path)
    assert results_to_csv(back) == path.read_text()
    assert back[0].pct_error == rows[0].pct_error
    header = path.read_text().splitlines()[0]
    assert header.startswith("environment,method,attack,frac,epsilon,alpha,p,seed,trial,v_org,v_pert,pct_error,beta,wall_time")


# ----------------------------------------------------------------- report


def test_iqm_examples():
    assert iqm([1, 2, 3, 4]) == 2.5
    assert iqm([7.0] * 5) == 7.0
    assert bootstrap_iqm([3.0] * 6, B=1000) == (3.0, 3.0, 3.0)
    assert iqm([1.0, 5.0]) == 3.0
    with pytest.raises(ValueError):
        iqm([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
def test_iqm_matches_oracle(values):
    assert iqm(values) == pytest.approx(iqm_oracle(values), rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.randoms(use_true_random=False))
def test_iqm_order_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert iqm(shuffled) == pytest.approx(iqm(values), abs=1e-9)


def _row(seed, err, method="brm", trial=0):
    return ResultRow("gridworld", method, "dope", 0.5, 1.0, 0.05, 1.0, seed, trial, 1.0, 1.0 + err / 100, err, 1.0)


def test_report_iqm_invariances():
    rng = np.random.default_rng(0)
    rows = [_row(s, float(rng.normal() * 10), m) for s in range(10) for m in ("brm", "wis")]
    base = report_to_csv(report_iqm(rows, B=1000))
    perm = [rows[i] for i in rng.permutation(len(rows))]
    assert report_to_csv(report_iqm(perm, B=1000)) == base
    # duplicating every row leaves per-seed means and hence the IQM unchanged
    assert report_to_csv(report_iqm(rows + rows, B=1000)) == base


def test_report_averages_trials_and_skips_empty(caplog):
    rows = [_row(0, 10.0, trial=0), _row(0, 30.0, trial=1), _row(1, 20.0)]
    bad = replace(_row(0, 0.0, method="wis"), pct_error=None, error="boom")
    out = report_iqm(rows + [bad], B=1000)
    assert len(out) == 1 and out[0].n_seeds == 2 and out[0].iqm == 20.0
    assert "skipped" in caplog.text
    with pytest.raises(ValueError):
        report_iqm(rows, B=10)
    neg = report_iqm([_row(0, -40.0)], B=1000, absolute=True)
    assert neg[0].iqm == 40.0


def test_bootstrap_seeded():
    vals = list(np.random.default_rng(1).normal(size=10))
    assert bootstrap_iqm(vals, 2000, seed=3) == bootstrap_iqm(vals, 2000, seed=3)
    point, lb, ub = bootstrap_iqm(vals, 2000, seed=3)
    assert lb <= point <= ub
