import math
import os

import pytest

from backend.core_field import common_ancestor_depth, depth, leftmost
from backend.experiments import DEFAULTS, EXPERIMENTS, MIN_DEPTH, leaf_ball
from backend.harness import ExperimentConfig, run

QUICK = {
    'tables_selftest': (4, 2000),
    'delta_scan': (4, 1),
    'coupling': (4, 100),
    'fixation': (4, 20),
    'tails': (8, 200),
    'local_limit': (8, 20),
    'plus_delta': (8, 50),
    'covariance': (6, 200),
    'singularity': (6, 100),
    'profile': (6, 20),
}
SLOW = {
    'minimum': (6, 500),
    'maximum': (6, 500),
    'martingale': (6, 10),
    'mean': (8, 20),
}

# checks with no sampling error behind them, so they pass at smoke sizes
EXACT_CHECKS = {
    'tables_selftest': {'s1_closed_form', 'recursion_residual', 'a_zero_exact'},
}


def _run(tmp_path, experiment, n, replicas):
    config = ExperimentConfig(experiment, n=n, replicas=replicas, n_ref=16, n_spine=8, k_plus_delta=3,
                              output_dir=str(tmp_path / 'out'), cache_dir=str(tmp_path / 'cache'))
    return run(config, record=False)


def test_every_experiment_has_a_smoke_size():
    assert set(QUICK) | set(SLOW) == set(EXPERIMENTS)
    assert set(MIN_DEPTH) == set(EXPERIMENTS)
    for name, (n, _) in {**QUICK, **SLOW, **DEFAULTS}.items():
        assert n >= MIN_DEPTH[name], name


@pytest.mark.parametrize('experiment', sorted(QUICK))
def test_quick_experiments_run(tmp_path, experiment):
    report = _run(tmp_path, experiment, *QUICK[experiment])
    assert report.status == 'success'
    assert report.artifacts and all(os.path.exists(p) for p in report.artifacts)
    assert 'p_inf_cauchy_gap' in report.certificates
    assert report.passed == all(c.passed for c in report.checks)
    assert not any(math.isnan(c.statistic) for c in report.checks)
    failed = {c.name for c in report.checks if not c.passed}
    assert not failed & EXACT_CHECKS.get(experiment, set())


@pytest.mark.slow
@pytest.mark.parametrize('experiment', sorted(SLOW))
def test_slow_experiments_run(tmp_path, experiment):
    report = _run(tmp_path, experiment, *SLOW[experiment])
    assert report.status == 'success'
    assert report.checks
    assert report.passed == all(c.passed for c in report.checks)


@pytest.mark.slow
@pytest.mark.parametrize('experiment', sorted(EXPERIMENTS))
def test_reference_runs_pass_their_checks(tmp_path, experiment):
    config = ExperimentConfig(experiment, budget_seconds=math.inf,
                              output_dir=str(tmp_path / 'out'), cache_dir=str(tmp_path / 'cache'))
    report = run(config, record=False)
    failed = [(c.name, c.statistic, c.threshold) for c in report.checks if not c.passed]
    assert not failed


def test_selftest_exact_checks(tmp_path):
    report = _run(tmp_path, 'tables_selftest', 4, 2000)
    checks = {c.name: c for c in report.checks}
    assert checks['s1_closed_form'].passed
    assert checks['recursion_residual'].passed
    assert checks['a_zero_exact'].statistic == 0.0


def test_plus_delta_records_its_k_gap(tmp_path):
    report = _run(tmp_path, 'plus_delta', 8, 50)
    assert 'plus_delta_k_gap[0]' in report.certificates
    assert report.certificates['plus_delta_k_gap[0]'] >= 0.0


@pytest.mark.parametrize('n', [4, 8, 12])
def test_leaf_ball(n):
    x = leftmost(n)
    ball = leaf_ball(n)
    assert x in ball
    assert len(ball) == len(set(ball))
    for v in ball:
        assert n + depth(v) - 2 * common_ancestor_depth(x, v) <= 4
    assert leaf_ball(n, radius=0) == [x]
