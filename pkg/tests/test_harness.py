import csv
import math
import os

import numpy as np
import pytest

import backend.database
from backend.database import get_run_log
from backend.errors import BudgetExceededError, ConfigInvalidError
from backend.experiments import DEFAULTS, EXPERIMENTS, MIN_DEPTH, CsvTable
from backend.harness import (
    ExperimentConfig, ExperimentReport, build_config, emit_csv, format_value, load_config_file,
    read_report, run, write_report,
)
from backend.stats import TestReport


@pytest.fixture
def run_log(tmp_path, monkeypatch):
    path = str(tmp_path / 'run_log.db')
    monkeypatch.setattr(backend.database, 'RUN_LOG_PATH', path)
    return path


def _small(tmp_path, name='out', **overrides):
    values = dict(experiment='profile', n=6, replicas=20, n_ref=16, n_spine=8,
                  output_dir=str(tmp_path / name), cache_dir=str(tmp_path / 'cache'))
    values.update(overrides)
    return ExperimentConfig(**values)


def test_defaults_come_from_the_experiment():
    config = ExperimentConfig('profile')
    assert (config.n, config.replicas) == DEFAULTS['profile']
    assert ExperimentConfig('profile', n=9).n == 9
    assert ExperimentConfig('tails', alphas=[0.5]).alphas == (0.5,)


@pytest.mark.parametrize('overrides', [
    {'experiment': 'nope'},
    {'replicas': 0},
    {'n': -1},
    {'dx': 0.05},
    {'n_ref': 1},
    {'k_plus_delta': 0},
    {'delta': 1.0},
    {'threads': 0},
    {'field_threads': 0},
    {'alphas': (2.0,)},
    {'n': 25},
    {'n': 20, 'memory_budget_mb': 1},
])
def test_invalid_configs(overrides):
    values = dict(experiment='profile')
    values.update(overrides)
    with pytest.raises(ConfigInvalidError):
        ExperimentConfig(**values).validate()


@pytest.mark.parametrize('experiment, n', [
    ('profile', 0),
    ('minimum', 0),
    ('maximum', 2),
    ('tails', 1),
    ('coupling', 1),
    ('coupling', 2),
    ('fixation', 1),
    ('local_limit', 5),
])
def test_too_shallow_for_the_experiment(experiment, n):
    with pytest.raises(ConfigInvalidError, match=experiment):
        ExperimentConfig(experiment, n=n).validate()
    least = MIN_DEPTH[experiment]
    assert ExperimentConfig(experiment, n=least).validate().n == least


def test_deep_trees_are_fine_without_full_fields():
    assert ExperimentConfig('tables_selftest', n=30).validate().n == 30


def test_echo_and_digest():
    config = ExperimentConfig('profile', alphas=(0.5,))
    echo = config.echo()
    assert 'output_dir' not in echo and 'threads' not in echo
    assert 'field_threads' not in echo
    assert echo['alphas'] == [0.5]
    assert config.digest() == ExperimentConfig('profile', alphas=(0.5,), threads=4).digest()
    assert config.digest() == ExperimentConfig('profile', alphas=(0.5,), field_threads=4).digest()
    assert config.digest() != ExperimentConfig('profile', alphas=(0.5,), seed=1).digest()
    assert config.table_depth == max(config.n_ref, config.n, config.n_spine)


def test_config_file(tmp_path):
    path = tmp_path / 'run.ini'
    path.write_text("[experiment]\nexperiment = martingale\nn = 10\nalphas = 0.5, 1.0\ndx = 0.01\n")
    values = load_config_file(str(path))
    assert values == {'experiment': 'martingale', 'n': 10, 'alphas': (0.5, 1.0), 'dx': 0.01}
    config = build_config(values, n=12, seed=None)
    assert config.n == 12 and config.alphas == (0.5, 1.0)


@pytest.mark.parametrize('text', [
    "[experiment]\nwidth = 3\n",
    "[experiment]\nn = six\n",
    "[other]\nn = 3\n",
])
def test_bad_config_files(tmp_path, text):
    path = tmp_path / 'bad.ini'
    path.write_text(text)
    with pytest.raises(ConfigInvalidError):
        load_config_file(str(path))


def test_missing_config_file_and_experiment(tmp_path):
    with pytest.raises(ConfigInvalidError):
        load_config_file(str(tmp_path / 'missing.ini'))
    with pytest.raises(ConfigInvalidError):
        build_config({}, n=4)


def test_format_value():
    assert format_value(1.0 / 3.0) == '0.333333333'
    assert format_value(np.float64(2.5e-12)) == '2.5e-12'
    assert format_value(None) == ''
    assert format_value(np.int64(3)) == '3'
    assert format_value(True) == 'True'
    assert format_value('hard_wall') == 'hard_wall'


def test_emit_csv(tmp_path):
    tables = {'b': CsvTable(['k', 'value'], [[1, 0.5], [2, None]]), 'a': CsvTable(['x'], [])}
    paths = emit_csv(tables, str(tmp_path / 'csv'))
    assert [os.path.basename(p) for p in paths] == ['a.csv', 'b.csv']
    with open(paths[1], newline='') as fh:
        rows = list(csv.reader(fh))
    assert rows == [['k', 'value'], ['1', '0.5'], ['2', '']]
    assert not os.path.exists(paths[1] + '.tmp')


def test_report_round_trip(tmp_path):
    report = ExperimentReport(
        config={'experiment': 'profile', 'seed': 1},
        checks=[TestReport('a', 1.0, 2.0)],
        certificates={'gap': math.inf, 'value': np.float64(0.5), 'ok': np.bool_(True)},
        artifacts=[],
    )
    data = read_report(write_report(report, str(tmp_path)))
    assert data['passed'] is True
    assert data['certificates'] == {'gap': 'inf', 'value': 0.5, 'ok': True}
    assert data['checks'][0]['name'] == 'a'


def test_run_profile_end_to_end(tmp_path, run_log):
    report = run(_small(tmp_path))
    assert report.status == 'success'
    assert {c.name for c in report.checks} == {'profile_sup_gap', 'leaf_mean_minus_m_nprime'}
    assert 'p_inf_cauchy_gap' in report.certificates
    assert all(os.path.exists(p) for p in report.artifacts)
    data = read_report(os.path.join(_small(tmp_path).run_dir, 'report.json'))
    assert data['config']['experiment'] == 'profile'

    row, = get_run_log(path=run_log)
    assert row['status'] == ('success' if report.passed else 'failed')
    assert row['checks_passed'] + row['checks_failed'] == 2


def test_runs_are_reproducible(tmp_path):
    first = run(_small(tmp_path, 'one'), record=False)
    second = run(_small(tmp_path, 'two'), record=False)
    with open(first.artifacts[0]) as a, open(second.artifacts[0]) as b:
        assert a.read() == b.read()
    threaded = run(_small(tmp_path, 'three', threads=3), record=False)
    with open(first.artifacts[0]) as a, open(threaded.artifacts[0]) as b:
        assert a.read() == b.read()


def test_budget_is_enforced(tmp_path, run_log):
    with pytest.raises(BudgetExceededError):
        run(_small(tmp_path, budget_seconds=0.0))
    row, = get_run_log(path=run_log)
    assert row['status'] == 'error'
    assert 'budget' in row['error_message']


def test_unexpected_failures_are_logged_as_errors(tmp_path, run_log, monkeypatch):
    def broken(ctx):
        raise RuntimeError("lost the grid")

    monkeypatch.setitem(EXPERIMENTS, 'profile', broken)
    with pytest.raises(RuntimeError):
        run(_small(tmp_path))
    row, = get_run_log(path=run_log)
    assert row['status'] == 'error'
    assert row['error_message'] == 'RuntimeError: lost the grid'
