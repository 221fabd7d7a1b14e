import json
import os

import pytest

import backend.database
from app import build_parser, main
from backend.database import get_run_log
from backend.experiments import EXPERIMENTS
from config.settings import SEED


@pytest.fixture
def run_log(tmp_path, monkeypatch):
    path = str(tmp_path / 'run_log.db')
    monkeypatch.setattr(backend.database, 'RUN_LOG_PATH', path)
    return path


def _run_args(tmp_path):
    return ['run', 'profile', '--n', '5', '--replicas', '10', '--nref', '16',
            '--out', str(tmp_path / 'out'), '--cache-dir', str(tmp_path / 'cache')]


def test_parser():
    args = build_parser().parse_args(['run', 'martingale', '--alpha', '0.5', '--alpha', '1.0', '--k', '12'])
    assert args.experiment == 'martingale'
    assert args.alphas == [0.5, 1.0]
    assert args.k_plus_delta == 12
    assert args.n is None
    assert build_parser().parse_args(['run', 'singularity', '--field-threads', '4']).field_threads == 4
    with pytest.raises(SystemExit):
        build_parser().parse_args(['run', 'nope'])
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_tables_command(tmp_path, capsys):
    assert main(['tables', '--nref', '8', '--cache-dir', str(tmp_path)]) == 0
    assert '[Tables] N=8' in capsys.readouterr().out
    assert any(name.endswith('.bin') for name in os.listdir(tmp_path))


def test_run_then_report(tmp_path, run_log, capsys):
    assert main(_run_args(tmp_path)) in (0, 1)
    out = capsys.readouterr().out
    assert 'profile_sup_gap' in out

    report = tmp_path / 'out' / f'profile_n5_s{SEED}' / 'report.json'
    data = json.loads(report.read_text())
    assert main(['report', str(report)]) == (0 if data['passed'] else 1)
    assert main(['report', '--limit', '5']) == 0
    assert 'profile' in capsys.readouterr().out


def test_library_errors_exit_with_two(tmp_path, run_log):
    assert main(_run_args(tmp_path) + ['--replicas', '0']) == 2
    assert main(_run_args(tmp_path) + ['--n', '0']) == 2


def test_crashes_exit_with_two_and_are_logged(tmp_path, run_log, monkeypatch):
    def broken(ctx):
        raise IndexError("vertex out of range")

    monkeypatch.setitem(EXPERIMENTS, 'profile', broken)
    assert main(_run_args(tmp_path)) == 2
    row, = get_run_log(path=run_log)
    assert row['status'] == 'error'
    assert row['error_message'].startswith('IndexError')
