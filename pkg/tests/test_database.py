import sqlite3

import pytest

from backend.database import get_last_successful_run, get_run_log, init_db, log_run_end, log_run_start


@pytest.fixture
def db_path(tmp_path):
    path = str(tmp_path / 'runs' / 'run_log.db')
    init_db(path)
    return path


def test_init_is_idempotent(db_path):
    init_db(db_path)
    assert get_run_log(path=db_path) == []


def test_run_lifecycle(db_path):
    log_id = log_run_start('profile', 'abc123', 7, path=db_path)
    row, = get_run_log(path=db_path)
    assert row['id'] == log_id
    assert row['status'] == 'running'
    assert row['completed_at'] is None

    log_run_end(log_id, status='success', checks_passed=2, checks_failed=0,
                report_path='/tmp/report.json', path=db_path)
    row, = get_run_log(path=db_path)
    assert row['status'] == 'success'
    assert row['checks_passed'] == 2
    assert row['report_path'] == '/tmp/report.json'
    assert row['completed_at'] is not None


def test_log_filters_and_ordering(db_path):
    first = log_run_start('profile', 'a', 1, path=db_path)
    second = log_run_start('minimum', 'b', 1, path=db_path)
    third = log_run_start('profile', 'c', 2, path=db_path)
    log_run_end(first, path=db_path)
    log_run_end(third, status='error', error_message='budget', path=db_path)

    assert [r['id'] for r in get_run_log(path=db_path)] == [third, second, first]
    assert [r['id'] for r in get_run_log(experiment='profile', path=db_path)] == [third, first]
    assert len(get_run_log(limit=1, path=db_path)) == 1
    assert get_last_successful_run('profile', path=db_path)['id'] == first
    assert get_last_successful_run('minimum', path=db_path) is None


def test_old_logs_gain_new_columns(tmp_path):
    path = str(tmp_path / 'old.db')
    conn = sqlite3.connect(path)
    conn.execute("""
        CREATE TABLE run_log (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            started_at TEXT NOT NULL,
            completed_at TEXT,
            experiment TEXT NOT NULL,
            config_digest TEXT,
            seed INTEGER,
            status TEXT DEFAULT 'running',
            error_message TEXT
        )
    """)
    conn.commit()
    conn.close()

    init_db(path)
    log_id = log_run_start('tails', 'd', 3, path=path)
    log_run_end(log_id, checks_passed=1, checks_failed=1, report_path='r.json', path=path)
    row, = get_run_log(path=path)
    assert row['checks_failed'] == 1
    assert row['report_path'] == 'r.json'
