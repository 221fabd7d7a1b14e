import logging
import os
import sqlite3
from datetime import datetime, timezone

from config.settings import RUN_LOG_PATH

logger = logging.getLogger(__name__)


def get_db(path=None):
    """Get a run-log connection with row factory enabled."""
    path = path or RUN_LOG_PATH
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    conn = sqlite3.connect(path)
    conn.row_factory = sqlite3.Row
    return conn


def init_db(path=None):
    """Create the run log if it doesn't exist."""
    conn = get_db(path)
    cursor = conn.cursor()

    cursor.executescript("""
        CREATE TABLE IF NOT EXISTS run_log (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            started_at TEXT NOT NULL,
            completed_at TEXT,
            experiment TEXT NOT NULL,
            config_digest TEXT,
            seed INTEGER,
            status TEXT DEFAULT 'running',
            error_message TEXT
        );

        CREATE INDEX IF NOT EXISTS idx_run_log_experiment ON run_log(experiment);
    """)

    # Older logs predate the check counters and report paths
    cursor.execute("PRAGMA table_info(run_log)")
    columns = {row[1] for row in cursor.fetchall()}
    if 'checks_passed' not in columns:
        cursor.execute("ALTER TABLE run_log ADD COLUMN checks_passed INTEGER DEFAULT 0")
    if 'checks_failed' not in columns:
        cursor.execute("ALTER TABLE run_log ADD COLUMN checks_failed INTEGER DEFAULT 0")
    if 'report_path' not in columns:
        cursor.execute("ALTER TABLE run_log ADD COLUMN report_path TEXT")

    conn.commit()
    conn.close()


def log_run_start(experiment, config_digest, seed, path=None):
    """Log the start of an experiment run. Returns the log ID."""
    conn = get_db(path)
    cursor = conn.cursor()
    cursor.execute(
        "INSERT INTO run_log (started_at, experiment, config_digest, seed, status) VALUES (?, ?, ?, ?, 'running')",
        (datetime.now(timezone.utc).isoformat(), experiment, config_digest, int(seed))
    )
    log_id = cursor.lastrowid
    conn.commit()
    conn.close()
    logger.debug(f"[RunLog] Run {log_id} started: {experiment}")
    return log_id


def log_run_end(log_id, status='success', checks_passed=0, checks_failed=0, report_path=None,
                error_message=None, path=None):
    """Update a run-log entry with its outcome."""
    conn = get_db(path)
    cursor = conn.cursor()
    cursor.execute("""
        UPDATE run_log
        SET completed_at = ?, status = ?, checks_passed = ?, checks_failed = ?, report_path = ?, error_message = ?
        WHERE id = ?
    """, (
        datetime.now(timezone.utc).isoformat(),
        status,
        checks_passed,
        checks_failed,
        report_path,
        error_message,
        log_id
    ))
    conn.commit()
    conn.close()


def get_run_log(limit=20, experiment=None, path=None):
    """Return recent runs, newest first."""
    conn = get_db(path)
    cursor = conn.cursor()
    if experiment:
        cursor.execute(
            "SELECT * FROM run_log WHERE experiment = ? ORDER BY id DESC LIMIT ?", (experiment, limit)
        )
    else:
        cursor.execute("SELECT * FROM run_log ORDER BY id DESC LIMIT ?", (limit,))
    rows = [dict(row) for row in cursor.fetchall()]
    conn.close()
    return rows


def get_last_successful_run(experiment, path=None):
    """Get the most recent successful run of an experiment."""
    conn = get_db(path)
    cursor = conn.cursor()
    cursor.execute(
        "SELECT * FROM run_log WHERE experiment = ? AND status = 'success' ORDER BY id DESC LIMIT 1",
        (experiment,)
    )
    row = cursor.fetchone()
    result = dict(row) if row else None
    conn.close()
    return result
