"""Experiment runner: configuration, budgets, reports and the run log."""

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from backend.conditioned_sampler import KernelCache
from backend.core_field import C0, RngStream, tree_size
from backend.database import init_db, log_run_end, log_run_start
from backend.depth_laws import build_plus_delta
from backend.errors import BudgetExceededError, ConfigInvalidError
from backend.experiments import DEFAULTS, EXPERIMENTS, FULL_FIELD, MIN_DEPTH
from backend.scheduler import run_replicas
from backend.tail_grid import cauchy_gap, ensure_table
from config.settings import (
    BUDGET_SECONDS, CACHE_DIR, DX, FIELD_THREADS, K_PLUS_DELTA, MEMORY_BUDGET_MB, N_REF, N_SPINE,
    OUTPUT_DIR, PROPAGATION_DX, SEED, THREADS,
)

logger = logging.getLogger(__name__)

MAX_FULL_FIELD_DEPTH = 24


@dataclass
class ExperimentConfig:
    experiment: str
    n: int = None
    replicas: int = None
    seed: int = SEED
    dx: float = DX
    n_ref: int = N_REF
    k_plus_delta: int = K_PLUS_DELTA
    alphas: tuple = ()
    delta: float = 0.0
    n_spine: int = N_SPINE
    propagation_dx: float = PROPAGATION_DX
    threads: int = THREADS
    field_threads: int = FIELD_THREADS
    budget_seconds: float = BUDGET_SECONDS
    memory_budget_mb: float = MEMORY_BUDGET_MB
    output_dir: str = OUTPUT_DIR
    cache_dir: str = CACHE_DIR

    def __post_init__(self):
        if self.experiment in DEFAULTS:
            n, replicas = DEFAULTS[self.experiment]
            self.n = n if self.n is None else self.n
            self.replicas = replicas if self.replicas is None else self.replicas
        self.alphas = tuple(float(a) for a in self.alphas)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigInvalidError(
                f"unknown experiment {self.experiment!r}; choose from {', '.join(sorted(EXPERIMENTS))}"
            )
        if self.replicas < 1:
            raise ConfigInvalidError(f"replicas must be at least 1, got {self.replicas}")
        if self.n < MIN_DEPTH[self.experiment]:
            raise ConfigInvalidError(
                f"{self.experiment} needs n >= {MIN_DEPTH[self.experiment]}, got {self.n}"
            )
        if not 0 < self.dx <= 0.02:
            raise ConfigInvalidError(f"dx must lie in (0, 0.02], got {self.dx}")
        if self.n_ref < 2:
            raise ConfigInvalidError(f"n_ref must be at least 2, got {self.n_ref}")
        if self.k_plus_delta < 1:
            raise ConfigInvalidError(f"k must be positive, got {self.k_plus_delta}")
        if not 0.0 <= self.delta < 1.0:
            raise ConfigInvalidError(f"delta must lie in [0, 1), got {self.delta}")
        if self.threads < 1:
            raise ConfigInvalidError(f"threads must be at least 1, got {self.threads}")
        if self.field_threads < 1:
            raise ConfigInvalidError(f"field threads must be at least 1, got {self.field_threads}")
        for a in self.alphas:
            if not 0.0 <= a <= C0:
                raise ConfigInvalidError(f"alpha {a} outside [0, c0]")
        if self.experiment in FULL_FIELD:
            if self.n > MAX_FULL_FIELD_DEPTH:
                raise ConfigInvalidError(
                    f"n = {self.n} exceeds the full-field limit {MAX_FULL_FIELD_DEPTH}"
                )
            needed_mb = 3 * tree_size(self.n) * 8 / 2 ** 20
            if needed_mb > self.memory_budget_mb:
                raise ConfigInvalidError(
                    f"a depth-{self.n} field needs about {needed_mb:.0f} MB, budget is {self.memory_budget_mb:.0f} MB"
                )
        return self

    @property
    def table_depth(self):
        return max(self.n_ref, self.n, self.n_spine)

    def echo(self):
        """Configuration as written into reports; paths and thread counts are
        left out so reports compare across machines."""
        data = dataclasses.asdict(self)
        for key in ('output_dir', 'cache_dir', 'threads', 'field_threads'):
            data.pop(key)
        data['alphas'] = list(self.alphas)
        return data

    def digest(self):
        text = json.dumps(self.echo(), sort_keys=True)
        return hashlib.blake2b(text.encode(), digest_size=8).hexdigest()

    @property
    def run_dir(self):
        return os.path.join(self.output_dir, f"{self.experiment}_n{self.n}_s{self.seed}")


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _cast(key, raw):
    kind = _FIELD_TYPES[key]
    if kind is tuple:
        return tuple(float(x) for x in raw.replace(',', ' ').split())
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def load_config_file(path):
    """Read `key = value` settings from the [experiment] section of a config file."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigInvalidError(f"cannot read config file {path}")
    if not parser.has_section('experiment'):
        raise ConfigInvalidError(f"{path} has no [experiment] section")
    values = {}
    for key, raw in parser.items('experiment'):
        if key not in _FIELD_TYPES:
            raise ConfigInvalidError(f"unknown config key {key!r} in {path}")
        try:
            values[key] = _cast(key, raw)
        except ValueError as e:
            raise ConfigInvalidError(f"bad value for {key!r} in {path}: {e}") from e
    return values


def build_config(file_values=None, **overrides):
    """Config from file values with non-None overrides on top."""
    values = dict(file_values or {})
    values.update({k: v for k, v in overrides.items() if v is not None})
    if 'experiment' not in values:
        raise ConfigInvalidError("no experiment named")
    return ExperimentConfig(**values)


# --- Run context ---

class RunContext:
    """What an experiment sees: config, tables, streams and the replica pool."""

    def __init__(self, config, table, kernels, deadline):
        self.config = config
        self.table = table
        self.kernels = kernels
        self.deadline = deadline
        self._plus_delta = {}

    @property
    def n(self):
        return self.config.n

    @property
    def replicas_count(self):
        return self.config.replicas

    def stream(self, index, *tags):
        return RngStream(self.config.seed, int(index), tuple(int(t) for t in tags))

    def check_budget(self):
        if time.monotonic() > self.deadline:
            raise BudgetExceededError(
                f"{self.config.experiment} exceeded its {self.config.budget_seconds:.0f} s budget"
            )

    def replicas(self, job, count=None, label=None):
        count = self.config.replicas if count is None else count

        def guarded(i):
            self.check_budget()
            return job(i)

        return run_replicas(guarded, count, self.config.threads, label or self.config.experiment)

    def plus_delta(self, delta, compare_k=None):
        key = (round(float(delta), 12), compare_k)
        if key not in self._plus_delta:
            self.check_budget()
            self._plus_delta[key] = build_plus_delta(
                delta, self.config.k_plus_delta, self.table, compare_k=compare_k,
                dx=self.config.propagation_dx,
            )
        return self._plus_delta[key]

    def plus_delta_gaps(self):
        """k-gap certificates of the P^{+,delta} laws built so far."""
        laws = sorted(self._plus_delta.values(), key=lambda pd: (pd.delta, pd.k_compare or 0))
        return {f"plus_delta_k_gap[{pd.delta:.6g}]": pd.k_gap for pd in laws if pd.k_gap is not None}


# --- Reports ---

@dataclass
class ExperimentReport:
    config: dict
    checks: list
    certificates: dict
    artifacts: list
    wall_time: float = 0.0
    status: str = 'success'
    error: str = None

    @property
    def passed(self):
        return self.status == 'success' and all(c.passed for c in self.checks)

    def as_dict(self):
        return {
            'config': self.config,
            'checks': [c.as_dict() for c in self.checks],
            'certificates': self.certificates,
            'artifacts': self.artifacts,
            'wall_time': self.wall_time,
            'status': self.status,
            'error': self.error,
            'passed': self.passed,
        }


def format_value(value):
    """CSV cell: floats with 9 significant digits, None as empty."""
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    return str(value)


def _atomic_write(path, write):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, 'w', newline='') as fh:
        write(fh)
    os.replace(tmp, path)


def emit_csv(tables, directory):
    """Write one CSV per table; returns the file paths in name order."""
    paths = []
    for name in sorted(tables):
        table = tables[name]
        path = os.path.join(directory, f"{name}.csv")

        def write(fh, table=table):
            writer = csv.writer(fh)
            writer.writerow(table.header)
            for row in table.rows:
                writer.writerow([format_value(v) for v in row])

        _atomic_write(path, write)
        paths.append(path)
        logger.info(f"[Runner] Wrote {path} ({len(table.rows)} rows)")
    return paths


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else repr(value)
    return obj


def write_report(report, directory):
    path = os.path.join(directory, 'report.json')
    payload = _plain(report.as_dict())
    _atomic_write(path, lambda fh: json.dump(payload, fh, indent=2, sort_keys=True))
    return path


def read_report(path):
    with open(path) as fh:
        return json.load(fh)


# --- Run ---

def run(config, record=True):
    """Run one experiment end to end and return its report.

    Any failure is recorded in the run log with status `error` and re-raised.
    """
    config.validate()
    log_id = None
    if record:
        init_db()
        log_id = log_run_start(config.experiment, config.digest(), config.seed)
    started = time.monotonic()
    logger.info(f"[Runner] {config.experiment}: n={config.n}, replicas={config.replicas}, seed={config.seed}")
    try:
        table = ensure_table(config.table_depth, config.dx, config.cache_dir)
        ctx = RunContext(config, table, KernelCache(table), started + config.budget_seconds)
        outcome = EXPERIMENTS[config.experiment](ctx)
        certificates = {'p_inf_cauchy_gap': cauchy_gap(table)}
        certificates.update(ctx.plus_delta_gaps())
        certificates.update(outcome.certificates)
        artifacts = emit_csv(outcome.tables, config.run_dir)
        report = ExperimentReport(config.echo(), outcome.checks, certificates, artifacts,
                                  wall_time=time.monotonic() - started)
    except Exception as e:
        logger.error(f"[Runner] {config.experiment} failed: {type(e).__name__}: {e}")
        if record:
            log_run_end(log_id, status='error', error_message=f"{type(e).__name__}: {e}")
        raise

    path = write_report(report, config.run_dir)
    passed = sum(c.passed for c in report.checks)
    failed = len(report.checks) - passed
    for c in report.checks:
        level = logging.INFO if c.passed else logging.WARNING
        logger.log(level, f"[Runner] {'PASS' if c.passed else 'FAIL'} {c.name}: "
                          f"{c.statistic:.6g} (threshold {c.threshold:.6g})")
    if record:
        log_run_end(log_id, status='success' if report.passed else 'failed',
                    checks_passed=passed, checks_failed=failed, report_path=path)
    logger.info(f"[Runner] {config.experiment} done in {report.wall_time:.1f} s: "
                f"{passed} passed, {failed} failed, report at {path}")
    return report
