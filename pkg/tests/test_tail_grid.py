import math
import os
import struct

import numpy as np
import pytest
from scipy.special import ndtr

from backend.conditioned_sampler import acceptance_count
from backend.core_field import C0, RngStream, m
from backend.errors import CorruptCacheError, GridTooNarrowError, VersionMismatchError
from backend.tail_grid import (
    INF, GridSpec, build_digest, build_tail_table, cache_path, cauchy_gap, ensure_table,
    fit_c0_constant, fixed_point_residual, load_table, log_deriv_p, p_inf_proxy, p_n, q_n,
    recursion_residual, save_table, tail_bound_constant,
)


@pytest.fixture(scope='module')
def small_table():
    return build_tail_table(4, dx=0.02)


def test_grid_spec_rejects_coarse_spacing():
    with pytest.raises(GridTooNarrowError):
        GridSpec.for_depth(8, dx=0.05)


def test_grid_covers_the_centered_range(table):
    spec = table.grid
    assert spec.x0 <= -m(table.max_depth) - 40.0
    assert spec.x_end == pytest.approx(12.0, abs=spec.dx)
    assert table.log_s.shape == (table.max_depth + 1, spec.length)


def test_log_values_are_valid_survival_functions(table):
    lv = table.log_s
    assert not np.isnan(lv).any()
    assert np.all(lv <= 0.0)
    for k in (1, 2, 10, 64):
        row = lv[k]
        assert row[0] == 0.0
        assert np.all(np.diff(row[np.isfinite(row)]) <= 0.0)


def test_step_level(table):
    assert table.S(0)(-1.0) == 0.0
    assert table.S(0)(1.0) == -np.inf
    with pytest.raises(ValueError):
        table.S(table.max_depth + 1)


def test_level_one_closed_form(table):
    assert table.S(1)(0.0) == pytest.approx(math.log(0.25), abs=1e-9)
    x = np.linspace(-5.0, 5.0, 1001)
    assert np.max(np.abs(np.exp(table.S(1)(x)) - ndtr(-x) ** 2)) <= 1e-4


@pytest.mark.parametrize('k', [2, 3, 16, 64])
def test_levels_satisfy_the_recursion(table, k):
    assert recursion_residual(table, k) <= 1e-6


def test_recursion_residual_needs_two_levels(table):
    with pytest.raises(ValueError):
        recursion_residual(table, 1)


def test_p_one_at_zero(table):
    assert p_n(table, 1, 0.0) == pytest.approx(2.0 * math.log(ndtr(C0)), abs=1e-4)


def test_p_n_flat_in_the_left_tail(table):
    assert p_n(table, 32, -30.0) > -1e-10
    assert abs(log_deriv_p(table, 64, -10.0)) <= 0.05


def test_p_inf_proxy_shape(table):
    u = np.linspace(-5.0, 8.0, 261)
    p = p_inf_proxy(table, u)
    assert np.all(np.diff(p) <= 0.0)
    assert 0.0 < math.exp(p_inf_proxy(table, 0.0)) < 1.0
    assert np.array_equal(p_n(table, INF, u), p)


def test_log_derivative_is_nonpositive(table):
    u = np.linspace(-8.0, 8.0, 161)
    assert np.all(log_deriv_p(table, 64, u) <= 0.0)
    assert np.all(log_deriv_p(table, INF, u) <= 0.0)


def test_q_n(table):
    assert q_n(table, 16, 0.0) == pytest.approx(1.0 - math.exp(p_n(table, 16, 0.0)), rel=1e-12)
    assert q_n(table, 64, -m(64)) >= 1.0 - 1e-15


def test_q_n_tracks_its_envelope(table):
    u = np.linspace(2.0, 8.0, 61)
    ratio = q_n(table, 64, u) / ((u + 1.0) * np.exp(-C0 * u))
    assert np.all(ratio > 0.0)
    assert ratio.max() / ratio.min() <= 4.0


def test_depth_out_of_range(table):
    with pytest.raises(ValueError):
        p_n(table, 0, 0.0)
    with pytest.raises(ValueError):
        p_n(table, table.max_depth + 1, 0.0)


def test_fitted_constants_are_finite(table):
    assert fit_c0_constant(table) > 0.0
    assert 0.0 <= tail_bound_constant(table, 64) < math.inf
    assert 0.0 <= cauchy_gap(table) <= 1.0
    assert 0.0 <= fixed_point_residual(table) < math.inf


@pytest.mark.slow
def test_level_three_against_direct_sampling(table):
    attempts = 1_000_000
    hits = acceptance_count(3, RngStream(77), attempts, 0.0)
    p = math.exp(table.S(3)(0.0))
    se = math.sqrt(p * (1.0 - p) / attempts)
    assert abs(hits / attempts - p) <= 4.0 * se


# --- cache ---

def test_save_then_load(tmp_path, small_table):
    path = tmp_path / 'tail.bin'
    save_table(small_table, str(path))
    loaded = load_table(str(path))
    assert np.array_equal(loaded.log_s, small_table.log_s)
    assert loaded.grid == small_table.grid
    assert loaded.build_digest == small_table.build_digest


def test_truncated_cache_is_corrupt(tmp_path, small_table):
    path = tmp_path / 'tail.bin'
    save_table(small_table, str(path))
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(CorruptCacheError):
        load_table(str(path))
    path.write_bytes(b'abc')
    with pytest.raises(CorruptCacheError):
        load_table(str(path))


def test_flipped_byte_fails_the_checksum(tmp_path, small_table):
    path = tmp_path / 'tail.bin'
    save_table(small_table, str(path))
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptCacheError):
        load_table(str(path))


def test_other_format_version(tmp_path, small_table):
    path = tmp_path / 'tail.bin'
    save_table(small_table, str(path))
    data = bytearray(path.read_bytes())
    struct.pack_into('<I', data, 8, 99)
    path.write_bytes(bytes(data))
    with pytest.raises(VersionMismatchError):
        load_table(str(path))


def test_ensure_table_builds_then_hits(tmp_path):
    first = ensure_table(4, 0.02, str(tmp_path))
    path = cache_path(4, GridSpec.for_depth(4, 0.02), str(tmp_path))
    assert os.path.exists(path)
    second = ensure_table(4, 0.02, str(tmp_path))
    assert np.array_equal(first.log_s, second.log_s)


def test_mismatched_grid_is_rebuilt(tmp_path, small_table):
    wanted = GridSpec.for_depth(4, 0.01)
    path = cache_path(4, wanted, str(tmp_path))
    save_table(small_table, path)
    table = ensure_table(4, 0.01, str(tmp_path))
    assert table.grid == wanted
    assert table.build_digest == build_digest(4, wanted)
    assert load_table(path).grid == wanted
