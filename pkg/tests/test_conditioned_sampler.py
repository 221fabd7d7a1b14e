import math

import numpy as np
import pytest
from scipy.special import ndtri
from scipy.stats import ks_2samp, norm

from backend.conditioned_sampler import (
    ConditionSpec, KernelTable, _exact_increments, acceptance_count, child_kernel, conditioned_children,
    kernel_quantile, rejection_oracle_batch, rejection_oracle_hard_wall, sample_conditioned_field,
    sample_conditioned_vertices, sample_hard_wall, sample_infinite_up,
)
from backend.core_field import TAG_ORACLE, RngStream, leftmost, level_slice, m, sample_brw_batch
from backend.grid_fn import log_trapz
from backend.tail_grid import INF, p_n


def test_condition_spec():
    spec = ConditionSpec.hard_wall(8)
    assert spec.threshold == 0.0
    assert spec.remaining(3) == 5
    assert spec.anchor(3) == 0.0
    moved = spec.shifted(1.5)
    assert moved.v == 1.5
    assert moved.threshold == pytest.approx(1.5)
    inf = ConditionSpec(INF, 2.0, 0.0)
    assert inf.is_infinite
    assert inf.remaining(4) == INF
    assert inf.anchor(2) == pytest.approx(2.0 - 2.0 * math.sqrt(2.0 * math.log(2.0)))
    with pytest.raises(ValueError):
        inf.threshold


def test_child_kernel_is_a_density_above_the_wall(table):
    kernel = child_kernel(0.3, 0, 0.0, table)
    assert log_trapz(kernel.log_values, kernel.dx) == pytest.approx(0.0, abs=1e-12)
    assert kernel(-0.02) == -np.inf
    assert np.isfinite(kernel(0.5))


def test_child_kernel_far_from_the_wall_is_gaussian(table):
    q = kernel_quantile(30.0, 5, 0.0, table, np.array([-1.0, 0.0, 1.0]))
    assert np.allclose(q, [29.0, 30.0, 31.0], atol=0.02)


def test_child_kernel_at_the_last_level_is_a_half_normal(table):
    scores = ndtri((np.arange(20_000) + 0.5) / 20_000)
    children = kernel_quantile(0.0, 0, 0.0, table, scores)
    assert np.all(children >= -1e-12)
    assert children.mean() == pytest.approx(math.sqrt(2.0 / math.pi), abs=5e-4)


def test_child_kernel_without_a_constraint_is_the_gaussian_step(table):
    kernel = child_kernel(0.3, 5, -1e6, table)
    density = np.exp(kernel.log_values)
    assert np.max(np.abs(density - norm.pdf(kernel.x - 0.3))) <= 1e-10


def test_kernel_quantiles_are_monotone(table):
    q = kernel_quantile(-1.0, 3, 0.0, table, np.linspace(-4.0, 4.0, 41))
    assert np.all(np.diff(q) >= 0.0)


def test_kernel_table_matches_exact_quantiles(table):
    kt = KernelTable(table, 3)
    z = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    for a in (-1.3, 0.0, 2.7):
        a_arr = np.full(z.size, a)
        table_inc = kt.increments(a_arr, z, lambda ab, zb: _exact_increments(table, 3, ab, zb))
        exact = kernel_quantile(a, 3, 0.0, table, z) - a
        assert np.allclose(table_inc, exact, atol=0.02)


def test_kernel_table_is_plain_gaussian_far_above(table):
    kt = KernelTable(table, 2)
    z = np.array([-1.0, 0.25, 3.0])
    inc = kt.increments(np.full(3, kt.a_gauss + 5.0), z, None)
    assert np.array_equal(inc, z)


def test_hard_wall_sample(table, kernels, rng):
    f = sample_hard_wall(5, table, rng, kernels)
    assert f.root == 0.0
    assert f.leaves.size == 32
    assert np.all(f.leaves >= 0.0)
    again = sample_hard_wall(5, table, rng, kernels)
    assert np.array_equal(f.values, again.values)
    other = sample_hard_wall(5, table, RngStream(1234, 1), kernels)
    assert not np.array_equal(f.values, other.values)


def test_vertex_sampling_reproduces_the_full_field(table, kernels):
    spec = ConditionSpec.hard_wall(7)
    full = sample_conditioned_field(spec, table, RngStream(21, 4), kernels)
    vertices = [leftmost(7), leftmost(7) + 77, leftmost(3) + 5, leftmost(7) + 127]
    got = sample_conditioned_vertices(spec, table, RngStream(21, 4), vertices, kernels)
    assert got[0] == 0.0
    for v, value in got.items():
        assert value == pytest.approx(full.values[v], abs=1e-12)
    assert set(vertices) <= set(got)


def test_infinite_volume_sample(table, kernels, rng):
    f = sample_infinite_up(6, 0.0, 1.0, table, rng, kernels)
    assert f.depth_n == 6
    assert f.root == 1.0
    assert np.all(np.isfinite(f.values))
    with pytest.raises(ValueError):
        sample_conditioned_field(ConditionSpec(INF, 0.0), table, rng, kernels)


def test_hard_wall_is_pushed_up(table, kernels):
    means = np.zeros(5)
    for i in range(200):
        f = sample_hard_wall(4, table, RngStream(5, i), kernels)
        means += [f.level(k).mean() for k in range(5)]
    means /= 200
    assert np.all(means[1:] > 0.0)
    assert means[4] > means[1]


def test_children_of_the_root_increase_with_the_level(table, kernels):
    # common scores, so the three laws are compared sample by sample
    z = RngStream(8, 8).generator(0).standard_normal(100_000)
    parents = np.zeros(z.size)
    by_level = [
        conditioned_children(parents, 1, ConditionSpec(8, u, 0.0), kernels, z) for u in (0.0, 1.0, 2.0)
    ]
    for low, high in zip(by_level, by_level[1:]):
        d = high - low
        assert d.mean() > 4.0 * d.std(ddof=1) / math.sqrt(d.size)


def test_rejection_oracle(rng):
    samples, attempts = rejection_oracle_batch(2, rng, 50)
    assert samples.shape == (50, 7)
    assert np.all(samples[:, level_slice(2)] >= 0.0)
    assert attempts >= 50
    again, attempts_again = rejection_oracle_batch(2, rng, 50)
    assert np.array_equal(samples, again) and attempts == attempts_again
    single = rejection_oracle_hard_wall(1, rng)
    assert np.all(single.leaves >= 0.0)
    with pytest.raises(ValueError):
        rejection_oracle_batch(7, rng, 1)


def test_rejection_oracle_counts_every_drawn_field(rng):
    n, count, batch = 2, 40, 64
    samples, attempts = rejection_oracle_batch(n, rng, count, batch=batch)
    stream = rng.spawn(TAG_ORACLE)
    expected, got, round_no = 0, 0, 0
    while got < count:
        fields = sample_brw_batch(n, 0.0, stream.spawn(round_no), batch)
        hits = np.flatnonzero(np.all(fields[:, level_slice(n)] >= 0.0, axis=1))
        if got + hits.size >= count:
            expected += int(hits[count - got - 1]) + 1
        else:
            expected += batch
        got += hits.size
        round_no += 1
    assert round_no > 1
    assert attempts == expected
    assert samples.shape[0] == count


def test_rejection_acceptance_rate_matches_the_table(table):
    count = 20_000
    _, attempts = rejection_oracle_batch(2, RngStream(31), count)
    p = math.exp(p_n(table, 2, m(2)))
    se = p * math.sqrt((1.0 - p) / count)
    assert abs(count / attempts - p) <= 4.0 * se


def test_acceptance_count_is_reproducible(rng):
    a = acceptance_count(2, rng, 10_000, -m(2))
    assert a == acceptance_count(2, rng, 10_000, -m(2))
    assert 0 < a < 10_000


@pytest.mark.slow
@pytest.mark.parametrize('n', [3, 4])
def test_hard_wall_sampler_agrees_with_rejection(table, kernels, n):
    count = 2000
    oracle, _ = rejection_oracle_batch(n, RngStream(99), count)
    sampled = np.array([
        sample_hard_wall(n, table, RngStream(100, i), kernels).values for i in range(count)
    ])
    for v in (1, 4, leftmost(n), leftmost(n) + (1 << n) - 1):
        assert ks_2samp(sampled[:, v], oracle[:, v]).pvalue > 1e-3
