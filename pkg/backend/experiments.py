"""The experiments the harness can run.

Each experiment takes a RunContext and returns an Outcome: the checks it
evaluated, the CSV tables it produced and any convergence certificates.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import expon, norm

from backend.conditioned_sampler import (
    ConditionSpec, acceptance_count, sample_conditioned_vertices, sample_hard_wall,
)
from backend.core_field import (
    C0, common_ancestor_depth, depth, frac2, l, leaf_max, leaf_min, leftmost, m, mu_profile,
    nprime, population_mean, sample_brw,
)
from backend.coupling import (
    eta_branches, fit_gradient_decay, gradient_profile, sample_coupled_field,
    sample_coupled_plus_delta, summarize_eta,
)
from backend.depth_laws import (
    a_alpha_bound_constant, a_alpha_delta, alpha_profile, delta_dependence, kappa,
    max_centering, mean_bound_constant, spine_laws,
)
from backend.stats import (
    SampleBatch, TestReport, coefficient_of_variation, covariance_estimate, empirical_tail_envelope,
    empirical_wp, fit_exponential, fit_gumbel, fit_tail_envelope, ks_statistic,
    leaf_pair_with_branch, martingale_sum, nondecreasing_within,
)
from backend.tail_grid import (
    INF, cauchy_gap, fit_c0_constant, fixed_point_residual, log_deriv_convergence, p_n,
    recursion_residual, tail_bound_constant,
)

logger = logging.getLogger(__name__)

# stream tags: every replica index owns one stream per purpose
HARD_WALL = 10
FREE = 11
PLUS = 12
REFERENCE = 13
ORACLE = 14

ETA_DEPTH = 12
GRADIENT_DEPTHS = range(2, 15)
BALL_RADIUS = 4


@dataclass
class CsvTable:
    header: list
    rows: list = field(default_factory=list)


@dataclass
class Outcome:
    checks: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    certificates: dict = field(default_factory=dict)


# --- Shared sampling ---

def _hard_wall(ctx, i):
    return sample_hard_wall(ctx.n, ctx.table, ctx.stream(i, HARD_WALL), ctx.kernels)


def _free(ctx, n, i):
    return sample_brw(n, 0.0, ctx.stream(i, FREE), workers=ctx.config.field_threads)


def _level_means(f):
    return np.array([f.level(k).mean() for k in range(f.depth_n + 1)])


def _mean_se(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return arr.mean(axis=0), arr.std(axis=0, ddof=1) / math.sqrt(arr.shape[0])


def _hard_wall_extremes(ctx):
    def job(i):
        f = _hard_wall(ctx, i)
        return leaf_min(f), leaf_max(f), population_mean(f)
    return np.array(ctx.replicas(job, label='hard-wall extremes'))


def _eta_infinity_draws(ctx, delta, count, r=ETA_DEPTH):
    pd = ctx.plus_delta(delta)

    def job(i):
        return eta_branches(sample_coupled_plus_delta(pd, r, ctx.table, ctx.stream(i, PLUS), ctx.kernels))
    return summarize_eta(ctx.replicas(job, count, label='eta(inf) branches'))


# --- profile / covariance / singularity ---

def profile(ctx):
    n, ln = ctx.n, l(ctx.n)
    means, se = _mean_se(ctx.replicas(lambda i: _level_means(_hard_wall(ctx, i)), label='profile'))
    mu = np.array([mu_profile(n, k) for k in range(n + 1)])
    gap = np.abs(means - mu)[:ln + 1]
    out = Outcome()
    out.tables['profile'] = CsvTable(
        ['depth', 'k', 'mu_theory', 'mean_emp', 'se'],
        [[n, k, mu[k], means[k], se[k]] for k in range(n + 1)],
    )
    out.checks.append(TestReport('profile_sup_gap', float(gap.max()), 1.5, dict(replicas=ctx.replicas_count)))
    out.checks.append(TestReport.within('leaf_mean_minus_m_nprime', float(means[n] - m(nprime(n))), -2.0, 4.0))
    return out


def covariance(ctx):
    n, ln = ctx.n, l(ctx.n)
    pairs = [leaf_pair_with_branch(n, j) for j in range(n)]
    vertices = sorted({v for p in pairs for v in p})
    columns = {v: c for c, v in enumerate(vertices)}

    def job(i):
        f = _hard_wall(ctx, i)
        g = _free(ctx, n, i)
        return f.values[vertices], g.values[vertices]

    results = ctx.replicas(job, label='covariance')
    cond = covariance_estimate(np.array([r[0] for r in results]), pairs, columns)
    free = covariance_estimate(np.array([r[1] for r in results]), pairs, columns)
    out = Outcome()
    out.tables['covariance'] = CsvTable(
        ['branch_depth', 'cov', 'se', 'free_cov', 'free_se'],
        [[c.branch_depth, c.cov, c.se, f.cov, f.se] for c, f in zip(cond, free)],
    )
    deep = [abs(c.cov - (c.branch_depth - ln)) for c in cond if c.branch_depth >= ln]
    out.checks.append(TestReport('deep_covariance_offset', max(deep), 2.0))
    if ln >= 4:
        shallow = [abs(c.cov) for c in cond if c.branch_depth == ln - 4]
        out.checks.append(TestReport('shallow_covariance', max(shallow), 0.5))
    free_z = max(abs(f.cov - f.branch_depth) / f.se for f in free)
    out.checks.append(TestReport('free_covariance_z', free_z, 4.0))
    return out


def singularity(ctx):
    n = ctx.n
    if n < 14:
        logger.warning(f"[Runner] singularity experiment below n = 14 (n = {n})")

    def job(i):
        return (population_mean(_hard_wall(ctx, i)),
                population_mean(_free(ctx, n, i)))

    results = np.array(ctx.replicas(job, label='population means'))
    cond, free = results[:, 0], results[:, 1]
    count = results.shape[0]
    var_cond, var_free = float(np.var(cond, ddof=1)), float(np.var(free, ddof=1))
    theory = 1.0 - 2.0 ** (-n)
    ratio = var_cond / var_free

    eps = 3.0 * math.sqrt(var_cond)
    center = float(cond.mean())
    p_plus = float(np.mean(np.abs(cond - center) <= eps))
    shifts = np.linspace(-10.0, 10.0, 401)
    hits = np.abs(free[None, :] + shifts[:, None] - center) <= eps
    shift_probs = hits.mean(axis=1)

    out = Outcome()
    rel_se = math.sqrt(2.0 / (count - 1))
    out.tables['singularity'] = CsvTable(
        ['law', 'var', 'se', 'theory'],
        [['hard_wall', var_cond, var_cond * rel_se, None], ['free', var_free, var_free * rel_se, theory]],
    )
    out.tables['singularity_scan'] = CsvTable(
        ['shift', 'free_probability'], [[s, p] for s, p in zip(shifts, shift_probs)]
    )
    out.checks.append(TestReport.within('free_variance_ratio', var_free / theory, 0.95, 1.05))
    out.checks.append(TestReport('hard_wall_variance', var_cond, 0.2))
    out.checks.append(TestReport('variance_ratio', ratio, 0.2))
    out.certificates.update(event_probability_hard_wall=p_plus,
                            event_probability_free_max=float(shift_probs.max()), event_epsilon=eps)
    return out


# --- extremes ---

def minimum(ctx):
    n = ctx.n
    delta = frac2(n)
    k_value, worst = kappa(ctx.plus_delta(delta), ctx.table)
    mins = _hard_wall_extremes(ctx)[:, 0]
    scaled = SampleBatch(n * k_value * mins, 'n kappa min')
    fit = fit_exponential(scaled)
    out = Outcome()
    out.tables['minimum'] = CsvTable(
        ['replica', 'leaf_min', 'scaled_min'], [[i, a, b] for i, (a, b) in enumerate(zip(mins, scaled.values))]
    )
    out.checks.append(TestReport('min_exp_ks', ks_statistic(scaled, expon.cdf), 0.06))
    out.checks.append(TestReport.within('min_exp_rate', fit.rate, 0.8, 1.25, se=fit.rate_se))
    out.checks.append(TestReport.at_least('kappa_positive', k_value, 1e-12))
    out.certificates.update(kappa=k_value, kappa_integrand_max=worst, delta=delta)
    return out


def maximum(ctx):
    n = ctx.n
    delta = frac2(n)
    pd = ctx.plus_delta(delta)
    a_c0 = a_alpha_delta(pd, C0, ctx.table, ctx.config.n_spine)
    c0_const = fit_c0_constant(ctx.table)
    centering = max_centering(n, a_c0, c0_const)
    maxes = _hard_wall_extremes(ctx)[:, 1]
    fit = fit_gumbel(SampleBatch(maxes, 'leaf max'))
    out = Outcome()
    out.tables['maximum'] = CsvTable(['replica', 'leaf_max'], [[i, v] for i, v in enumerate(maxes)])
    out.tables['maximum_fit'] = CsvTable(
        ['location', 'scale', 'rate', 'rate_se', 'ks', 'centering'],
        [[fit.location, fit.scale, fit.rate, fit.rate_se, fit.ks, centering]],
    )
    out.checks.append(TestReport.within('gumbel_rate_over_c0', fit.rate / C0, 0.85, 1.15))
    out.checks.append(TestReport.within('gumbel_location_offset', fit.location - centering, -0.5, 0.5))
    out.certificates.update(a_c0_delta=a_c0, c0_constant=c0_const, max_centering=centering, delta=delta)
    return out


# --- martingale / mean ---

def martingale(ctx):
    n = ctx.n
    n_p = nprime(n)
    alphas = ctx.config.alphas or (C0 / 2.0,)
    pd = ctx.plus_delta(frac2(n))

    def job(i):
        f = _hard_wall(ctx, i)
        return [martingale_sum(f, a, (m(n_p), n_p)) for a in alphas]

    sums = np.array(ctx.replicas(job, label='martingale'))
    out = Outcome()
    table = CsvTable(['replica', 'alpha', 'value'])
    for j, alpha in enumerate(alphas):
        table.rows.extend([i, alpha, v] for i, v in enumerate(sums[:, j]))
        target = a_alpha_delta(pd, alpha, ctx.table, ctx.config.n_spine)
        mean = float(sums[:, j].mean())
        cv = coefficient_of_variation(sums[:, j])
        out.checks.append(TestReport(f'martingale_cv[{alpha:.4f}]', cv, 0.1))
        out.checks.append(TestReport(f'martingale_mean_vs_A[{alpha:.4f}]', abs(mean / target - 1.0), 0.1,
                                     dict(mean=mean, a_alpha_delta=target)))
    out.tables['martingale'] = table

    free_n, free_alpha, free_count = 12, 0.5, 1000
    free = np.array(ctx.replicas(
        lambda i: martingale_sum(_free(ctx, free_n, i), free_alpha),
        free_count, label='free martingale',
    ))
    free_se = float(free.std(ddof=1) / math.sqrt(free_count))
    out.checks.append(TestReport('free_martingale_z', abs(free.mean() - 1.0) / free_se, 3.0))
    return out


def mean(ctx):
    n, ln = ctx.n, l(ctx.n)
    n_p = nprime(n)
    depths = list(range(ln, min(n, ln + 4) + 1))

    def job(i):
        f = _hard_wall(ctx, i)
        moments = [[np.mean(np.abs(f.level(k) - m(n_p)) ** p) for k in depths] for p in (1, 2)]
        return population_mean(f), moments

    results = ctx.replicas(job, label='population mean')
    pop = np.array([r[0] for r in results])
    hw_moments = np.array([r[1] for r in results]).mean(axis=0)

    pd = ctx.plus_delta(frac2(n))
    eta_count = max(200, len(results))

    def plus_job(i):
        t = sample_coupled_plus_delta(pd, ETA_DEPTH, ctx.table, ctx.stream(i, PLUS), ctx.kernels)
        moments = [[np.mean(np.abs(t.h_up.level(k - ln)) ** p) for k in depths] for p in (1, 2)]
        return eta_branches(t), moments

    plus = ctx.replicas(plus_job, eta_count, label='plus-delta moments')
    eta = summarize_eta([r[0] for r in plus])
    plus_moments = np.array([r[1] for r in plus]).mean(axis=0)
    eta_mean = float(eta.left.mean())

    out = Outcome()
    offset = float(pop.mean()) - m(n_p) - eta_mean
    out.checks.append(TestReport('mean_minus_m_nprime_eta', abs(offset), 0.5,
                                 dict(population_mean=float(pop.mean()), eta_infinity_mean=eta_mean)))
    moment_rows = []
    for pi, p in enumerate((1, 2)):
        for ki, k in enumerate(depths):
            moment_rows.append([p, k, hw_moments[pi, ki] ** (1.0 / p), plus_moments[pi, ki] ** (1.0 / p)])
    out.tables['mean_moments'] = CsvTable(['p', 'k', 'hard_wall_norm', 'plus_delta_norm'], moment_rows)

    bound_rows = []
    worst_c, least = -math.inf, math.inf
    spine_n = min(32, ctx.table.max_depth)
    for u in (-2.0, 0.0, 2.0, 4.0):
        laws = spine_laws(ConditionSpec(spine_n, u, 0.0), ctx.table, dx=ctx.config.propagation_dx)
        c_fit, low = mean_bound_constant(laws, u)
        worst_c, least = max(worst_c, c_fit), min(least, low)
        bound_rows.append([spine_n, u, c_fit, low])
    out.tables['mean_bound'] = CsvTable(['n', 'u', 'c_fit', 'min_mean'], bound_rows)
    out.checks.append(TestReport('spine_mean_bound_c', worst_c, 10.0))
    out.checks.append(TestReport.at_least('spine_mean_nonnegative', least, -1e-3))
    out.certificates['eta_fixation'] = eta.fixation
    return out


# --- coupling / fixation / local limit ---

def coupling(ctx):
    r = ctx.n
    depths = [k for k in GRADIENT_DEPTHS if k <= r]
    spec = ConditionSpec(INF, 0.0, 0.0)
    x2 = leftmost(2)

    def job(i):
        t = sample_coupled_field(spec, ctx.table, ctx.stream(i, HARD_WALL), ctx.kernels, depth=r)
        ref = sample_conditioned_vertices(spec, ctx.table, ctx.stream(i, REFERENCE), [x2], ctx.kernels)
        return (gradient_profile(t, 1, depths), gradient_profile(t, 2, depths), eta_branches(t),
                t.h.values[leftmost(r)], t.h_up.values[x2], ref[x2])

    results = ctx.replicas(job, label='coupling')
    g1 = fit_gradient_decay([x[0] for x in results], 1, depths)
    g2 = fit_gradient_decay([x[1] for x in results], 2, depths)
    eta = summarize_eta([x[2] for x in results])

    free_leaf = SampleBatch([x[3] for x in results], 'h leaf')
    hup_x2 = SampleBatch([x[4] for x in results], 'h_up(x_2) coupled')
    ref_x2 = SampleBatch([x[5] for x in results], 'h_up(x_2) sampler')

    out = Outcome()
    out.tables['coupling'] = CsvTable(
        ['depth', 'norm_p1', 'se_p1', 'norm_p2', 'se_p2', 'eta_mean', 'eta_se'],
        [[k, g1.norms[j], g1.se[j], g2.norms[j], g2.se[j], eta.branch_means[k], eta.branch_se[k]]
         for j, k in enumerate(depths)],
    )
    for g, limit in ((g1, -0.6), (g2, -0.30)):
        slope = g.slope if g.slope is not None else math.inf
        out.checks.append(TestReport(f'gradient_slope_p{int(g.p)}', slope, limit,
                                     dict(slope_stderr=g.slope_stderr, c_fit=g.c_fit)))
    out.checks.append(TestReport('eta_mean_monotone', nondecreasing_within(eta.branch_means, eta.branch_se), 0.0))
    out.checks.append(TestReport('free_marginal_ks', ks_statistic(free_leaf, norm(scale=math.sqrt(r)).cdf), 0.02))
    out.checks.append(TestReport('conditioned_marginal_ks', ks_statistic(hup_x2, ref_x2), 0.02))
    return out


def fixation(ctx):
    delta = ctx.config.delta
    eta = _eta_infinity_draws(ctx, delta, ctx.replicas_count, r=ctx.n)
    out = Outcome()
    out.tables['fixation'] = CsvTable(
        ['depth', 'eta_mean', 'eta_se'],
        [[k, eta.branch_means[k], eta.branch_se[k]] for k in range(eta.depth + 1)],
    )
    out.checks.append(TestReport('eta_fixation', eta.fixation, 0.02, dict(se=eta.fixation_se)))
    out.checks.append(TestReport('branch_invariance_ks',
                                 ks_statistic(SampleBatch(eta.left), SampleBatch(eta.right)), 0.02))
    out.checks.append(TestReport('eta_mean_monotone', nondecreasing_within(eta.branch_means, eta.branch_se), 0.0))
    out.certificates.update(delta=delta, eta_infinity_mean=float(eta.left.mean()))
    return out


def leaf_ball(n, radius=BALL_RADIUS):
    """Vertices within tree distance `radius` of the leftmost leaf."""
    x = leftmost(n)
    ball = []
    for d in range(max(0, n - radius), n + 1):
        for v in range(leftmost(d), leftmost(d) + (1 << (d - max(0, n - radius)))):
            if n + d - 2 * common_ancestor_depth(x, v) <= radius:
                ball.append(v)
    return ball


def local_limit(ctx):
    """Hard-wall field near the leftmost leaf against its local limit.

    The reference is a free field of depth n' shifted by eta(infinity); eta is
    drawn from a separate coupled P^{+,delta} construction, independent of
    that free field.
    """
    n, ln = ctx.n, l(ctx.n)
    n_p = nprime(n)
    ball = leaf_ball(n)
    shifted = [leftmost(depth(v) - ln) + (v - leftmost(depth(v))) for v in ball]
    spec = ConditionSpec.hard_wall(n)
    pd = ctx.plus_delta(frac2(n))

    def job(i):
        vals = sample_conditioned_vertices(spec, ctx.table, ctx.stream(i, HARD_WALL), ball, ctx.kernels)
        g = _free(ctx, n_p, i)
        t = sample_coupled_plus_delta(pd, ETA_DEPTH, ctx.table, ctx.stream(i, PLUS), ctx.kernels)
        eta_inf = t.eta.values[leftmost(ETA_DEPTH)]
        return [vals[v] - m(n_p) for v in ball], g.values[shifted] + eta_inf

    results = ctx.replicas(job, label='local limit')
    hw = np.array([r[0] for r in results])
    ref = np.array([r[1] for r in results])
    rows, worst = [], 0.0
    for j, v in enumerate(ball):
        ks = ks_statistic(SampleBatch(hw[:, j]), SampleBatch(ref[:, j]))
        worst = max(worst, ks)
        rows.append([depth(v), v - leftmost(depth(v)), ks, hw[:, j].mean(), ref[:, j].mean()])
    out = Outcome()
    out.tables['local_limit'] = CsvTable(['depth', 'offset', 'ks', 'mean_hard_wall', 'mean_reference'], rows)
    out.checks.append(TestReport('local_limit_ks', worst, 0.06, dict(vertices=len(ball))))
    return out


# --- tails ---

def tails(ctx):
    n, ln = ctx.n, l(ctx.n)
    depths = list(range(ln, n + 1, 2))
    vertices = [leftmost(k) for k in depths]
    spec = ConditionSpec.hard_wall(n)

    def job(i):
        vals = sample_conditioned_vertices(spec, ctx.table, ctx.stream(i, HARD_WALL), vertices, ctx.kernels)
        return [vals[v] for v in vertices]

    samples = np.array(ctx.replicas(job, label='tails'))
    out = Outcome()
    rows, lower_ratio = [], 0.0
    for j, k in enumerate(depths):
        batch = SampleBatch(samples[:, j], f'h(x_{k})')
        center = batch.mean()
        sigma = (k - ln) + 1.0
        lo = empirical_tail_envelope(batch, center, -1)
        hi = empirical_tail_envelope(batch, center, +1)
        lower_ratio = max(lower_ratio, lo.sigma2 / sigma)
        rows.append(['hard_wall', k, sigma, lo.sigma2, hi.sigma2])

    pd = ctx.plus_delta(ctx.config.delta)
    law = pd.root_law
    center = law.mean()
    s = np.linspace(0.5, 6.0, 56)
    with np.errstate(divide='ignore'):
        lower = np.log(law.cdf(center - s))
        upper = np.log1p(-law.cdf(center + s))
    root_lo = fit_tail_envelope(s, lower, -1)
    root_hi = fit_tail_envelope(s, upper, +1)
    rows.append(['plus_delta_root', 0, 1.0, root_lo.sigma2, root_hi.sigma2])
    out.tables['tails'] = CsvTable(['law', 'k', 'sigma_theory', 'lower_sigma2', 'upper_sigma2'], rows)
    out.checks.append(TestReport('lower_envelope_ratio', lower_ratio, 4.0))
    out.checks.append(TestReport('root_lower_envelope', root_lo.sigma2, 4.0))
    return out


# --- deterministic checks ---

def tables_selftest(ctx):
    table = ctx.table
    top = table.max_depth
    out = Outcome()
    x = table.grid.x
    s1_err = float(np.max(np.abs(np.exp(table.log_s[1]) - ndtr(-x) ** 2)))
    out.checks.append(TestReport('s1_closed_form', s1_err, 1e-4))
    levels = sorted({k for k in (2, 3, 8, 64, top) if 2 <= k <= top})
    residual = max(recursion_residual(table, k) for k in levels)
    out.checks.append(TestReport('recursion_residual', residual, 1e-6, dict(levels=levels)))
    if top >= 512:
        out.checks.append(TestReport('p_cauchy_gap_256_512', cauchy_gap(table, 512), 1e-3))
        out.checks.append(TestReport('log_deriv_gap_256_512', log_deriv_convergence(table, 256, 512), 5e-3))
    out.checks.append(TestReport('p_inf_fixed_point', fixed_point_residual(table), 2e-3))

    oracle = CsvTable(['n', 'u', 'p_grid', 'p_mc', 'se', 'z'])
    worst = 0.0
    attempts = ctx.replicas_count
    index = 0
    for n in (2, 3, 4):
        for u in (-1.0, 0.0, 1.0, m(n)):
            p = math.exp(p_n(table, n, u))
            hits = acceptance_count(n, ctx.stream(index, ORACLE), attempts, -m(n) + u)
            index += 1
            p_mc = hits / attempts
            se = math.sqrt(max(p * (1.0 - p), 1e-300) / attempts)
            z = abs(p_mc - p) / se
            worst = max(worst, z)
            oracle.rows.append([n, u, p, p_mc, se, z])
    out.tables['oracle'] = oracle
    out.checks.append(TestReport('oracle_z', worst, 4.0, dict(attempts=attempts)))

    alpha = C0 / 2.0
    prof = alpha_profile(alpha, table, ctx.config.n_spine, dx=ctx.config.propagation_dx)
    c_fit, a_min = a_alpha_bound_constant(prof, alpha)
    out.checks.append(TestReport('a_alpha_bound_c', c_fit, 10.0))
    out.checks.append(TestReport.at_least('a_alpha_at_least_one', a_min, 1.0 - 1e-3))
    zero = alpha_profile(0.0, table, min(4, top), dx=ctx.config.propagation_dx)
    out.checks.append(TestReport('a_zero_exact', abs(zero(0.5) - 1.0), 0.0))
    out.certificates.update(
        tail_bound_constant=tail_bound_constant(table, top),
        c0_constant=fit_c0_constant(table),
    )
    out.tables['selftest'] = CsvTable(
        ['check', 'statistic', 'threshold'], [[c.name, c.statistic, c.threshold] for c in out.checks]
    )
    return out


def plus_delta(ctx):
    n, ln = ctx.n, l(ctx.n)
    delta = frac2(n)
    k = ctx.config.k_plus_delta
    pd = ctx.plus_delta(delta, compare_k=k + 2)
    law = pd.root_law
    x = leftmost(ln)
    spec = ConditionSpec.hard_wall(n)
    mu = mu_profile(n, ln)

    def job(i):
        return sample_conditioned_vertices(spec, ctx.table, ctx.stream(i, HARD_WALL), [x], ctx.kernels)[x] - mu

    sampled = SampleBatch(ctx.replicas(job, label='depth-l_n marginal'), 'h(x_ln) - mu')
    root_draws = SampleBatch(law.sample((np.arange(sampled.n_samples) + 0.5) / sampled.n_samples))
    out = Outcome()
    out.checks.append(TestReport('plus_delta_k_gap', pd.k_gap, 0.02, dict(k=k, compare_k=pd.k_compare)))
    out.checks.append(TestReport('root_law_mean', abs(law.mean()), 5.0))
    out.checks.append(TestReport('depth_ln_marginal_ks', ks_statistic(sampled, law.cdf), 0.05))

    rows = []
    for d in (0.0, 0.585):
        pdd = ctx.plus_delta(d)
        k_value, worst = kappa(pdd, ctx.table)
        out.checks.append(TestReport.within(f'kappa[{d}]', k_value, 1e-12, 10.0))
        out.checks.append(TestReport(f'kappa_integrand_max[{d}]', worst, 0.0))
        for frac in (0.25, 0.5, 0.75):
            value = a_alpha_delta(pdd, frac * C0, ctx.table, ctx.config.n_spine)
            out.checks.append(TestReport.within(f'a_alpha_delta[{d},{frac}]', value, 1e-12, 100.0))
            rows.append([d, frac * C0, value, k_value])
    out.tables['plus_delta_constants'] = CsvTable(['delta', 'alpha', 'a_alpha_delta', 'kappa'], rows)
    out.tables['plus_delta_root'] = CsvTable(
        ['x', 'log_density'], [[xv, lv] for xv, lv in zip(law.density.x, law.density.log_values)]
    )
    out.certificates.update(delta=delta, root_mean=law.mean(), root_var=law.var(),
                            w1_sampled_vs_root=empirical_wp(sampled, root_draws))
    return out


def delta_scan(ctx):
    deltas = [0.0, 0.25, 0.5, 0.75]
    _, pairs = delta_dependence(deltas, ctx.config.k_plus_delta, ctx.table, ctx.config.propagation_dx)
    out = Outcome()
    out.tables['delta_scan'] = CsvTable(['delta_a', 'delta_b', 'w1', 'w1_centered'], [list(p) for p in pairs])
    out.certificates['max_w1'] = max(p[2] for p in pairs)
    out.certificates['max_w1_centered'] = max(p[3] for p in pairs)
    return out


EXPERIMENTS = {
    'profile': profile,
    'tails': tails,
    'covariance': covariance,
    'minimum': minimum,
    'maximum': maximum,
    'martingale': martingale,
    'mean': mean,
    'coupling': coupling,
    'fixation': fixation,
    'local_limit': local_limit,
    'singularity': singularity,
    'tables_selftest': tables_selftest,
    'plus_delta': plus_delta,
    'delta_scan': delta_scan,
}

# reference (n, replicas) per experiment; n is the tree depth (coupling and
# fixation: the branch depth)
DEFAULTS = {
    'profile': (16, 2000),
    'tails': (16, 2000),
    'covariance': (16, 2000),
    'minimum': (20, 2000),
    'maximum': (20, 2000),
    'martingale': (18, 100),
    'mean': (18, 500),
    'coupling': (14, 10000),
    'fixation': (12, 10000),
    'local_limit': (20, 2000),
    'singularity': (16, 2000),
    'tables_selftest': (4, 1_000_000),
    'plus_delta': (18, 2000),
    'delta_scan': (18, 1),
}

# experiments that hold a full depth-n field per replica
FULL_FIELD = {'profile', 'covariance', 'minimum', 'maximum', 'martingale', 'mean', 'singularity',
              'coupling', 'local_limit'}

# smallest n each experiment is defined for
MIN_DEPTH = {
    'profile': 1,
    'tails': 2,
    'covariance': 1,
    'minimum': 1,
    # the centering uses log(log2 n)
    'maximum': 3,
    'martingale': 1,
    'mean': 1,
    # two gradient depths for the decay fit
    'coupling': GRADIENT_DEPTHS.start + 1,
    # eta fixation compares depths r and r - 2
    'fixation': 2,
    # the ball around the leaf must sit below depth l(n)
    'local_limit': 6,
    'singularity': 1,
    'tables_selftest': 0,
    'plus_delta': 1,
    'delta_scan': 0,
}
