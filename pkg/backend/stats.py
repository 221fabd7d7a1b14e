"""Estimators and distributional checks shared by the experiments."""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp
from scipy.stats import expon, gumbel_r, ks_2samp, kstest, linregress

from backend.core_field import C0, common_ancestor_depth, level_slice
from backend.errors import EmptyBatchError, InsufficientSamplesError

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329
# kurtosis of the Gumbel law, for the standard error of its variance-implied scale
_GUMBEL_KURTOSIS = 5.4
MIN_EXTREME_SAMPLES = 500
MIN_COVARIANCE_REPLICAS = 200


@dataclass
class SampleBatch:
    values: np.ndarray
    label: str = ''

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()

    @property
    def n_samples(self):
        return self.values.size

    @cached_property
    def sorted(self):
        return np.sort(self.values)

    def require(self, minimum=1):
        if self.n_samples < minimum:
            raise EmptyBatchError(
                f"batch {self.label or '<unnamed>'} has {self.n_samples} samples, needs {minimum}"
            )
        return self

    def mean(self):
        return float(np.mean(self.require().values))

    def se(self):
        return float(np.std(self.require(2).values, ddof=1) / math.sqrt(self.n_samples))


@dataclass(frozen=True)
class TestReport:
    """One acceptance check: passed exactly when statistic <= threshold."""
    __test__ = False

    name: str
    statistic: float
    threshold: float
    metadata: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.statistic <= self.threshold)

    @classmethod
    def within(cls, name, value, lo, hi, **metadata):
        """Range check; the statistic is the distance outside [lo, hi]."""
        excess = max(lo - value, value - hi, 0.0)
        return cls(name, float(excess), 0.0, dict(metadata, value=float(value), lo=lo, hi=hi))

    @classmethod
    def at_least(cls, name, value, floor, **metadata):
        return cls.within(name, value, floor, math.inf, **metadata)

    def as_dict(self):
        return {
            'name': self.name,
            'statistic': self.statistic,
            'threshold': self.threshold,
            'passed': self.passed,
            'metadata': self.metadata,
        }


# --- Distances between samples ---

def _matched_sorted(a, b):
    """Sorted values of a and b at equal sizes; the larger batch is read at
    the mid-quantiles of the smaller one."""
    xa, xb = a.sorted, b.sorted
    if xa.size == xb.size:
        return xa, xb
    small, large = (xa, xb) if xa.size < xb.size else (xb, xa)
    idx = np.floor((np.arange(small.size) + 0.5) * large.size / small.size).astype(np.int64)
    picked = large[np.minimum(idx, large.size - 1)]
    return (small, picked) if xa.size < xb.size else (picked, small)


def empirical_wp(a, b, p=1.0):
    """One-dimensional W_p between two batches through order statistics."""
    if p < 1:
        raise ValueError(f"W_p needs p >= 1, got {p}")
    a.require()
    b.require()
    xa, xb = _matched_sorted(a, b)
    return float(np.mean(np.abs(xa - xb) ** p) ** (1.0 / p))


def ks_statistic(a, reference):
    """sup |F_a - F| against a CDF callable, or two-sample against a batch."""
    a.require()
    if isinstance(reference, SampleBatch):
        reference.require()
        return float(ks_2samp(a.values, reference.values).statistic)
    return float(kstest(a.values, reference).statistic)


# --- Field functionals ---

def martingale_sum(f, alpha, centering=(0.0, None)):
    """Leaf average of exp(alpha h - alpha m_shift - alpha^2 var_shift / 2).

    var_shift defaults to the depth of the field.
    """
    if alpha == 0.0:
        return 1.0
    m_shift, var_shift = centering
    var_shift = f.depth_n if var_shift is None else var_shift
    leaves = f.leaves
    log_terms = alpha * leaves - alpha * m_shift - 0.5 * alpha * alpha * var_shift
    return float(math.exp(logsumexp(log_terms) - math.log(leaves.size)))


@dataclass(frozen=True)
class CovarianceEstimate:
    x: int
    y: int
    branch_depth: int
    cov: float
    se: float


def covariance_estimate(fields, pairs, columns=None, min_replicas=MIN_COVARIANCE_REPLICAS):
    """Sample covariances of h(x), h(y) across replicas with standard errors.

    `fields` is a list of FieldSample or a (replicas, width) array; for an
    array, `columns` maps vertex indices to columns (identity by default).
    """
    values = np.asarray(fields if isinstance(fields, np.ndarray) else [f.values for f in fields])
    col = (lambda v: columns[v]) if columns is not None else (lambda v: v)
    count = values.shape[0]
    if count < min_replicas:
        raise InsufficientSamplesError(f"covariance needs {min_replicas} replicas, got {count}")
    out = []
    for x, y in pairs:
        a = values[:, col(x)] - values[:, col(x)].mean()
        b = values[:, col(y)] - values[:, col(y)].mean()
        products = a * b
        cov = float(products.sum() / (count - 1))
        se = float(products.std(ddof=1) / math.sqrt(count))
        out.append(CovarianceEstimate(x, y, common_ancestor_depth(x, y), cov, se))
    return out


def leaf_pair_with_branch(n, j, offset=0):
    """Two depth-n vertices whose common ancestor sits at depth j."""
    if not 0 <= j < n:
        raise ValueError(f"branch depth {j} outside [0, {n})")
    base = level_slice(n).start + offset
    return base, base + (1 << (n - j - 1))


# --- Extreme-value fits ---

@dataclass(frozen=True)
class ExponentialFit:
    rate: float
    rate_se: float
    ks: float
    n_samples: int


@dataclass(frozen=True)
class GumbelFit:
    location: float
    scale: float
    rate: float
    rate_se: float
    ks: float
    n_samples: int


def _require_extremes(batch):
    if batch.n_samples < MIN_EXTREME_SAMPLES:
        raise InsufficientSamplesError(
            f"extreme-value fit needs {MIN_EXTREME_SAMPLES} samples, got {batch.n_samples}"
        )


def fit_exponential(batch):
    """Maximum-likelihood Exp(rate) fit of a nonnegative batch."""
    _require_extremes(batch)
    x = batch.values
    rate = 1.0 / float(np.mean(x))
    ks = float(kstest(x, expon(scale=1.0 / rate).cdf).statistic)
    return ExponentialFit(rate, rate / math.sqrt(x.size), ks, x.size)


def fit_gumbel(batch):
    """Moment fit of a Gumbel law for maxima: scale from the variance."""
    _require_extremes(batch)
    x = batch.values
    sd = float(np.std(x, ddof=1))
    scale = sd * math.sqrt(6.0) / math.pi
    location = float(np.mean(x)) - EULER_GAMMA * scale
    rate = 1.0 / scale
    rate_se = rate * math.sqrt((_GUMBEL_KURTOSIS - 1.0) / (4.0 * x.size))
    ks = float(kstest(x, gumbel_r(loc=location, scale=scale).cdf).statistic)
    return GumbelFit(location, scale, rate, rate_se, ks, x.size)


def extreme_fits(batch, kind):
    if kind == 'exponential':
        return fit_exponential(batch)
    if kind == 'gumbel':
        return fit_gumbel(batch)
    raise ValueError(f"unknown extreme-value family {kind!r}")


def gumbel_cdf(u, rate=C0):
    return np.exp(-np.exp(-rate * np.asarray(u, dtype=np.float64)))


# --- Tail envelopes ---

@dataclass(frozen=True)
class TailEnvelope:
    """log P(side * (X - center) > s) ~ intercept - s^2 / (2 sigma2)."""
    side: int
    sigma2: float
    intercept: float
    points: int


def fit_tail_envelope(s, log_tail, side):
    """Least-squares Gaussian envelope of a log tail against s^2."""
    s = np.asarray(s, dtype=np.float64)
    log_tail = np.asarray(log_tail, dtype=np.float64)
    keep = np.isfinite(log_tail) & (s > 0)
    if keep.sum() < 3:
        raise InsufficientSamplesError("tail envelope needs at least three finite tail points")
    fit = linregress(s[keep] ** 2, log_tail[keep])
    sigma2 = -0.5 / fit.slope if fit.slope < 0 else math.inf
    return TailEnvelope(side, float(sigma2), float(fit.intercept), int(keep.sum()))


def empirical_tail_envelope(batch, center, side, min_count=10):
    """Envelope fit of an empirical tail, using s where at least min_count
    samples lie beyond."""
    x = side * (batch.require(2).values - center)
    x = np.sort(x[x > 0])
    if x.size < min_count + 3:
        raise InsufficientSamplesError(f"only {x.size} samples in the {side:+d} tail")
    s = x[:-min_count]
    log_tail = np.log((x.size - np.arange(s.size)) / batch.n_samples)
    return fit_tail_envelope(s, log_tail, side)


# --- Small helpers ---

def nondecreasing_within(means, ses, sigmas=3.0):
    """Largest violation of monotonicity in standard-error units (<= 0 is fine)."""
    means = np.asarray(means, dtype=np.float64)
    ses = np.asarray(ses, dtype=np.float64)
    drops = means[:-1] - means[1:]
    scale = np.sqrt(ses[:-1] ** 2 + ses[1:] ** 2)
    with np.errstate(divide='ignore', invalid='ignore'):
        z = np.where(scale > 0, drops / scale, np.where(drops > 0, np.inf, 0.0))
    return float(np.max(z) - sigmas) if z.size else -sigmas


def coefficient_of_variation(values):
    """sd / |mean|; infinite when the mean is zero."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise InsufficientSamplesError(f"coefficient of variation needs 2 values, got {values.size}")
    center = abs(float(np.mean(values)))
    if center == 0.0:
        return math.inf
    return float(np.std(values, ddof=1) / center)
