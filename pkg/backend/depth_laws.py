"""Deterministic grid laws: spine marginals, the P^{+,delta} root law and the
constants built on them (A_alpha, A_alpha^delta, kappa_delta, max centering).

Along a spine x_0, x_1, ... of the conditioned tree the height is a Markov
chain with kernel

    K_j(v, dw) = phi(w - v) g_{j+1}(w) / sqrt(g_j(v)) dw,

where g_j(w) is the survival factor of a depth-j vertex at height w.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import ndtri

from backend.core_field import C0, frac2, m, nprime
from backend.errors import InsufficientSamplesError, WindowEscapeError
from backend.grid_fn import (
    RULE_ZERO, GridFn, cdf_tables, density_moments, log_gauss_smooth, log_gauss_transfer,
    normalize_log_density, quantiles_from_tables,
)
from backend.tail_grid import INF, log_deriv_p, p_inf_proxy
from config.settings import N_SPINE, PROPAGATION_DX

logger = logging.getLogger(__name__)

# log-density drop below the peak that is still carried along
_TRIM = 80.0
_COARSE_STEP = 0.2
_COARSE_INPUTS = 400
_EDGE_MASS = 1e-12
_MAX_REACH_GAIN = 1.0e6
_SMOOTH_HALF_WIDTH = 8.5


# --- Survival factors along a spine ---

class SpineTilt:
    """g_j(w): survival factor of a depth-j spine vertex at height w (log)."""

    def log_g(self, j, w):
        raise NotImplementedError


class FlatTilt(SpineTilt):
    def log_g(self, j, w):
        return np.zeros_like(np.asarray(w, dtype=np.float64))


class FiniteTilt(SpineTilt):
    """g_j(w) = S_{n-j}(t - w) for the depth-n law with threshold t."""

    def __init__(self, n, t, table):
        self.n, self.t, self.table = n, t, table

    def log_g(self, j, w):
        return self.table.S(self.n - j)(self.t - np.asarray(w, dtype=np.float64))


class InfiniteTilt(SpineTilt):
    """g_j(w) = p_inf(u - c0 j - w)."""

    def __init__(self, u, table):
        self.u, self.table = u, table

    def log_g(self, j, w):
        return p_inf_proxy(self.table, self.u - C0 * j - np.asarray(w, dtype=np.float64))


# --- Laws on a grid ---

@dataclass(frozen=True)
class DepthLaw:
    depth: int
    density: GridFn = None
    atom: float = None

    def __post_init__(self):
        if (self.density is None) == (self.atom is None):
            raise ValueError("a depth law is either a density or a point mass")

    @classmethod
    def point_mass(cls, depth, value):
        return cls(depth, None, float(value))

    @property
    def x(self):
        return np.array([self.atom]) if self.atom is not None else self.density.x

    def mean(self):
        if self.atom is not None:
            return self.atom
        return density_moments(self.density.x, self.density.log_values, self.density.dx)[0]

    def var(self):
        if self.atom is not None:
            return 0.0
        return density_moments(self.density.x, self.density.log_values, self.density.dx)[1]

    def moment(self, p, center=0.0):
        """E|X - center|^p."""
        if self.atom is not None:
            return abs(self.atom - center) ** p
        d = self.density
        w = np.exp(d.log_values) * d.dx
        return float(np.dot(w, np.abs(d.x - center) ** p) / w.sum())

    def mass(self):
        if self.atom is not None:
            return 1.0
        d = self.density
        lv = d.log_values
        return float(trapezoid(np.exp(lv), dx=d.dx))

    def cdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.atom is not None:
            return (x >= self.atom).astype(np.float64)
        d = self.density
        lower, _, _ = cdf_tables(d.log_values, d.dx)
        return np.interp(x, d.x, lower, left=0.0, right=1.0)

    def quantile(self, z):
        """Quantile at standard normal scores z."""
        z = np.asarray(z, dtype=np.float64)
        if self.atom is not None:
            return np.full_like(z, self.atom)
        d = self.density
        lower, upper, closed = cdf_tables(d.log_values, d.dx)
        return quantiles_from_tables(d.x, lower, upper, closed, z)

    def sample(self, uniforms):
        return self.quantile(ndtri(np.asarray(uniforms, dtype=np.float64)))

    def log_density(self, x):
        return self.density(x)


def w1_between(a, b, step=None):
    """W_1 between two depth laws as the integral of |F_a - F_b|."""
    step = step or min(
        a.density.dx if a.density else 1.0, b.density.dx if b.density else 1.0, 0.05
    )
    lo = min(a.x.min(), b.x.min()) - step
    hi = max(a.x.max(), b.x.max()) + step
    xs = np.arange(lo, hi + step, step)
    return float(trapezoid(np.abs(a.cdf(xs) - b.cdf(xs)), xs))


def centered(law):
    """Same law shifted to mean zero."""
    mu = law.mean()
    if law.atom is not None:
        return DepthLaw.point_mass(law.depth, 0.0)
    d = law.density
    return DepthLaw(law.depth, GridFn(d.x0 - mu, d.dx, d.log_values, d.left_plateau, d.right_rule))


# --- Propagation ---

def _window(src_x, src, tilt, j, dx):
    # a source at v cannot send relevant mass beyond v + sqrt(2 (-log g(v) + trim))
    reach_gain = np.minimum(-tilt.log_g(j + 1, src_x), _MAX_REACH_GAIN)
    up = src_x + np.sqrt(2.0 * (np.maximum(reach_gain, 0.0) + _TRIM))
    lo = float(src_x.min()) - math.sqrt(2.0 * _TRIM) - 1.0
    hi = float(up.max()) + 1.0
    if (hi - lo) / dx <= 4000:
        return lo, hi, lo, hi
    if src_x.size > _COARSE_INPUTS:
        idx = np.unique(np.linspace(0, src_x.size - 1, _COARSE_INPUTS).round().astype(np.int64))
        cx, cs = src_x[idx], src[idx] + math.log(src_x.size / idx.size)
    else:
        cx, cs = src_x, src
    wc = np.arange(lo, hi + _COARSE_STEP, _COARSE_STEP)
    coarse = log_gauss_transfer(cx, cs, wc) + tilt.log_g(j + 1, wc)
    keep = np.flatnonzero(coarse > np.max(coarse) - _TRIM)
    a = max(lo, wc[keep[0]] - 2.0)
    b = min(hi, wc[keep[-1]] + 2.0)
    return a, b, lo, hi


def propagate_depth_law(law, tilt, dx=PROPAGATION_DX):
    """Law of the spine one generation deeper.

    f_{j+1}(w) = log integral exp(f_j(v)) phi(w - v) / sqrt(g_j(v)) dv
                 + log g_{j+1}(w), renormalized.
    The output window is placed where the mass can reach, found with a coarse
    pass when the reachable range is wide.
    """
    j = law.depth
    if law.atom is not None:
        src_x = np.array([law.atom])
        src = np.zeros(1)
    else:
        d = law.density
        src_x = d.x
        src = d.log_values + math.log(d.dx)
    with np.errstate(invalid='ignore'):
        src = src - 0.5 * tilt.log_g(j, src_x)
    src = np.where(np.isnan(src), -np.inf, src)
    top = np.max(src)
    if not np.isfinite(top):
        raise WindowEscapeError(f"depth-{j} law has no mass left to propagate")
    keep = np.isfinite(src) & (src > top - _TRIM)
    src_x, src = src_x[keep], src[keep]

    a, b, lo, hi = _window(src_x, src, tilt, j, dx)
    a = dx * math.floor(a / dx)
    b = dx * math.ceil(b / dx)
    w = a + dx * np.arange(int(round((b - a) / dx)) + 1)
    f = log_gauss_transfer(src_x, src, w) + tilt.log_g(j + 1, w)
    normalized = normalize_log_density(f, dx)
    if normalized is None:
        raise WindowEscapeError(f"depth-{j + 1} law vanished inside [{a:.2f}, {b:.2f}]")
    edge = max(normalized[0], normalized[-1]) + math.log(dx)
    if edge > math.log(_EDGE_MASS):
        raise WindowEscapeError(
            f"depth-{j + 1} law carries mass {math.exp(edge):.2e} at the window edge [{a:.2f}, {b:.2f}]"
        )
    return DepthLaw(j + 1, GridFn(a, dx, normalized, -np.inf, RULE_ZERO))


def spine_laws(spec, table, depth=None, dx=PROPAGATION_DX):
    """Marginal laws of h(x_0), ..., h(x_n) along one spine under `spec`."""
    if spec.is_infinite:
        if depth is None:
            raise ValueError("infinite-volume spine needs an explicit depth")
        tilt, n = InfiniteTilt(spec.u, table), depth
    else:
        tilt, n = FiniteTilt(spec.depth_n, spec.threshold, table), spec.depth_n
    laws = [DepthLaw.point_mass(0, spec.v)]
    for _ in range(n):
        laws.append(propagate_depth_law(laws[-1], tilt, dx))
    return laws


def mean_bound_constant(laws, u):
    """Smallest C with E h(x_k) <= u+ + C along the spine, and the least mean."""
    means = np.array([law.mean() for law in laws])
    return float(np.max(means - max(u, 0.0))), float(np.min(means))


# --- P^{+,delta} ---

@dataclass(frozen=True)
class PlusDeltaLaw:
    delta: float
    k_used: int
    root_law: DepthLaw
    k_gap: float = None
    k_compare: int = None


def _root_law(delta, k, table, dx):
    tilt = InfiniteTilt(C0 * k, table)
    law = DepthLaw.point_mass(0, -C0 * 2.0 ** (k + delta))
    for _ in range(k):
        law = propagate_depth_law(law, tilt, dx)
    d = law.density
    return DepthLaw(0, d)


def build_plus_delta(delta, k, table, compare_k=None, dx=PROPAGATION_DX):
    """Root law of P^{+,delta} from a depth-k construction.

    With compare_k the W_1 distance to the depth-compare_k construction is
    recorded as a convergence certificate.
    """
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"delta must lie in [0, 1), got {delta}")
    if k < 1:
        raise ValueError(f"construction depth must be positive, got {k}")
    root = _root_law(delta, k, table, dx)
    gap = None
    if compare_k is not None:
        gap = w1_between(root, _root_law(delta, compare_k, table, dx))
        logger.info(f"[Tables] P+ delta={delta:.4f}: W1(k={k}, k={compare_k}) = {gap:.3e}")
    return PlusDeltaLaw(delta, k, root, gap, compare_k)


def delta_dependence(deltas, k, table, dx=PROPAGATION_DX):
    """Pairwise W_1 between root laws for several deltas, raw and centered."""
    laws = {d: build_plus_delta(d, k, table, dx=dx).root_law for d in deltas}
    rows = []
    for i, d1 in enumerate(deltas):
        for d2 in deltas[i + 1:]:
            rows.append((d1, d2, w1_between(laws[d1], laws[d2]),
                         w1_between(centered(laws[d1]), centered(laws[d2]))))
    return laws, rows


# --- A_alpha ---

@dataclass(frozen=True)
class AlphaProfile:
    """u -> A_alpha(u) from a depth-n_spine backward recursion."""
    alpha: float
    n_spine: int
    log_h0: GridFn

    def log_value(self, u):
        n, a = self.n_spine, self.alpha
        u = np.asarray(u, dtype=np.float64)
        return a * (u - m(n)) - n * a * a / 2.0 + self.log_h0(m(n) - u)

    def __call__(self, u):
        if self.alpha == 0.0:
            return np.ones_like(np.asarray(u, dtype=np.float64)) if np.ndim(u) else 1.0
        out = np.exp(self.log_value(u))
        return float(out) if np.ndim(u) == 0 else out


def alpha_profile(alpha, table, n_spine=N_SPINE, u_lo=-10.0, u_hi=10.0, dx=PROPAGATION_DX):
    """Backward recursion for E^{up u}_n exp(alpha h(x_n)) on all u at once.

    In y = h - t, H_n(y) = exp(alpha y) and
    log H_j(y) = -log g_j(y)/2 + log integral phi(y' - y) g_{j+1}(y') H_{j+1}(y') dy'.
    """
    if n_spine > table.max_depth:
        raise ValueError(f"spine depth {n_spine} exceeds table depth {table.max_depth}")
    n = n_spine
    y_lo = -20.0
    y_hi = m(n) - u_lo + alpha * n + 8.0 * math.sqrt(n) + 20.0
    y0 = dx * math.floor(y_lo / dx)
    y = y0 + dx * np.arange(int(math.ceil((y_hi - y0) / dx)) + 1)

    def log_g(j):
        return table.S(n - j)(-y)

    log_h = alpha * y
    g_next = log_g(n)
    for j in range(n - 1, -1, -1):
        inner = log_gauss_smooth(g_next + log_h, dx, _SMOOTH_HALF_WIDTH)
        g_here = log_g(j)
        with np.errstate(invalid='ignore'):
            log_h = inner - 0.5 * g_here
        log_h = np.where(np.isfinite(g_here) & np.isfinite(inner), log_h, -np.inf)
        g_next = g_here
    if m(n) - u_hi < y_lo:
        raise WindowEscapeError(f"u = {u_hi} lies below the A_alpha grid")
    return AlphaProfile(alpha, n, GridFn(y0, dx, log_h, -np.inf, RULE_ZERO))


def a_alpha(u, alpha, table, n_spine=N_SPINE):
    """A_alpha(u) and the gap against the n_spine/2 recursion."""
    if alpha == 0.0:
        return 1.0, 0.0
    full = alpha_profile(alpha, table, n_spine)
    half = alpha_profile(alpha, table, max(1, n_spine // 2))
    value = full(u)
    grid = np.linspace(-3.0, 3.0, 61)
    gap = float(np.max(np.abs(full(grid) - half(grid))))
    return value, gap


def a_alpha_bound_constant(profile, alpha, lo=-3.0, hi=3.0, points=61):
    """Smallest C with A_alpha(u) <= C exp(alpha u+) on [lo, hi], and min A."""
    u = np.linspace(lo, hi, points)
    vals = profile(u)
    return float(np.max(vals / np.exp(alpha * np.maximum(u, 0.0)))), float(np.min(vals))


def _significant(law, drop=40.0):
    d = law.density
    lv = d.log_values
    keep = np.isfinite(lv) & (lv > lv.max() - drop)
    return d.x[keep], lv[keep], d.dx


def a_alpha_delta(pd, alpha, table, n_spine=N_SPINE, profile=None):
    """E^{+,delta}[exp(alpha h(0)) A_alpha(-h(0))] by quadrature on the root law."""
    if alpha == 0.0:
        return 1.0
    v, lv, dx = _significant(pd.root_law)
    profile = profile or alpha_profile(alpha, table, n_spine, u_lo=-v.max() - 1.0, u_hi=-v.min() + 1.0)
    integrand = lv + alpha * v + profile.log_value(-v)
    top = np.max(integrand)
    return float(math.exp(top) * np.sum(np.exp(integrand - top)) * dx)


def kappa(pd, table):
    """kappa_delta = -2^-delta E^{+,delta}[(log p_inf)'(-h(0))] and the
    largest value of the integrand (which is nonpositive)."""
    v, lv, dx = _significant(pd.root_law)
    deriv = log_deriv_p(table, INF, -v)
    w = np.exp(lv - lv.max())
    value = -(2.0 ** -pd.delta) * float(np.sum(w * deriv) / np.sum(w))
    return value, float(np.max(deriv))


# --- Extremes ---

def c1_constant(c0_const):
    """Constant term of the maximum centering given the left-tail constant."""
    if c0_const <= 0:
        raise InsufficientSamplesError(f"left-tail constant must be positive, got {c0_const}")
    return (math.log(c0_const) - math.log(C0) + math.log(math.log(2.0))) / C0


def max_centering(n, a_c0_delta, c0_const):
    """m_n^+ = 2 m(n') + log2(n)/c0 + log(log2 n)/c0 + log(A_{c0}^delta)/c0 + c1."""
    if n < 3:
        raise ValueError(f"maximum centering needs n >= 3, got {n}")
    l2 = math.log2(n)
    return (2.0 * m(nprime(n)) + l2 / C0 + math.log(l2) / C0
            + math.log(a_c0_delta) / C0 + c1_constant(c0_const))


def delta_of(n):
    return frac2(n)
