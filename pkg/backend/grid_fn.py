"""Log-domain tabulated functions on uniform grids."""

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp, ndtr

RULE_QUADRATIC = 'quadratic'
RULE_ZERO = 'zero'

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def log_phi(z):
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * z * z - LOG_SQRT_2PI


def _lerp_log(a, b, w):
    with np.errstate(invalid='ignore'):
        out = a + w * (b - a)
    bad = np.isneginf(a) | np.isneginf(b)
    if np.any(bad):
        edge = np.where(w <= 0.0, a, np.where(w >= 1.0, b, -np.inf))
        out = np.where(bad, edge, out)
    return out


@dataclass(frozen=True)
class GridFn:
    """A nonnegative function stored as natural-log values on x0 + i*dx.

    Left of x0 the function equals exp(left_plateau). Right of the last
    finite node it either continues by quadratic extrapolation of the log
    (slope and curvature clamped to be nonpositive) or is zero.
    """
    x0: float
    dx: float
    log_values: np.ndarray
    left_plateau: float = 0.0
    right_rule: str = RULE_QUADRATIC

    def __post_init__(self):
        if self.dx <= 0:
            raise ValueError(f"grid spacing must be positive, got {self.dx}")
        if self.right_rule not in (RULE_QUADRATIC, RULE_ZERO):
            raise ValueError(f"unknown right rule {self.right_rule!r}")
        if np.isnan(self.log_values).any():
            raise ValueError("log values contain NaN")

    @property
    def size(self):
        return len(self.log_values)

    @property
    def x(self):
        return self.x0 + self.dx * np.arange(self.size)

    @property
    def x_end(self):
        return self.x0 + self.dx * (self.size - 1)

    @property
    def last_finite(self):
        finite = np.flatnonzero(np.isfinite(self.log_values))
        return int(finite[-1]) if finite.size else -1

    def _edge(self):
        if self.right_rule == RULE_ZERO:
            return self.size - 1
        return self.last_finite

    def _extrapolate(self, x, e):
        if e < 0:
            return np.full_like(x, -np.inf)
        lv = self.log_values
        f0 = lv[e]
        d1 = d2 = 0.0
        if e >= 1 and np.isfinite(lv[e - 1]):
            d1 = min((f0 - lv[e - 1]) / self.dx, 0.0)
            if e >= 2 and np.isfinite(lv[e - 2]):
                d2 = min((f0 - 2.0 * lv[e - 1] + lv[e - 2]) / self.dx ** 2, 0.0)
        elif e >= 1:
            return np.full_like(x, -np.inf)
        s = x - (self.x0 + e * self.dx)
        return f0 + d1 * s + 0.5 * d2 * s * s

    def __call__(self, x):
        scalar = np.ndim(x) == 0
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        pos = (x - self.x0) / self.dx
        out = np.empty_like(pos)

        left = pos < 0.0
        out[left] = self.left_plateau

        e = self._edge()
        inside = ~left & (pos <= e)
        if np.any(inside):
            p = pos[inside]
            if e == 0:
                out[inside] = self.log_values[0]
            else:
                i = np.minimum(np.floor(p).astype(np.int64), e - 1)
                out[inside] = _lerp_log(self.log_values[i], self.log_values[i + 1], p - i)

        beyond = ~left & ~inside
        if np.any(beyond):
            if self.right_rule == RULE_ZERO:
                out[beyond] = -np.inf
            else:
                out[beyond] = self._extrapolate(x[beyond], e)

        return float(out[0]) if scalar else out

    def node_index(self, x):
        """Index of the grid node at x, or None when x is not a node."""
        pos = (x - self.x0) / self.dx
        i = int(round(pos))
        if abs(pos - i) > 1e-6 or not 0 <= i < self.size:
            return None
        return i


# --- Log-domain quadrature ---

def log_trapz(log_f, dx):
    """log of the trapezoid integral of exp(log_f) over a uniform grid."""
    log_f = np.asarray(log_f, dtype=np.float64)
    if log_f.size == 0:
        return -np.inf
    if log_f.size == 1:
        return -np.inf
    w = np.zeros_like(log_f)
    w[0] = w[-1] = -math.log(2.0)
    return float(logsumexp(log_f + w) + math.log(dx))


def normalize_log_density(log_f, dx):
    total = log_trapz(log_f, dx)
    if not np.isfinite(total):
        return None
    return np.asarray(log_f) - total


def gauss_weights(dx, half_width):
    """Trapezoid weights of the standard normal on [-half_width, half_width],
    rescaled to sum to one so constants are preserved exactly."""
    k = int(round(half_width / dx))
    z = dx * np.arange(-k, k + 1)
    w = np.exp(log_phi(z)) * dx
    w[0] *= 0.5
    w[-1] *= 0.5
    return z, w / w.sum()


def log_gauss_smooth(log_f, dx, half_width, pad_left=-np.inf, pad_right=-np.inf):
    """log of the Gaussian smoothing of exp(log_f) on the same grid.

    Uses a sliding window over the padded input and a log-sum-exp per output,
    so it works for values far outside double range.
    """
    log_f = np.asarray(log_f, dtype=np.float64)
    z, w = gauss_weights(dx, half_width)
    k = (len(z) - 1) // 2
    padded = np.concatenate([np.full(k, pad_left), log_f, np.full(k, pad_right)])
    log_w = np.log(w)
    out = np.empty_like(log_f)
    chunk = max(1, 2_000_000 // len(z))
    windows = sliding_window_view(padded, len(z))
    for lo in range(0, len(log_f), chunk):
        block = windows[lo:lo + chunk] + log_w
        out[lo:lo + chunk] = logsumexp(block, axis=1)
    return out


def log_gauss_transfer(x_in, log_mass, x_out):
    """log sum_i exp(log_mass[i]) phi(x_out - x_in[i]) for scattered inputs."""
    x_in = np.asarray(x_in, dtype=np.float64)
    log_mass = np.asarray(log_mass, dtype=np.float64)
    x_out = np.asarray(x_out, dtype=np.float64)
    out = np.empty_like(x_out)
    chunk = max(1, 4_000_000 // max(1, x_in.size))
    for lo in range(0, x_out.size, chunk):
        w = x_out[lo:lo + chunk, None]
        out[lo:lo + chunk] = logsumexp(log_mass[None, :] + log_phi(w - x_in[None, :]), axis=1)
    return out


# --- Inverse CDF on a grid ---

def cdf_tables(log_density, dx):
    """Left and right cumulative masses of a tabulated log density.

    Cells with an infinite endpoint carry no mass, so the support starts and
    ends on finite nodes. Returns (lower, upper, closed): lower[i] is the mass
    left of node i, upper[i] the mass right of it, both normalized, and closed
    flags the cells that carry mass.
    """
    log_density = np.asarray(log_density, dtype=np.float64)
    a, b = log_density[:-1], log_density[1:]
    closed = np.isfinite(a) & np.isfinite(b)
    log_cell = np.full(a.shape, -np.inf)
    log_cell[closed] = np.logaddexp(a[closed], b[closed])
    shift = log_cell.max()
    if not np.isfinite(shift):
        return None
    cell = np.exp(log_cell - shift)
    total = cell.sum()
    lower = np.concatenate([[0.0], np.cumsum(cell)]) / total
    upper = np.concatenate([np.cumsum(cell[::-1])[::-1], [0.0]]) / total
    return lower, upper, closed


def quantiles_from_tables(x, lower, upper, closed, z):
    """Quantiles at standard normal scores z, inverting the lower CDF for
    z <= 0 and the upper tail for z > 0 so both tails keep precision."""
    keep = np.zeros(len(x), dtype=bool)
    keep[:-1] |= closed
    keep[1:] |= closed
    xs, lo, up = x[keep], lower[keep], upper[keep]
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    neg = z <= 0
    out[neg] = np.interp(ndtr(z[neg]), lo, xs)
    out[~neg] = np.interp(ndtr(-z[~neg]), up[::-1], xs[::-1])
    return out


def density_moments(law_x, log_density, dx):
    """Mean and variance of a normalized tabulated density (Riemann sum)."""
    p = np.exp(log_density) * dx
    total = p.sum()
    mean = float(np.dot(p, law_x) / total)
    var = float(np.dot(p, (law_x - mean) ** 2) / total)
    return mean, var
