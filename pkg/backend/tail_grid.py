"""Minimum-survival tables S_k and the tail functions derived from them.

S_k(x) is the probability that all 2^k leaves of a BRW started at 0 are at
least x. Independence of the two subtrees gives

    S_k(x) = ( integral phi(z) S_{k-1}(x - z) dz )^2,

which is evaluated here level by level on a uniform grid, in the log domain.
"""

import hashlib
import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, logsumexp

from backend.core_field import C0, m
from backend.errors import CorruptCacheError, GridTooNarrowError, VersionMismatchError
from backend.grid_fn import RULE_QUADRATIC, RULE_ZERO, GridFn, gauss_weights
from config.settings import CACHE_DIR, DX, GRID_LEFT_MARGIN, GRID_RIGHT_EDGE, KERNEL_HALF_WIDTH

logger = logging.getLogger(__name__)

INF = 'inf'

FORMAT_VERSION = 1
MAGIC = b'HWTAIL\x00\x01'
_HEADER = struct.Struct('<8sIIddq')
_CHECKSUM_BYTES = 8

LOG_FLOOR = -1.0e4
Q_FLOOR = 1e-25
_LOG_Q_FLOOR_EDGE = math.log1p(-Q_FLOOR)

# S-form blocks: outputs per block and the largest log drop allowed inside one
_BLOCK = 512
_BLOCK_SPAN = 600.0


@dataclass(frozen=True)
class GridSpec:
    x0: float
    dx: float
    length: int

    @classmethod
    def for_depth(cls, n, dx=DX, left_margin=GRID_LEFT_MARGIN, right_edge=GRID_RIGHT_EDGE):
        if dx > 0.02:
            raise GridTooNarrowError(f"grid spacing {dx} is coarser than 0.02")
        x0 = -dx * math.ceil((m(n) + left_margin) / dx)
        length = int(round((right_edge - x0) / dx)) + 1
        return cls(x0, dx, length)

    @property
    def x_end(self):
        return self.x0 + self.dx * (self.length - 1)

    @property
    def x(self):
        return self.x0 + self.dx * np.arange(self.length)


def build_digest(n, spec, half_width=KERNEL_HALF_WIDTH):
    text = f"v{FORMAT_VERSION}|N={n}|x0={spec.x0!r}|dx={spec.dx!r}|L={spec.length}|hw={half_width!r}"
    return hashlib.blake2b(text.encode(), digest_size=16).hexdigest()


@dataclass(frozen=True)
class TailTable:
    max_depth: int
    grid: GridSpec
    log_s: np.ndarray
    build_digest: str
    _fns: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.log_s.shape != (self.max_depth + 1, self.grid.length):
            raise ValueError(f"table shape {self.log_s.shape} does not match depth and grid")
        self.log_s.setflags(write=False)
        fns = [
            GridFn(self.grid.x0, self.grid.dx, row, 0.0, RULE_ZERO if k == 0 else RULE_QUADRATIC)
            for k, row in enumerate(self.log_s)
        ]
        object.__setattr__(self, '_fns', fns)

    @property
    def grid_spec(self):
        return (self.grid.x0, self.grid.dx, self.grid.length)

    @property
    def n_ref(self):
        return self.max_depth

    def S(self, k):
        if not 0 <= k <= self.max_depth:
            raise ValueError(f"depth {k} outside table range [0, {self.max_depth}]")
        return self._fns[k]


# --- Construction ---

def _step_level(spec):
    row = np.zeros(spec.length)
    row[spec.x > 0.5 * spec.dx] = -np.inf
    return row


def _closed_form_level_one(spec):
    return 2.0 * log_ndtr(-spec.x)


def _finish_level(row):
    row = np.minimum(row, 0.0)
    row = np.minimum.accumulate(row)
    row[row < LOG_FLOOR] = -np.inf
    row[row > _LOG_Q_FLOOR_EDGE] = 0.0
    return row


def _smooth_s_form(padded, w, start, stop, k):
    """log of the smoothing for outputs [start, stop] by per-block rescaling.

    `padded` is nonincreasing, so the largest value in the window of output i
    is padded[i]; a block is cut before the log values drop by more than
    _BLOCK_SPAN so no output loses its own dominant terms to underflow.
    """
    out = np.full(stop - start + 1, -np.inf)
    i = start
    while i <= stop:
        top = padded[i]
        if not np.isfinite(top):
            break
        j_max = min(stop, i + _BLOCK - 1)
        drop = top - padded[i:j_max + 1]
        j = i + int(np.searchsorted(drop, _BLOCK_SPAN, side='right')) - 1
        j = max(j, i)
        seg = np.exp(padded[i:j + 2 * k + 1] - top)
        conv = np.convolve(seg, w, mode='valid')
        with np.errstate(divide='ignore'):
            out[i - start:j - start + 1] = np.log(conv) + top
        i = j + 1
    return out


def _next_level(prev_fn, spec, w):
    k = (len(w) - 1) // 2
    length = spec.length
    right = prev_fn(spec.x_end + spec.dx * np.arange(1, k + 1))
    padded = np.concatenate([np.zeros(k), prev_fn.log_values, right])
    q = -np.expm1(padded)

    out = np.full(length, -np.inf)
    active = np.flatnonzero(q > 0.0)
    if active.size == 0:
        return np.zeros(length)
    lo = max(0, int(active[0]) - 2 * k)
    out[:lo] = 0.0
    finite = np.flatnonzero(np.isfinite(padded))
    hi = min(length - 1, int(finite[-1]))
    if hi < lo:
        return out

    half = np.flatnonzero(q >= 0.5)
    q_end = min(int(half[0]), hi) if half.size else hi
    s_start = q_end + 1
    if q_end >= lo:
        qbar = np.convolve(q[lo:q_end + 2 * k + 1], w, mode='valid')
        small = qbar < 0.5
        if not small.all():
            s_start = lo + int(np.argmin(small))
        n_q = s_start - lo
        out[lo:s_start] = 2.0 * np.log1p(-qbar[:n_q])

    if s_start <= hi:
        out[s_start:hi + 1] = 2.0 * _smooth_s_form(padded, w, s_start, hi, k)
    return out


def build_tail_table(n, dx=DX, left_margin=GRID_LEFT_MARGIN, right_edge=GRID_RIGHT_EDGE,
                     half_width=KERNEL_HALF_WIDTH):
    """Tabulate S_0..S_n on [-m(n) - left_margin, right_edge]."""
    if n < 1:
        raise ValueError(f"table depth must be at least 1, got {n}")
    spec = GridSpec.for_depth(n, dx, left_margin, right_edge)
    _, w = gauss_weights(dx, half_width)
    log_s = np.empty((n + 1, spec.length))
    log_s[0] = _step_level(spec)
    log_s[1] = _finish_level(_closed_form_level_one(spec))

    logger.info(f"[Tables] Building S_0..S_{n} on {spec.length} nodes (dx={dx})")
    for k in range(2, n + 1):
        prev = GridFn(spec.x0, spec.dx, log_s[k - 1], 0.0, RULE_QUADRATIC)
        log_s[k] = _finish_level(_next_level(prev, spec, w))
        left_q = -math.expm1(log_s[k, 0])
        if left_q > 1e-12:
            raise GridTooNarrowError(
                f"S_{k} is below 1 - 1e-12 at the left grid edge (q = {left_q:.3e}); widen the grid"
            )
        if k % 64 == 0:
            logger.info(f"[Tables] Level {k}/{n} done")

    return TailTable(n, spec, log_s, build_digest(n, spec, half_width))


# --- Tail functions ---

def _check_depth(table, n):
    if not 1 <= n <= table.max_depth:
        raise ValueError(f"depth {n} outside [1, {table.max_depth}]")


def p_n(table, n, u):
    """log P(min over depth-n leaves >= -m(n) + u)."""
    if n == INF:
        return p_inf_proxy(table, u)
    _check_depth(table, n)
    return table.S(n)(-m(n) + np.asarray(u, dtype=np.float64))


def p_inf_proxy(table, u, n_ref=None):
    """p_n at the reference depth, standing in for the n -> infinity limit."""
    n_ref = table.n_ref if n_ref is None else n_ref
    _check_depth(table, n_ref)
    return table.S(n_ref)(-m(n_ref) + np.asarray(u, dtype=np.float64))


def cauchy_gap(table, n_ref=None, lo=-5.0, hi=5.0, points=201):
    """sup over [lo, hi] of |p_{n_ref/2} - p_{n_ref}| in probability."""
    n_ref = table.n_ref if n_ref is None else n_ref
    u = np.linspace(lo, hi, points)
    a = np.exp(p_n(table, max(1, n_ref // 2), u))
    b = np.exp(p_n(table, n_ref, u))
    return float(np.max(np.abs(a - b)))


def log_deriv_p(table, n, u):
    """Centered difference of log p_n (or the proxy) at spacing dx."""
    h = table.grid.dx
    u = np.asarray(u, dtype=np.float64)
    return (p_n(table, n, u + h) - p_n(table, n, u - h)) / (2.0 * h)


def q_n(table, n, u):
    """1 - p_n(-u), evaluated without cancellation near 1."""
    return -np.expm1(p_n(table, n, -np.asarray(u, dtype=np.float64)))


# --- Checks and fitted constants ---

def recursion_residual(table, k, points=100):
    """Largest relative gap between S_k and the smoothed-squared S_{k-1},
    recomputed directly on `points` grid nodes of the active range."""
    if k < 2:
        raise ValueError("the recursion is tabulated from k = 2 on")
    row = table.log_s[k]
    active = np.flatnonzero(np.isfinite(row) & (row < 0.0))
    if active.size == 0:
        return 0.0
    idx = np.unique(np.linspace(active[0], active[-1], points).round().astype(np.int64))
    z, w = gauss_weights(table.grid.dx, KERNEL_HALF_WIDTH)
    x = table.grid.x[idx]
    prev = table.S(k - 1)(x[:, None] - z[None, :])
    direct = 2.0 * logsumexp(prev + np.log(w)[None, :], axis=1)
    stored = row[idx]
    ok = np.isfinite(direct) & (direct >= LOG_FLOOR / 2)
    if not ok.any():
        return 0.0
    return float(np.max(np.abs(np.expm1(stored[ok] - direct[ok]))))


def fixed_point_residual(table, lo=-5.0, hi=5.0, points=101, n_ref=None):
    """sup |log p(u) - 2 log integral phi(z) p(u - c0 - z) dz| for the proxy."""
    z, w = gauss_weights(table.grid.dx, KERNEL_HALF_WIDTH)
    u = np.linspace(lo, hi, points)
    lhs = p_inf_proxy(table, u, n_ref)
    inner = p_inf_proxy(table, (u[:, None] - C0 - z[None, :]).ravel(), n_ref).reshape(len(u), len(z))
    rhs = 2.0 * logsumexp(inner + np.log(w)[None, :], axis=1)
    return float(np.max(np.abs(lhs - rhs)))


def fit_c0_constant(table, n=None, lo=6.0, hi=12.0, points=61):
    """Estimate C_0 in q_n(u) ~ C_0 u exp(-c0 u) as a median ratio."""
    n = table.max_depth if n is None else n
    u = np.linspace(lo, hi, points)
    ratio = q_n(table, n, u) / (u * np.exp(-C0 * u))
    return float(np.median(ratio))


def tail_bound_constant(table, n, lo=-5.0, hi=8.0, points=131):
    """Smallest C with -u+/s - C <= (log p_n)' <= -u+/s + C log(u v e),
    where s = 1 - 2^-n."""
    u = np.linspace(lo, hi, points)
    d = log_deriv_p(table, n, u)
    drift = -np.maximum(u, 0.0) / (1.0 - 2.0 ** (-n))
    below = -(d - drift)
    above = (d - drift) / np.log(np.maximum(u, math.e))
    return float(max(np.max(below), np.max(above), 0.0))


def log_deriv_convergence(table, n_a, n_b, lo=-3.0, hi=3.0, points=121):
    u = np.linspace(lo, hi, points)
    return float(np.max(np.abs(log_deriv_p(table, n_a, u) - log_deriv_p(table, n_b, u))))


# --- Cache ---

def save_table(table, path):
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, table.max_depth,
                          table.grid.x0, table.grid.dx, table.grid.length)
    body = header + np.ascontiguousarray(table.log_s, dtype='<f8').tobytes()
    checksum = hashlib.blake2b(body, digest_size=_CHECKSUM_BYTES).digest()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, 'wb') as fh:
        fh.write(body + checksum)
    os.replace(tmp, path)
    logger.info(f"[Cache] Saved S_0..S_{table.max_depth} to {path}")


def load_table(path, half_width=KERNEL_HALF_WIDTH):
    with open(path, 'rb') as fh:
        data = fh.read()
    if len(data) < _HEADER.size + _CHECKSUM_BYTES:
        raise CorruptCacheError(f"{path}: file too short ({len(data)} bytes)")
    magic, version, n, x0, dx, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCacheError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    expected = _HEADER.size + 8 * (n + 1) * length + _CHECKSUM_BYTES
    if len(data) != expected:
        raise CorruptCacheError(f"{path}: {len(data)} bytes, expected {expected}")
    body, checksum = data[:-_CHECKSUM_BYTES], data[-_CHECKSUM_BYTES:]
    if hashlib.blake2b(body, digest_size=_CHECKSUM_BYTES).digest() != checksum:
        raise CorruptCacheError(f"{path}: checksum mismatch")
    log_s = np.frombuffer(body, dtype='<f8', offset=_HEADER.size).reshape(n + 1, length).astype(np.float64)
    spec = GridSpec(x0, dx, length)
    return TailTable(n, spec, log_s, build_digest(n, spec, half_width))


def cache_path(n, spec, cache_dir=CACHE_DIR):
    return os.path.join(cache_dir, f"tail_N{n}_{build_digest(n, spec)[:16]}.bin")


def ensure_table(n, dx=DX, cache_dir=CACHE_DIR):
    """Load S_0..S_n from the cache, building and saving it on a miss."""
    spec = GridSpec.for_depth(n, dx)
    path = cache_path(n, spec, cache_dir)
    if os.path.exists(path):
        table = load_table(path)
        if table.build_digest == build_digest(n, spec):
            logger.info(f"[Cache] Hit {path}")
            return table
        logger.warning(f"[Cache] {path} was built for another grid, rebuilding")
    else:
        logger.info(f"[Cache] Miss for N={n}, dx={dx}")
    table = build_tail_table(n, dx)
    save_table(table, path)
    return table
