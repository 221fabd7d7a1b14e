"""Sequential h-transform samplers for the conditioned field.

Given its parent, each child is drawn from the Gaussian step reweighted by the
survival of the child's own subtree:

    finite depth n:  phi(w - parent) * S_r(t - w),  r = n - depth(child)
    infinite volume: phi(w - parent) * p_inf(u - c0 * depth(child) - w)

Both are written in a relative coordinate y = w - anchor, a = parent - anchor,
so one quantile table per remaining depth serves every threshold.
"""

import logging
import math
import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtri

from backend.core_field import (
    C0, TAG_ORACLE, TAG_ROOT, FieldSample, depth, leftmost, level_slice, m, open_uniforms, parent,
    sample_brw_batch, tree_size,
)
from backend.errors import BudgetExceededError, DegenerateKernelError
from backend.grid_fn import (
    RULE_ZERO, GridFn, cdf_tables, log_phi, normalize_log_density, quantiles_from_tables,
)
from backend.tail_grid import INF

logger = logging.getLogger(__name__)

Z_MAX = 8.5
Z_STEP = 0.05
A_MIN = -20.0
A_STEP_NODES = 5
# log S below this is treated as unreachable when choosing the table's lower edge
_REACH_LOG = -200.0
# survival within one ulp of 1 leaves the Gaussian kernel unchanged
_FLAT_LOG = -1.2e-16

ORACLE_MAX_ATTEMPTS = 10_000_000


@dataclass(frozen=True)
class ConditionSpec:
    """Law P^{up u}_{n, v}: root at v, leaf minimum at least -m(n) + u.

    depth_n is an integer or INF; for INF the constraint is the infinite
    volume tilt u - c0 * k at depth k.
    """
    depth_n: object
    u: float
    v: float = 0.0

    @property
    def is_infinite(self):
        return self.depth_n == INF

    @property
    def threshold(self):
        if self.is_infinite:
            raise ValueError("the infinite-volume law has a per-depth threshold")
        return -m(self.depth_n) + self.u

    def anchor(self, child_depth):
        """Origin of the relative child coordinate at the given depth."""
        if self.is_infinite:
            return self.u - C0 * child_depth
        return self.threshold

    def remaining(self, child_depth):
        return INF if self.is_infinite else self.depth_n - child_depth

    @classmethod
    def hard_wall(cls, n):
        return cls(n, m(n), 0.0)

    def shifted(self, dv):
        """Same law moved by dv: root v + dv, level u + dv."""
        return ConditionSpec(self.depth_n, self.u + dv, self.v + dv)


# --- Survival factor in the relative coordinate ---

def _survival_fn(table, r):
    """y -> log S_r(-y) in the relative child coordinate."""
    if r == INF:
        ref = table.n_ref
        shift = m(ref)
        fn = table.S(ref)
        return lambda y: fn(-shift - np.asarray(y, dtype=np.float64))
    fn = table.S(r)
    return lambda y: fn(-np.asarray(y, dtype=np.float64))


def _flat_point(table, r):
    """Smallest grid y from which the survival factor is 1 to double precision."""
    dx = table.grid.dx
    if r == INF:
        fn = table.S(table.n_ref)
        xs, lv = fn.x, fn.log_values
        flat = np.flatnonzero(lv >= _FLAT_LOG)
        x_flat = xs[flat[-1]] if flat.size else xs[0]
        y = -x_flat - m(table.n_ref)
        return dx * math.ceil(y / dx)
    fn = table.S(r)
    flat = np.flatnonzero(fn.log_values >= _FLAT_LOG)
    if not flat.size:
        return -fn.x0
    return -fn.x[flat[-1]]


def _reach_point(table, r):
    """Grid y below which the survival factor is under exp(_REACH_LOG)."""
    dx = table.grid.dx
    surv = _survival_fn(table, r)
    y_flat = _flat_point(table, r)
    ys = dx * np.arange(math.floor((A_MIN - Z_MAX) / dx), math.ceil(y_flat / dx) + 1)
    vals = surv(ys)
    reach = np.flatnonzero(vals >= _REACH_LOG)
    return ys[reach[0]] if reach.size else y_flat


def child_kernel(parent_value, r, t, table):
    """Normalized log density of a child given its parent, as a GridFn in w.

    For r = 0 the factor is the indicator w >= t. The grid is aligned so the
    survival factor is read at table nodes.
    """
    dx = table.grid.dx
    surv = _survival_fn(table, r)
    a = parent_value - t
    y_top = max(a, _flat_point(table, r)) + Z_MAX
    y_lo = dx * math.floor((a - Z_MAX) / dx)
    ys = y_lo + dx * np.arange(int(math.ceil((y_top - y_lo) / dx)) + 1)
    log_f = log_phi(ys - a) + surv(ys)
    normalized = normalize_log_density(log_f, dx)
    if normalized is None:
        raise DegenerateKernelError(
            f"child kernel has no mass (parent={parent_value}, r={r}, t={t})"
        )
    return GridFn(t + y_lo, dx, normalized, -np.inf, RULE_ZERO)


def _quantiles_of(fn, z):
    tables = cdf_tables(fn.log_values, fn.dx)
    if tables is None:
        raise DegenerateKernelError("kernel has no closed cells")
    lower, upper, closed = tables
    return quantiles_from_tables(fn.x, lower, upper, closed, z)


def kernel_quantile(parent_value, r, t, table, z):
    """Exact (grid) quantile of child_kernel at normal score z."""
    return _quantiles_of(child_kernel(parent_value, r, t, table), np.atleast_1d(z))


# --- Quantile tables ---

class KernelTable:
    """Increments child - parent on an (a, z) lattice for one remaining depth.

    Rows are parent offsets a = a_min + i * a_step, columns normal scores.
    For a >= a_gauss the kernel is the plain Gaussian step.
    """

    def __init__(self, table, r):
        self.r = r
        dx = table.grid.dx
        self.dx = dx
        self.a_step = A_STEP_NODES * dx
        y_flat = _flat_point(table, r)
        self.a_gauss = y_flat + Z_MAX
        a_min = max(A_MIN, _reach_point(table, r) - Z_MAX + 1.0)
        self.a_min = dx * math.floor(a_min / dx)
        rows = max(2, int(math.ceil((self.a_gauss - self.a_min) / self.a_step)) + 1)
        self.z = np.arange(-Z_MAX, Z_MAX + Z_STEP / 2, Z_STEP)

        half = int(round(Z_MAX / dx))
        offsets = dx * np.arange(-half, half + 1)
        surv = _survival_fn(table, r)
        y_all = self.a_min - half * dx + dx * np.arange((rows - 1) * A_STEP_NODES + 2 * half + 1)
        log_s = surv(y_all)
        log_kernel = log_phi(offsets)

        inc = np.empty((rows, self.z.size), dtype=np.float32)
        windows = sliding_window_view(log_s, 2 * half + 1)[::A_STEP_NODES][:rows]
        for i, window in enumerate(windows):
            tables = cdf_tables(log_kernel + window, dx)
            if tables is None:
                raise DegenerateKernelError(f"kernel row a={self.a_min + i * self.a_step:.3f} (r={r}) has no mass")
            lower, upper, closed = tables
            inc[i] = quantiles_from_tables(offsets, lower, upper, closed, self.z)
        self.inc = inc
        logger.debug(f"[Sampler] Kernel table r={r}: {rows} rows, a in [{self.a_min:.2f}, {self.a_gauss:.2f}]")

    def increments(self, a, z, exact):
        """child - parent for relative parents a and scores z.

        `exact(a_i, z_i)` handles parents below the table.
        """
        a = np.asarray(a, dtype=np.float64)
        z = np.clip(np.asarray(z, dtype=np.float64), -Z_MAX, Z_MAX)
        out = z.copy()
        below = a < self.a_min
        inside = ~below & (a < self.a_gauss)
        if np.any(inside):
            ai = (a[inside] - self.a_min) / self.a_step
            i = np.minimum(ai.astype(np.int64), self.inc.shape[0] - 2)
            wa = ai - i
            zi = (z[inside] + Z_MAX) / Z_STEP
            j = np.minimum(zi.astype(np.int64), self.z.size - 2)
            wz = zi - j
            q = self.inc
            out[inside] = (
                (1 - wa) * ((1 - wz) * q[i, j] + wz * q[i, j + 1])
                + wa * ((1 - wz) * q[i + 1, j] + wz * q[i + 1, j + 1])
            )
        if np.any(below):
            logger.debug(f"[Sampler] {int(below.sum())} parents below the r={self.r} table, exact path")
            out[below] = exact(a[below], z[below])
        return out


class KernelCache:
    """Lazily built KernelTables keyed by remaining depth (or INF)."""

    def __init__(self, table):
        self.table = table
        self._tables = {}
        self._lock = threading.Lock()

    def get(self, r):
        with self._lock:
            kt = self._tables.get(r)
            if kt is None:
                kt = KernelTable(self.table, r)
                self._tables[r] = kt
            return kt


# --- Level-wise sampling ---

def _exact_increments(table, r, a, z):
    out = np.empty_like(a)
    for idx, (ai, zi) in enumerate(zip(a, z)):
        out[idx] = kernel_quantile(ai, r, 0.0, table, zi)[0] - ai
    return out


def kernel_step(parents, r, anchor, kernels, z):
    """Quantile draw of the children of `parents` at normal scores z.

    r is the children's remaining depth, anchor the threshold their subtree
    survival is measured from.
    """
    kt = kernels.get(r)
    a = np.asarray(parents, dtype=np.float64) - anchor
    inc = kt.increments(a, z, lambda ab, zb: _exact_increments(kernels.table, r, ab, zb))
    children = parents + inc
    if r == 0:
        children = np.maximum(children, anchor)
    return children


def conditioned_children(parents, child_depth, spec, kernels, z):
    """Children of `parents` (already repeated per child) at the given depth."""
    return kernel_step(parents, spec.remaining(child_depth), spec.anchor(child_depth), kernels, z)


def sample_conditioned_field(spec, table, rng, kernels=None, depth=None):
    """Exact grid sample of P^{up u}_{n, v}, or of P^{up u}_v on T_depth."""
    kernels = kernels or KernelCache(table)
    n = depth if spec.is_infinite else spec.depth_n
    if n is None:
        raise ValueError("infinite-volume sampling needs an explicit depth")
    values = np.empty(tree_size(n))
    values[0] = spec.v
    for k in range(1, n + 1):
        parents = np.repeat(values[level_slice(k - 1)], 2)
        values[level_slice(k)] = conditioned_children(parents, k, spec, kernels, rng.level_normals(k))
    return FieldSample(n, values)


def sample_conditioned_vertices(spec, table, rng, vertices, kernels=None):
    """Values on the given vertices and their ancestors, as {index: value}.

    A child's kernel depends only on its parent, so this reproduces the
    values sample_conditioned_field draws from the same `rng`.
    """
    kernels = kernels or KernelCache(table)
    closure = set()
    for v in vertices:
        v = int(v)
        while v > 0 and v not in closure:
            closure.add(v)
            v = parent(v)
    values = {0: float(spec.v)}
    by_depth = {}
    for v in closure:
        by_depth.setdefault(depth(v), []).append(v)
    for k in sorted(by_depth):
        idx = np.array(sorted(by_depth[k]), dtype=np.int64)
        z = ndtri(rng.level_uniforms_at(k, idx - leftmost(k)))
        parents = np.array([values[parent(i)] for i in idx])
        children = conditioned_children(parents, k, spec, kernels, z)
        values.update(zip(idx.tolist(), children.tolist()))
    return values


def sample_hard_wall(n, table, rng, kernels=None):
    return sample_conditioned_field(ConditionSpec.hard_wall(n), table, rng, kernels)


def sample_infinite_up(r, u, v, table, rng, kernels=None):
    """P^{up u}_v restricted to the first r generations."""
    return sample_conditioned_field(ConditionSpec(INF, u, v), table, rng, kernels, depth=r)


def sample_plus_delta_field(pd, r, table, rng, kernels=None):
    """Root from the P^{+,delta} root law, then the u = 0 infinite-volume chain."""
    root = float(pd.root_law.sample(open_uniforms(rng.generator(TAG_ROOT), 1))[0])
    return sample_infinite_up(r, 0.0, root, table, rng, kernels)


# --- Rejection oracle ---

def rejection_oracle_hard_wall(n, rng, max_attempts=ORACLE_MAX_ATTEMPTS, batch=4096):
    """Draw BRWs until every leaf is nonnegative; exact sample of P_n^+."""
    samples, _ = rejection_oracle_batch(n, rng, 1, max_attempts, batch)
    return FieldSample(n, samples[0])


def rejection_oracle_batch(n, rng, count, max_attempts=ORACLE_MAX_ATTEMPTS, batch=4096, threshold=0.0):
    """`count` accepted fields and the number of attempts used.

    Attempts are drawn in batches from one sequential stream, so the accepted
    sample and the attempt count depend only on (rng, n, count, batch).
    """
    if n > 6:
        raise ValueError(f"rejection oracle is limited to n <= 6, got {n}")
    accepted = []
    attempts = 0
    got = 0
    stream = rng.spawn(TAG_ORACLE)
    round_no = 0
    while got < count:
        if attempts >= max_attempts:
            raise BudgetExceededError(
                f"rejection oracle accepted {got}/{count} after {attempts} attempts"
            )
        size = min(batch, max_attempts - attempts)
        fields = sample_brw_batch(n, 0.0, stream.spawn(round_no), size)
        round_no += 1
        ok = np.all(fields[:, level_slice(n)] >= threshold, axis=1)
        hits = np.flatnonzero(ok)[:count - got]
        if got + hits.size < count:
            # the whole batch was drawn; its trailing rejects count too
            attempts += size
        else:
            attempts += int(hits[-1]) + 1
        if hits.size:
            accepted.append(fields[hits])
            got += hits.size
    return np.concatenate(accepted), attempts


def acceptance_count(n, rng, attempts, threshold, batch=65536):
    """Number of unconditional depth-n fields with leaf minimum >= threshold."""
    stream = rng.spawn(TAG_ORACLE)
    hits = 0
    done = 0
    round_no = 0
    while done < attempts:
        size = min(batch, attempts - done)
        fields = sample_brw_batch(n, 0.0, stream.spawn(round_no), size)
        hits += int(np.sum(np.min(fields[:, level_slice(n)], axis=1) >= threshold))
        done += size
        round_no += 1
    return hits

