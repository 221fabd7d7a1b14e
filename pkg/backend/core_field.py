"""Tree geometry, centering sequences and unconditional BRW sampling.

The field on the depth-n binary tree lives in a flat heap-ordered array:
root at 0, children of i at 2i+1 and 2i+2, generation k at indices
[2^k - 1, 2^(k+1) - 1).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

logger = logging.getLogger(__name__)

C0 = math.sqrt(2.0 * math.log(2.0))

# Uniforms are drawn per generation in fixed-size chunks, each chunk with its
# own Philox counter block, so a chunk's values never depend on who draws it.
RNG_CHUNK = 4096
_U_BITS = 52
_U_SCALE = float(1 << _U_BITS)

# spawn-key tags for auxiliary streams
TAG_BATCH = 1
TAG_ORACLE = 2
TAG_ROOT = 3
TAG_AUX = 4


# --- Centering constants ---

def m(n):
    """Centering of the leaf minimum/maximum: c0 n - (3/2) c0^-1 ln n."""
    if n < 1:
        raise ValueError(f"m(n) needs n >= 1, got {n}")
    return C0 * n - 1.5 * math.log(n) / C0


def l(n):
    """floor(log2 n), exact for integers."""
    return int(n).bit_length() - 1


def nprime(n):
    return n - l(n)


def frac2(n):
    """Fractional part of log2 n, always in [0, 1)."""
    return math.log2(n) - l(n)


def mu_profile(n, k):
    """Mean height of the hard-wall field at depth k, up to Theta(1)."""
    if not 0 <= k <= n:
        raise ValueError(f"depth {k} outside [0, {n}]")
    base = m(nprime(n))
    if k < l(n):
        return base * (1.0 - 2.0 ** (-k))
    return base


# --- Heap index algebra ---

def depth(index):
    return (int(index) + 1).bit_length() - 1


def parent(index):
    return (int(index) - 1) // 2


def child(index, right=False):
    return 2 * int(index) + (2 if right else 1)


def ancestor(index, k):
    """Depth-k ancestor [x]_k of a vertex."""
    d = depth(index)
    if not 0 <= k <= d:
        raise ValueError(f"no depth-{k} ancestor for a depth-{d} vertex")
    return ((int(index) + 1) >> (d - k)) - 1


def common_ancestor_depth(x, y):
    """|x ^ y| for two heap indices."""
    a, b = int(x) + 1, int(y) + 1
    da, db = a.bit_length(), b.bit_length()
    if da > db:
        a >>= da - db
    elif db > da:
        b >>= db - da
    while a != b:
        a >>= 1
        b >>= 1
    return a.bit_length() - 1


def level_slice(k):
    return slice((1 << k) - 1, (1 << (k + 1)) - 1)


def tree_size(n):
    return (1 << (n + 1)) - 1


def leftmost(k):
    return (1 << k) - 1


def rightmost(k):
    return (1 << (k + 1)) - 2


# --- Random streams ---

@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, stream_id, path).

    Uniforms for generation k are keyed by (k, chunk) so that any subset of
    a generation can be regenerated without drawing the rest.
    """
    seed: int
    stream_id: int = 0
    path: tuple = ()

    def spawn(self, *tags):
        return RngStream(self.seed, self.stream_id, self.path + tuple(int(t) for t in tags))

    def key(self, *extra):
        seq = np.random.SeedSequence(
            int(self.seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(int(self.stream_id),) + self.path + tuple(int(e) for e in extra),
        )
        return seq.generate_state(2, dtype=np.uint64)

    def generator(self, *extra):
        """Sequential generator for draws that are not tied to vertices."""
        return np.random.Generator(np.random.Philox(key=self.key(*extra)))

    def _chunk(self, key, level, chunk, size):
        counter = np.array([0, 0, level, chunk], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key, counter=counter))
        return to_open_unit(gen.integers(0, 1 << _U_BITS, size=size, dtype=np.int64))

    def level_uniforms(self, level, start=0, stop=None):
        """Uniforms in (0, 1) for offsets [start, stop) of generation `level`."""
        width = 1 << level
        stop = width if stop is None else stop
        if not 0 <= start <= stop <= width:
            raise ValueError(f"bad offsets [{start}, {stop}) for generation {level}")
        key = self.key()
        out = np.empty(stop - start)
        first, last = start // RNG_CHUNK, (stop - 1) // RNG_CHUNK if stop > start else -1
        for c in range(first, last + 1):
            lo = c * RNG_CHUNK
            size = min(RNG_CHUNK, width - lo)
            block = self._chunk(key, level, c, size)
            a, b = max(start, lo), min(stop, lo + size)
            out[a - start:b - start] = block[a - lo:b - lo]
        return out

    def level_normals(self, level, start=0, stop=None):
        return ndtri(self.level_uniforms(level, start, stop))

    def level_uniforms_at(self, level, offsets):
        """Uniforms for arbitrary offsets of a generation, chunk by chunk."""
        offsets = np.asarray(offsets, dtype=np.int64)
        width = 1 << level
        if offsets.size and (offsets.min() < 0 or offsets.max() >= width):
            raise ValueError(f"offsets outside generation {level}")
        key = self.key()
        out = np.empty(offsets.size)
        chunks = offsets // RNG_CHUNK
        for c in np.unique(chunks):
            lo = int(c) * RNG_CHUNK
            block = self._chunk(key, level, int(c), min(RNG_CHUNK, width - lo))
            hit = chunks == c
            out[hit] = block[offsets[hit] - lo]
        return out


def to_open_unit(bits):
    """Map 52-bit integers to uniforms strictly inside (0, 1)."""
    return (np.asarray(bits, dtype=np.float64) + 0.5) / _U_SCALE


def open_uniforms(gen, size):
    return to_open_unit(gen.integers(0, 1 << _U_BITS, size=size, dtype=np.int64))


# --- Field samples ---

@dataclass(frozen=True)
class FieldSample:
    depth_n: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (tree_size(self.depth_n),):
            raise ValueError(
                f"depth-{self.depth_n} field needs {tree_size(self.depth_n)} values, "
                f"got {self.values.shape}"
            )
        self.values.setflags(write=False)

    @property
    def root(self):
        return float(self.values[0])

    @property
    def leaves(self):
        return self.values[level_slice(self.depth_n)]

    def level(self, k):
        return self.values[level_slice(k)]

    def branch(self, leaf_offset=0):
        """Values along the root-to-leaf path ending at the given leaf offset."""
        idx = leftmost(self.depth_n) + leaf_offset
        path = [ancestor(idx, k) for k in range(self.depth_n + 1)]
        return self.values[path]


def leaf_min(f):
    return float(np.min(f.leaves))


def leaf_max(f):
    return float(np.max(f.leaves))


def population_mean(f):
    return float(np.mean(f.leaves))


def _fill_level(values, k, rng, workers):
    parents = values[level_slice(k - 1)]
    target = values[level_slice(k)]
    width = 1 << k
    if workers <= 1 or width <= RNG_CHUNK:
        target[:] = np.repeat(parents, 2) + rng.level_normals(k)
        return

    def fill(lo):
        hi = min(lo + RNG_CHUNK, width)
        target[lo:hi] = np.repeat(parents[lo // 2:hi // 2], 2) + rng.level_normals(k, lo, hi)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fill, range(0, width, RNG_CHUNK)))


def sample_brw(n, root_value, rng, workers=1):
    """Branching random walk with standard Gaussian steps on the depth-n tree."""
    if n < 0:
        raise ValueError(f"depth must be nonnegative, got {n}")
    values = np.empty(tree_size(n))
    values[0] = root_value
    for k in range(1, n + 1):
        _fill_level(values, k, rng, workers)
    return FieldSample(n, values)


def sample_brw_batch(n, root_value, rng, count):
    """`count` independent BRW fields as a (count, 2^(n+1) - 1) array."""
    gen = rng.generator(TAG_BATCH)
    values = np.empty((count, tree_size(n)))
    values[:, 0] = root_value
    for k in range(1, n + 1):
        parents = values[:, level_slice(k - 1)]
        steps = ndtri(open_uniforms(gen, (count, 1 << k)))
        values[:, level_slice(k)] = np.repeat(parents, 2, axis=1) + steps
    return values
