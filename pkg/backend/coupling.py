"""Joint construction of an unconditional field and its conditioned version.

Both fields are driven by the same uniform at every vertex: the free field
takes the Gaussian quantile, the conditioned one the quantile of its child
kernel. eta = h_up - h is the repulsion field.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import linregress

from backend.core_field import (
    TAG_ROOT, FieldSample, ancestor, leftmost, level_slice, open_uniforms, rightmost,
    tree_size,
)
from backend.conditioned_sampler import ConditionSpec, KernelCache, conditioned_children, kernel_step
from backend.errors import InsufficientSamplesError
from backend.tail_grid import INF

logger = logging.getLogger(__name__)

MIN_GRADIENT_BATCH = 100


@dataclass(frozen=True)
class CoupledTriple:
    depth_n: int
    h: FieldSample
    h_up: FieldSample
    eta: FieldSample

    @classmethod
    def from_fields(cls, h, h_up):
        return cls(h.depth_n, h, h_up, FieldSample(h.depth_n, h_up.values - h.values))


def coupled_child_step(parent_h, parent_hup, r, t, kernels, uniforms):
    """One coupled generation: (child_h, child_hup) from shared uniforms."""
    z = ndtri(np.asarray(uniforms, dtype=np.float64))
    child_h = np.asarray(parent_h, dtype=np.float64) + z
    child_hup = kernel_step(np.asarray(parent_hup, dtype=np.float64), r, t, kernels, z)
    return child_h, child_hup


def sample_coupled_field(spec, table, rng, kernels=None, depth=None):
    """(h, h_up, eta) with h a BRW from 0 and h_up distributed as `spec`.

    h_up is the same draw sample_conditioned_field makes from `rng`.
    """
    kernels = kernels or KernelCache(table)
    n = depth if spec.is_infinite else spec.depth_n
    if n is None:
        raise ValueError("infinite-volume coupling needs an explicit depth")
    h = np.empty(tree_size(n))
    hup = np.empty(tree_size(n))
    h[0], hup[0] = 0.0, spec.v
    for k in range(1, n + 1):
        z = rng.level_normals(k)
        h[level_slice(k)] = np.repeat(h[level_slice(k - 1)], 2) + z
        hup[level_slice(k)] = conditioned_children(
            np.repeat(hup[level_slice(k - 1)], 2), k, spec, kernels, z
        )
    return CoupledTriple.from_fields(FieldSample(n, h), FieldSample(n, hup))


def sample_coupled_plus_delta(pd, r, table, rng, kernels=None):
    """Coupling of a BRW with a P^{+,delta} field on the first r generations."""
    root = float(pd.root_law.sample(open_uniforms(rng.generator(TAG_ROOT), 1))[0])
    return sample_coupled_field(ConditionSpec(INF, 0.0, root), table, rng, kernels, depth=r)


# --- Gradient decay ---

@dataclass(frozen=True)
class GradientStats:
    p: float
    depths: np.ndarray
    norms: np.ndarray
    se: np.ndarray
    slope: float = None
    intercept: float = None
    slope_stderr: float = None
    c_fit: float = None

    def slope_interval(self, z=1.96):
        if self.slope is None:
            return None
        return self.slope - z * self.slope_stderr, self.slope + z * self.slope_stderr


def gradient_profile(triple, p, depths):
    """Mean of |eta(x) - eta(parent x)|^p over the vertices of each depth."""
    eta = triple.eta.values
    out = np.empty(len(depths))
    for i, k in enumerate(depths):
        s = level_slice(k)
        parents = np.repeat(eta[level_slice(k - 1)], 2)
        out[i] = np.mean(np.abs(eta[s] - parents) ** p)
    return out


def fit_gradient_decay(profiles, p, depths, min_batch=MIN_GRADIENT_BATCH):
    """Pool per-replica gradient profiles and fit log(norm / k) against k.

    The slope is not fitted when some depth has a zero norm.
    """
    profiles = np.asarray(profiles, dtype=np.float64)
    if profiles.shape[0] < min_batch:
        raise InsufficientSamplesError(
            f"gradient fit needs {min_batch} replicas, got {profiles.shape[0]}"
        )
    depths = np.asarray(depths)
    mean_pow = profiles.mean(axis=0)
    se_pow = profiles.std(axis=0, ddof=1) / np.sqrt(profiles.shape[0])
    norms = mean_pow ** (1.0 / p)
    with np.errstate(divide='ignore', invalid='ignore'):
        se = np.where(norms > 0, se_pow / (p * norms ** (p - 1.0)), 0.0)
    if np.any(norms <= 0):
        logger.info(f"[Runner] eta gradients vanish (p={p}); decay fit skipped")
        return GradientStats(p, depths, norms, se)
    fit = linregress(depths, np.log(norms) - np.log(depths))
    c_fit = float(np.max(norms / (depths * 2.0 ** (-depths / p))))
    return GradientStats(p, depths, norms, se, float(fit.slope), float(fit.intercept),
                         float(fit.stderr), c_fit)


def gradient_decay(triples, p, depths=range(2, 15), min_batch=MIN_GRADIENT_BATCH):
    depths = list(depths)
    return fit_gradient_decay([gradient_profile(t, p, depths) for t in triples], p, depths, min_batch)


# --- Fixation of eta along a branch ---

@dataclass(frozen=True)
class EtaInfinity:
    """eta at the end of a branch as a proxy for eta(infinity)."""
    depth: int
    left: np.ndarray
    right: np.ndarray
    branch_means: np.ndarray
    branch_se: np.ndarray
    fixation: float
    fixation_se: float


def eta_branches(triple):
    """eta along the leftmost and the rightmost root-to-leaf branch."""
    r = triple.depth_n
    eta = triple.eta.values
    left = eta[[ancestor(leftmost(r), k) for k in range(r + 1)]]
    right = eta[[ancestor(rightmost(r), k) for k in range(r + 1)]]
    return left, right


def summarize_eta(branches, lag=2):
    left = np.array([b[0] for b in branches])
    right = np.array([b[1] for b in branches])
    r = left.shape[1] - 1
    if r < lag:
        raise ValueError(f"branches of depth {r} are too short for lag {lag}")
    count = left.shape[0]
    jumps = np.abs(left[:, r] - left[:, r - lag])
    return EtaInfinity(
        depth=r,
        left=left[:, r],
        right=right[:, r],
        branch_means=left.mean(axis=0),
        branch_se=left.std(axis=0, ddof=1) / np.sqrt(count) if count > 1 else np.zeros(r + 1),
        fixation=float(jumps.mean()),
        fixation_se=float(jumps.std(ddof=1) / np.sqrt(count)) if count > 1 else 0.0,
    )


def eta_infinity(triples, lag=2):
    """eta(x_r) at the leftmost and rightmost depth-r vertices with the
    fixation certificate E|eta(x_r) - eta(x_{r-lag})|."""
    return summarize_eta([eta_branches(t) for t in triples], lag)

