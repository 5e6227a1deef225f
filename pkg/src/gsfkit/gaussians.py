"""Multivariate Gaussian and Gaussian-mixture primitives.

All types are immutable values and safe to share between concurrent
workers. Operations that draw randomness take an explicit
``numpy.random.Generator``; there is no hidden global state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from numpy.linalg import LinAlgError
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import DegenerateCovariance

__all__ = [
    "Gaussian",
    "GaussianMixture",
    "KlEstimate",
    "kl_mc",
    "log_density",
    "mixture_log_density",
    "mixture_sample",
    "moment_match",
    "normalize_log_weights",
    "sample",
]

_LOG_2PI = math.log(2.0 * math.pi)

# Construction tolerances: symmetry is exact up to rounding, weights may
# carry printing error (renormalized), PSD allows eigenvalue rounding noise.
_SYMMETRY_RTOL = 1e-12
_PSD_RTOL = 1e-9
_WEIGHT_SUM_TOL = 1e-3


def _frozen_array(values, dtype=float) -> np.ndarray:
    out = np.array(values, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Gaussian:
    """A multivariate normal with mean vector and PSD covariance matrix.

    The covariance must be symmetric (to relative 1e-12) and positive
    semidefinite. Strict positive definiteness is only required when the
    density is evaluated; degenerate (even all-zero) covariances are legal
    for sampling and return points on the support exactly.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _frozen_array(np.atleast_1d(self.mean))
        cov = _frozen_array(np.atleast_2d(self.cov))
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"cov must be {d}x{d}, got {cov.shape}")
        scale = max(1.0, float(np.abs(cov).max()))
        asym = float(np.abs(cov - cov.T).max())
        if asym > _SYMMETRY_RTOL * scale:
            raise ValueError(f"cov is not symmetric (max asymmetry {asym:.3e})")
        min_eig = float(np.linalg.eigvalsh(cov).min())
        if min_eig < -_PSD_RTOL * scale:
            raise ValueError(f"cov is not positive semidefinite (min eigenvalue {min_eig:.3e})")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @cached_property
    def _density_factor(self) -> tuple[np.ndarray, float]:
        """Cholesky factor and log-determinant; a single bounded jitter is
        tried before giving up on near-singular covariances."""
        try:
            chol = np.linalg.cholesky(self.cov)
        except LinAlgError:
            jitter = 1e-12 * float(np.trace(self.cov)) / self.dim
            try:
                chol = np.linalg.cholesky(self.cov + jitter * np.eye(self.dim))
            except LinAlgError as exc:
                raise DegenerateCovariance(
                    "covariance is singular; density is undefined"
                ) from exc
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        return chol, log_det

    @cached_property
    def _sample_factor(self) -> np.ndarray:
        """A matrix L with L L^T = cov, valid for any PSD covariance."""
        try:
            return np.linalg.cholesky(self.cov)
        except LinAlgError:
            vals, vecs = np.linalg.eigh(self.cov)
            return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """A convex combination of Gaussians of a common dimension.

    Weights must be nonnegative and sum to 1; a total within 1e-3 of 1
    (e.g. printed parameter tables) is renormalized on construction, any
    larger deviation is an error.
    """

    weights: np.ndarray
    components: tuple[Gaussian, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("mixture needs at least one component")
        dim = comps[0].dim
        if any(c.dim != dim for c in comps):
            raise ValueError("all components must share one dimension")
        w = np.array(np.atleast_1d(self.weights), dtype=float)
        if w.ndim != 1 or w.shape[0] != len(comps):
            raise ValueError("weights must match the number of components")
        if np.any(w < 0.0):
            raise ValueError("weights must be nonnegative")
        total = float(w.sum())
        # boundary is inclusive up to float rounding: a printed sum of
        # exactly 1 +- 1e-3 must renormalize
        if abs(total - 1.0) > _WEIGHT_SUM_TOL * (1.0 + 1e-9):
            raise ValueError(f"weights sum to {total:.6f}, outside the renormalizable range")
        w = w / total
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "means", _frozen_array([c.mean for c in comps]))
        object.__setattr__(self, "covs", _frozen_array([c.cov for c in comps]))
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "log_weights", _frozen_array(np.log(w)))
        object.__setattr__(self, "_cum_weights", _frozen_array(np.cumsum(w)))

    @property
    def count(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @classmethod
    def from_arrays(cls, weights, means, covs) -> "GaussianMixture":
        comps = tuple(Gaussian(m, c) for m, c in zip(np.atleast_2d(means), covs))
        return cls(weights, comps)

    @classmethod
    def from_scalars(cls, weights, means, variances) -> "GaussianMixture":
        """Build a one-dimensional mixture from scalar parameter lists."""
        comps = tuple(
            Gaussian(np.array([m]), np.array([[v]]))
            for m, v in zip(np.atleast_1d(means), np.atleast_1d(variances))
        )
        return cls(weights, comps)


class KlEstimate(NamedTuple):
    """Monte-Carlo divergence estimate with its standard error."""

    value: float
    stderr: float


def log_density(g: Gaussian, x) -> float:
    """Log of the normal density of ``g`` at ``x``.

    Evaluated through a triangular factorization of the covariance, so it
    stays finite and accurate far into the tails.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (g.dim,):
        raise ValueError(f"x must have dimension {g.dim}")
    chol, log_det = g._density_factor
    y = solve_triangular(chol, x - g.mean, lower=True)
    return -0.5 * (g.dim * _LOG_2PI + log_det + float(y @ y))


def sample(g: Gaussian, rng: np.random.Generator) -> np.ndarray:
    """Draw one point: mean + L @ eps with eps standard normal.

    Always consumes exactly ``g.dim`` normal variates, so replaying a
    seeded generator reproduces the draw stream bit for bit. A zero
    covariance returns the mean exactly.
    """
    return g.mean + g._sample_factor @ rng.standard_normal(g.dim)


def _draw_component(m: GaussianMixture, rng: np.random.Generator) -> int:
    u = rng.random()
    idx = int(np.searchsorted(m._cum_weights, u, side="right"))
    return min(idx, m.count - 1)


def mixture_sample(m: GaussianMixture, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """Draw (component index, point) from the mixture.

    The index is drawn first from the weights via one uniform variate,
    then the point from the chosen component. Returning the index makes
    the generating cluster observable to simulators.
    """
    idx = _draw_component(m, rng)
    return idx, sample(m.components[idx], rng)


def mixture_log_density(m: GaussianMixture, x) -> float:
    """Log mixture density via log-sum-exp over component log-densities."""
    per_comp = np.array([log_density(c, x) for c in m.components])
    return float(logsumexp(m.log_weights + per_comp))


def moment_match(m: GaussianMixture) -> Gaussian:
    """The single Gaussian with the mixture's exact mean and covariance."""
    mean = m.weights @ m.means
    cov = (
        np.einsum("c,cab->ab", m.weights, m.covs)
        + np.einsum("c,ca,cb->ab", m.weights, m.means, m.means)
        - np.outer(mean, mean)
    )
    return Gaussian(mean, 0.5 * (cov + cov.T))


def normalize_log_weights(log_w) -> np.ndarray:
    """Exponentiate and normalize log-weights without under/overflow.

    Entries of -inf map to exactly zero and are kept. Adding any constant
    to all entries leaves the result unchanged.
    """
    log_w = np.asarray(log_w, dtype=float)
    top = float(np.max(log_w))
    if not np.isfinite(top):
        raise ValueError("all log-weights are -inf")
    w = np.exp(log_w - top)
    return w / w.sum()


def _sample_many(m: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized mixture sampling: one uniform per draw for the component
    indices, then per-component normal blocks in index order."""
    u = rng.random(n)
    idx = np.minimum(np.searchsorted(m._cum_weights, u, side="right"), m.count - 1)
    out = np.empty((n, m.dim))
    for c, comp in enumerate(m.components):
        mask = idx == c
        k = int(mask.sum())
        if k:
            out[mask] = comp.mean + rng.standard_normal((k, comp.dim)) @ comp._sample_factor.T
    return out


def _gaussian_log_density_many(g: Gaussian, xs: np.ndarray) -> np.ndarray:
    chol, log_det = g._density_factor
    y = solve_triangular(chol, (xs - g.mean).T, lower=True)
    quad = np.einsum("dn,dn->n", y, y)
    return -0.5 * (g.dim * _LOG_2PI + log_det + quad)


def _mixture_log_density_many(m: GaussianMixture, xs: np.ndarray) -> np.ndarray:
    per_comp = np.stack([_gaussian_log_density_many(c, xs) for c in m.components])
    return logsumexp(m.log_weights[:, None] + per_comp, axis=0)


def _stack_log_density(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Log-density of one point under a stack of Gaussians.

    Raises numpy's LinAlgError if any covariance in the stack is not
    positive definite; callers translate that into their own error type.
    """
    chol = np.linalg.cholesky(covs)
    diff = x[None, :] - means
    y = np.linalg.solve(chol, diff[..., None])[..., 0]
    quad = np.einsum("cd,cd->c", y, y)
    log_det = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    return -0.5 * (means.shape[1] * _LOG_2PI + log_det + quad)


def kl_mc(m: GaussianMixture, g: Gaussian, n_samples: int, rng: np.random.Generator) -> KlEstimate:
    """Monte-Carlo estimate of KL(m || g).

    Draws ``n_samples`` points from the mixture and averages
    ``log m(x) - log g(x)``. The estimate is nonnegative in expectation;
    the returned standard error lets callers build noise-aware tolerances.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    xs = _sample_many(m, n_samples, rng)
    diffs = _mixture_log_density_many(m, xs) - _gaussian_log_density_many(g, xs)
    stderr = float(diffs.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else math.inf
    return KlEstimate(float(diffs.mean()), stderr)
