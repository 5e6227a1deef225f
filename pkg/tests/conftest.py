import numpy as np
import pytest

from gsfkit import Gaussian, GaussianMixture, SystemModel, constant_grid


def rand_pd(rng, dim, scale=1.0):
    """Random symmetric positive definite matrix with eigenvalues >= 0.5*scale."""
    a = rng.standard_normal((dim, dim))
    return scale * (a @ a.T + 0.5 * np.eye(dim))


def rand_mixture(rng, dim, count, mean_scale=3.0):
    weights = rng.random(count) + 0.1
    weights /= weights.sum()
    comps = tuple(
        Gaussian(mean_scale * rng.standard_normal(dim), rand_pd(rng, dim))
        for _ in range(count)
    )
    return GaussianMixture(weights, comps)


def static_model(f, h, process_gm, meas_gm):
    """Time-invariant SystemModel with fixed matrices; no process basis."""
    f = np.atleast_2d(np.asarray(f, dtype=float))
    h = np.atleast_2d(np.asarray(h, dtype=float))
    return SystemModel(
        n_x=f.shape[0],
        n_z=h.shape[0],
        transition=lambda k: f,
        observation=lambda k: h,
        process_noise=lambda k: process_gm,
        meas_noise=lambda k: meas_gm,
    )


def scalar_unit_model():
    """Scalar F=H=1 system with unit-variance zero-mean noises."""
    gm = GaussianMixture.from_scalars([1.0], [0.0], [1.0])
    return static_model([[1.0]], [[1.0]], gm, gm)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
