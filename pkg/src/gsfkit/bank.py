"""The Gaussian sum filter bank: one mode-matched update per cluster pair.

A step consumes a single-Gaussian prior and produces a posterior mixture
with exactly C_v * C_w entries, one per (process cluster, measurement
cluster) pair. Keeping the prior single-Gaussian is what stops the
posterior from growing exponentially; collapsing the mixture back to one
Gaussian is the job of the reduction schemes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.linalg import LinAlgError

from .errors import DegenerateInnovation
from .gaussians import GaussianMixture, normalize_log_weights
from .kalman import KalmanState, _sym
from .state_space import SystemModel

__all__ = [
    "ModelIndex",
    "PosteriorEntry",
    "PosteriorMixture",
    "gsf_step",
    "innovation_params",
    "posterior_as_mixture",
]

_LOG_2PI = float(np.log(2.0 * np.pi))
_WEIGHT_SUM_TOL = 1e-12


class ModelIndex(NamedTuple):
    """Identifies one bank member: process cluster i, measurement cluster j."""

    i: int
    j: int


class PosteriorEntry(NamedTuple):
    index: ModelIndex
    weight: float
    mean: np.ndarray
    cov: np.ndarray
    zhat: np.ndarray
    innov_cov: np.ndarray


@dataclass(frozen=True)
class PosteriorMixture:
    """Weighted bank posterior at one step, stored as stacked arrays.

    Entries are laid out i-major: flat index = i * n_meas + j. Weights are
    normalized to sum to 1; a weight that underflows to exactly zero is
    kept so that reduction schemes always see the full bank.
    """

    step: int
    n_process: int
    n_meas: int
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    zhats: np.ndarray
    innov_covs: np.ndarray

    def __post_init__(self):
        count = self.n_process * self.n_meas
        if count < 1:
            raise ValueError("bank needs at least one member")
        for name in ("weights", "means", "covs", "zhats", "innov_covs"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.weights.shape != (count,):
            raise ValueError("weights must hold one entry per cluster pair")
        if self.means.shape[0] != count or self.covs.shape[:1] != (count,):
            raise ValueError("means/covs must hold one entry per cluster pair")
        if abs(float(self.weights.sum()) - 1.0) > _WEIGHT_SUM_TOL:
            raise ValueError("weights must be normalized")
        if np.any(self.weights < 0.0):
            raise ValueError("weights must be nonnegative")
        for name in ("weights", "means", "covs", "zhats", "innov_covs"):
            getattr(self, name).flags.writeable = False

    @property
    def count(self) -> int:
        return self.n_process * self.n_meas

    def flat_index(self, index: ModelIndex) -> int:
        i, j = index
        if not (0 <= i < self.n_process and 0 <= j < self.n_meas):
            raise ValueError(f"index {index} out of range for a "
                             f"{self.n_process}x{self.n_meas} bank")
        return i * self.n_meas + j

    def model_index(self, flat: int) -> ModelIndex:
        i, j = divmod(int(flat), self.n_meas)
        return ModelIndex(i, j)

    @property
    def entries(self) -> tuple[PosteriorEntry, ...]:
        return tuple(
            PosteriorEntry(
                self.model_index(f),
                float(self.weights[f]),
                self.means[f],
                self.covs[f],
                self.zhats[f],
                self.innov_covs[f],
            )
            for f in range(self.count)
        )

    def to_csv(self) -> str:
        """Debug dump: i, j, weight, mean entries, row-major cov entries."""
        n_x = self.means.shape[1]
        out = io.StringIO()
        mean_cols = ",".join(f"mean_{a}" for a in range(n_x))
        cov_cols = ",".join(f"cov_{a}_{b}" for a in range(n_x) for b in range(n_x))
        out.write(f"i,j,weight,{mean_cols},{cov_cols}\n")
        for entry in self.entries:
            vals = [str(entry.index.i), str(entry.index.j), repr(entry.weight)]
            vals += [repr(float(v)) for v in entry.mean]
            vals += [repr(float(v)) for v in entry.cov.reshape(-1)]
            out.write(",".join(vals) + "\n")
        return out.getvalue()


def innovation_params(
    state: KalmanState,
    model: SystemModel,
    step: int,
    index: ModelIndex,
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted measurement and innovation covariance for one member.

    Lets callers score a cluster pair without committing its update.
    """
    f = model.transition(step)
    h = model.observation(step)
    v_mix = model.process_noise(step)
    w_mix = model.meas_noise(step)
    x_pred = f @ state.mean + v_mix.means[index.i]
    p_pred = f @ state.cov @ f.T + v_mix.covs[index.i]
    z_hat = h @ x_pred + w_mix.means[index.j]
    s = _sym(h @ p_pred @ h.T + w_mix.covs[index.j])
    return z_hat, s


def gsf_step(state: KalmanState, model: SystemModel, z, step: int) -> PosteriorMixture:
    """Run every mode-matched update and weight the members.

    Member (i, j) runs the Kalman recursion with cluster i's process
    statistics and cluster j's measurement statistics. Posterior weights
    are proportional to prior_i * prior_j * N(z; zhat_ij, S_ij), computed
    in log space and normalized with log-sum-exp.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    f = model.transition(step)
    h = model.observation(step)
    v_mix = model.process_noise(step)
    w_mix = model.meas_noise(step)
    n_v, n_w = v_mix.count, w_mix.count
    n_x, n_z = model.n_x, model.n_z

    x_pred = (f @ state.mean)[None, :] + v_mix.means            # (Cv, nx)
    p_base = f @ state.cov @ f.T
    p_pred = p_base[None, :, :] + v_mix.covs                    # (Cv, nx, nx)
    z_pred = x_pred @ h.T                                       # (Cv, nz)
    pht = p_pred @ h.T                                          # (Cv, nx, nz)
    hpht = h @ pht                                              # (Cv, nz, nz)

    # expand over measurement clusters, i-major flat layout
    x_pred_f = np.repeat(x_pred, n_w, axis=0)
    p_pred_f = np.repeat(p_pred, n_w, axis=0)
    pht_f = np.repeat(pht, n_w, axis=0)
    z_hat = np.repeat(z_pred, n_w, axis=0) + np.tile(w_mix.means, (n_v, 1))
    r_f = np.tile(w_mix.covs, (n_v, 1, 1))
    s = np.repeat(hpht, n_w, axis=0) + r_f
    s = 0.5 * (s + s.transpose(0, 2, 1))

    try:
        chol = np.linalg.cholesky(s)
    except LinAlgError:
        raise _locate_degenerate(s, n_w, step) from None

    innovation = z[None, :] - z_hat                             # (C, nz)
    y = np.linalg.solve(chol, innovation[..., None])[..., 0]
    quad = np.einsum("cd,cd->c", y, y)
    log_det = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    log_lik = -0.5 * (n_z * _LOG_2PI + log_det + quad)
    log_prior = (v_mix.log_weights[:, None] + w_mix.log_weights[None, :]).reshape(-1)
    weights = normalize_log_weights(log_prior + log_lik)

    gain = np.linalg.solve(s, pht_f.transpose(0, 2, 1)).transpose(0, 2, 1)
    means = x_pred_f + (gain @ innovation[..., None])[..., 0]
    ikh = np.eye(n_x)[None, :, :] - gain @ h
    covs = ikh @ p_pred_f @ ikh.transpose(0, 2, 1) + gain @ r_f @ gain.transpose(0, 2, 1)
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))

    return PosteriorMixture(
        step=step,
        n_process=n_v,
        n_meas=n_w,
        weights=weights,
        means=means,
        covs=covs,
        zhats=z_hat,
        innov_covs=s,
    )


def _locate_degenerate(s: np.ndarray, n_w: int, step: int) -> DegenerateInnovation:
    for flat in range(s.shape[0]):
        try:
            np.linalg.cholesky(s[flat])
        except LinAlgError:
            i, j = divmod(flat, n_w)
            return DegenerateInnovation(
                f"singular innovation covariance for model ({i}, {j}) at step {step}"
            )
    return DegenerateInnovation(f"singular innovation covariance at step {step}")


def posterior_as_mixture(posterior: PosteriorMixture) -> GaussianMixture:
    """View the bank posterior as a plain Gaussian mixture.

    Intended for diagnostics and cross-checks; members whose weight
    underflowed to zero are kept.
    """
    return GaussianMixture.from_arrays(posterior.weights, posterior.means, posterior.covs)
