"""Posterior-reduction schemes for the filter bank.

Every scheme collapses the C_v * C_w member posterior back to a single
Gaussian per step:

- ``merge``: moment-match the whole mixture.
- ``remove``: keep the member with the largest weight.
- ``matched``: keep the member named by the true generating clusters
  (an oracle, only available in simulation).
- ``proposed``: form a cheap initial state estimate, back out the implied
  process/measurement noise residuals, score every noise cluster against
  its residual, and keep the winning pair's member.

The proposed scheme supports five initial estimators: ``gsfm`` (weighted
bank mean), ``gsfr`` (heaviest member's mean), ``pkg`` (bank means redone
with an offline preloaded gain), ``ssg`` (same with per-member steady
gains) and ``dkg`` (one fresh Kalman step with moment-matched noise).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Union

import numpy as np
from numpy.linalg import LinAlgError

from .bank import ModelIndex, PosteriorMixture
from .errors import DegenerateCovariance, MissingGains, MissingTruth
from .gaussians import _stack_log_density, moment_match
from .kalman import GainSchedule, KalmanState, kf_step
from .state_space import SystemModel

__all__ = [
    "INIT_ESTIMATORS",
    "ReducedPosterior",
    "ReductionScheme",
    "initial_estimate",
    "reduce_matched",
    "reduce_merge",
    "reduce_posterior",
    "reduce_proposed",
    "reduce_remove",
    "scheme_from_string",
    "select_active",
]

INIT_ESTIMATORS = ("gsfm", "gsfr", "pkg", "ssg", "dkg")

GainSchedules = Union[GainSchedule, tuple[GainSchedule, ...]]

_mm_cached = lru_cache(maxsize=256)(moment_match)


@dataclass(frozen=True)
class ReductionScheme:
    """Which reduction to apply, plus strategy-specific attachments.

    ``init_estimator`` is set exactly when ``kind == "proposed"``.
    ``gain_schedule`` belongs to the pkg/ssg estimators: a single shared
    preloaded schedule for pkg, or one schedule per bank member (i-major)
    for ssg or per-member pkg. Schedules may be attached after parsing
    with :meth:`with_gains`; using pkg/ssg without one raises MissingGains.
    """

    kind: str
    init_estimator: Optional[str] = None
    gain_schedule: Optional[GainSchedules] = None

    def __post_init__(self):
        if self.kind not in ("merge", "remove", "matched", "proposed"):
            raise ValueError(f"unknown reduction kind {self.kind!r}")
        if (self.kind == "proposed") != (self.init_estimator is not None):
            raise ValueError("init_estimator is required for proposed and forbidden otherwise")
        if self.init_estimator is not None and self.init_estimator not in INIT_ESTIMATORS:
            raise ValueError(f"unknown initial estimator {self.init_estimator!r}")
        if self.gain_schedule is not None and self.init_estimator not in ("pkg", "ssg"):
            raise ValueError("gain schedules only apply to the pkg/ssg estimators")

    @property
    def label(self) -> str:
        return self.kind if self.init_estimator is None else f"{self.kind}:{self.init_estimator}"

    def with_gains(self, gains: GainSchedules) -> "ReductionScheme":
        return replace(self, gain_schedule=gains)


def scheme_from_string(text: str) -> ReductionScheme:
    """Parse a scheme label: merge | remove | matched | proposed:<estimator>."""
    text = text.strip()
    if text in ("merge", "remove", "matched"):
        return ReductionScheme(text)
    if text.startswith("proposed:"):
        return ReductionScheme("proposed", text.split(":", 1)[1])
    raise ValueError(f"unknown reduction scheme {text!r}")


@dataclass(frozen=True)
class ReducedPosterior:
    """A single-Gaussian posterior, with selection diagnostics when any."""

    state: KalmanState
    chosen: Optional[ModelIndex] = None
    init_estimate: Optional[np.ndarray] = None


def reduce_merge(posterior: PosteriorMixture) -> ReducedPosterior:
    """Moment-match the bank posterior to one Gaussian."""
    w = posterior.weights
    mean = w @ posterior.means
    diff = posterior.means - mean
    cov = np.einsum("c,cab->ab", w, posterior.covs) + np.einsum("c,ca,cb->ab", w, diff, diff)
    cov = 0.5 * (cov + cov.T)
    return ReducedPosterior(KalmanState(mean, cov, posterior.step + 1))


def reduce_remove(posterior: PosteriorMixture) -> ReducedPosterior:
    """Keep the heaviest member; ties go to the smallest (i, j)."""
    flat = int(np.argmax(posterior.weights))
    index = posterior.model_index(flat)
    state = KalmanState(posterior.means[flat], posterior.covs[flat], posterior.step + 1)
    return ReducedPosterior(state, chosen=index)


def reduce_matched(posterior: PosteriorMixture, truth) -> ReducedPosterior:
    """Keep the member of the true generating cluster pair.

    An oracle baseline: the truth labels exist only in simulation, so this
    scheme is a yardstick, never a deployable filter.
    """
    if truth is None:
        raise MissingTruth("matched reduction needs the active cluster labels")
    index = ModelIndex(int(truth[0]), int(truth[1]))
    flat = posterior.flat_index(index)
    state = KalmanState(posterior.means[flat], posterior.covs[flat], posterior.step + 1)
    return ReducedPosterior(state, chosen=index)


def _member_gains(
    gains: GainSchedules,
    step: int,
    n_members: int,
    n_x: int,
    n_z: int,
) -> np.ndarray:
    """Resolve the gain used by each bank member at ``step``: (C, n_x, n_z)."""
    if isinstance(gains, GainSchedule):
        return np.broadcast_to(gains.gain_at(step), (n_members, n_x, n_z))
    if len(gains) != n_members:
        raise MissingGains(f"{len(gains)} member schedules for a bank of {n_members}")
    return np.stack([sched.gain_at(step) for sched in gains])


def initial_estimate(
    strategy: str,
    posterior: PosteriorMixture,
    prev: KalmanState,
    model: SystemModel,
    z,
    step: int,
    gains: Optional[GainSchedules] = None,
) -> np.ndarray:
    """Cheap state estimate used only to approximate the noise residuals."""
    if strategy == "gsfm":
        return posterior.weights @ posterior.means
    if strategy == "gsfr":
        return posterior.means[int(np.argmax(posterior.weights))].copy()
    if strategy == "dkg":
        v_bar = _mm_cached(model.process_noise(step))
        w_bar = _mm_cached(model.meas_noise(step))
        new_state, _, _, _ = kf_step(prev, model, z, v_bar, w_bar)
        return new_state.mean
    if strategy in ("pkg", "ssg"):
        if gains is None:
            raise MissingGains(f"the {strategy} estimator needs a gain schedule")
        return _scheduled_bank_mean(posterior, prev, model, z, step, gains)
    raise ValueError(f"unknown initial estimator {strategy!r}")


def _scheduled_bank_mean(
    posterior: PosteriorMixture,
    prev: KalmanState,
    model: SystemModel,
    z,
    step: int,
    gains: GainSchedules,
) -> np.ndarray:
    """Weighted bank mean with member means redone using offline gains.

    Only the mean update is recomputed; the bank's posterior weights are
    reused, so no per-member gain has to be derived online.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    f = model.transition(step)
    h = model.observation(step)
    v_mix = model.process_noise(step)
    w_mix = model.meas_noise(step)
    n_v, n_w = v_mix.count, w_mix.count
    gain = _member_gains(gains, step, n_v * n_w, model.n_x, model.n_z)
    x_pred = (f @ prev.mean)[None, :] + v_mix.means
    x_pred_f = np.repeat(x_pred, n_w, axis=0)
    z_hat = np.repeat(x_pred @ h.T, n_w, axis=0) + np.tile(w_mix.means, (n_v, 1))
    innovation = z[None, :] - z_hat
    means = x_pred_f + (gain @ innovation[..., None])[..., 0]
    return posterior.weights @ means


def select_active(
    init_estimate: np.ndarray,
    prev_mean: np.ndarray,
    z,
    model: SystemModel,
    step: int,
) -> ModelIndex:
    """Pick the cluster pair most consistent with the implied residuals.

    The process residual is the initial estimate minus the propagated
    previous estimate; the measurement residual is the measurement minus
    the initial estimate's projection. The joint score factorizes over the
    two mixtures, so each argmax is taken independently; ties go to the
    lowest index.

    When the model carries a process basis (lifted rank-one clusters),
    the process residual is scored in the scalar generating coordinate,
    obtained by least-squares projection onto the basis direction.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    init_estimate = np.asarray(init_estimate, dtype=float)
    f = model.transition(step)
    h = model.observation(step)
    v_res = init_estimate - f @ np.asarray(prev_mean, dtype=float)
    w_res = z - h @ init_estimate
    v_mix = model.process_noise(step)
    w_mix = model.meas_noise(step)
    try:
        if model.process_basis is not None:
            direction, scalar_mix = model.process_basis(step)
            coord = np.array([float(direction @ v_res) / float(direction @ direction)])
            v_scores = scalar_mix.log_weights + _stack_log_density(
                coord, scalar_mix.means, scalar_mix.covs
            )
        else:
            v_scores = v_mix.log_weights + _stack_log_density(v_res, v_mix.means, v_mix.covs)
        w_scores = w_mix.log_weights + _stack_log_density(w_res, w_mix.means, w_mix.covs)
    except LinAlgError as exc:
        raise DegenerateCovariance(
            f"a noise cluster at step {step} is singular; cannot score residuals"
        ) from exc
    return ModelIndex(int(np.argmax(v_scores)), int(np.argmax(w_scores)))


def reduce_proposed(
    posterior: PosteriorMixture,
    prev: KalmanState,
    model: SystemModel,
    z,
    step: int,
    scheme: ReductionScheme,
) -> ReducedPosterior:
    """Keep the member named by residual scoring of an initial estimate."""
    if scheme.kind != "proposed":
        raise ValueError(f"scheme kind must be 'proposed', got {scheme.kind!r}")
    if prev is None or model is None or z is None or step is None:
        raise ValueError("proposed reduction needs prev, model, z and step")
    x_init = initial_estimate(
        scheme.init_estimator, posterior, prev, model, z, step, scheme.gain_schedule
    )
    index = select_active(x_init, prev.mean, z, model, step)
    flat = posterior.flat_index(index)
    state = KalmanState(posterior.means[flat], posterior.covs[flat], posterior.step + 1)
    return ReducedPosterior(state, chosen=index, init_estimate=x_init)


def reduce_posterior(
    posterior: PosteriorMixture,
    scheme: ReductionScheme,
    *,
    prev: Optional[KalmanState] = None,
    model: Optional[SystemModel] = None,
    z=None,
    step: Optional[int] = None,
    truth=None,
) -> ReducedPosterior:
    """Dispatch to the scheme's reduction."""
    if scheme.kind == "merge":
        return reduce_merge(posterior)
    if scheme.kind == "remove":
        return reduce_remove(posterior)
    if scheme.kind == "matched":
        return reduce_matched(posterior, truth)
    return reduce_proposed(posterior, prev, model, z, step, scheme)
