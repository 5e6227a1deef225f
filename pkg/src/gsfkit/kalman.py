"""Single-Gaussian Kalman filtering and gain-schedule utilities.

Covariance updates use the Joseph form throughout, which stays symmetric
positive semidefinite for arbitrary (not just optimal) gains. That makes
the same step function usable with preloaded and steady-state gains.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from numpy.linalg import LinAlgError

from .errors import DegenerateInnovation, MissingGains, NoConvergence
from .gaussians import Gaussian
from .state_space import SystemModel

__all__ = [
    "GainSchedule",
    "KalmanState",
    "gains_from_csv",
    "gains_to_csv",
    "kf_step",
    "kf_step_with_gain",
    "precompute_gains",
    "steady_state_gain",
]

_SYMMETRY_RTOL = 1e-12


def _sym(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


@dataclass(frozen=True)
class KalmanState:
    """Filter sufficient statistics after ``step`` measurement updates."""

    mean: np.ndarray
    cov: np.ndarray
    step: int = 0

    def __post_init__(self):
        mean = np.array(np.atleast_1d(self.mean), dtype=float)
        cov = np.array(np.atleast_2d(self.cov), dtype=float)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"cov must be {d}x{d}, got {cov.shape}")
        scale = max(1.0, float(np.abs(cov).max()))
        if float(np.abs(cov - cov.T).max()) > _SYMMETRY_RTOL * scale:
            raise ValueError("cov is not symmetric")
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class GainSchedule:
    """Kalman gains indexed by step.

    ``preloaded`` schedules hold one gain per step up to a horizon;
    ``steady_state`` schedules hold a single limiting gain applied at
    every step.
    """

    gains: np.ndarray
    kind: str

    def __post_init__(self):
        gains = np.array(self.gains, dtype=float)
        if gains.ndim != 3:
            raise ValueError("gains must be a (steps, n_x, n_z) array")
        if self.kind not in ("preloaded", "steady_state"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "steady_state" and gains.shape[0] != 1:
            raise ValueError("steady_state schedules hold exactly one gain")
        gains.flags.writeable = False
        object.__setattr__(self, "gains", gains)

    def __len__(self) -> int:
        return self.gains.shape[0]

    def gain_at(self, step: int) -> np.ndarray:
        if self.kind == "steady_state":
            return self.gains[0]
        if not 0 <= step < self.gains.shape[0]:
            raise MissingGains(
                f"preloaded schedule covers {self.gains.shape[0]} steps, requested step {step}"
            )
        return self.gains[step]


def _predict(state: KalmanState, model: SystemModel, vbar: Gaussian):
    f = model.transition(state.step)
    x_pred = f @ state.mean + vbar.mean
    p_pred = _sym(f @ state.cov @ f.T + vbar.cov)
    return x_pred, p_pred


def kf_step(
    state: KalmanState,
    model: SystemModel,
    z,
    vbar: Gaussian,
    wbar: Gaussian,
) -> tuple[KalmanState, np.ndarray, np.ndarray, np.ndarray]:
    """One predict/update cycle with possibly nonzero noise means.

    x- = F x + u,  P- = F P F' + Q
    zhat = H x- + b,  S = H P- H' + R,  K = P- H' S^-1
    x+ = x- + K (z - zhat),  P+ = (I-KH) P- (I-KH)' + K R K'

    Returns (new state, innovation, S, K). A singular S raises
    DegenerateInnovation.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    h = model.observation(state.step)
    x_pred, p_pred = _predict(state, model, vbar)
    z_hat = h @ x_pred + wbar.mean
    s = _sym(h @ p_pred @ h.T + wbar.cov)
    try:
        np.linalg.cholesky(s)
    except LinAlgError as exc:
        raise DegenerateInnovation(
            f"singular innovation covariance at step {state.step}"
        ) from exc
    gain = np.linalg.solve(s, h @ p_pred).T
    innovation = z - z_hat
    new = _joseph_update(x_pred, p_pred, h, gain, innovation, wbar.cov, state.step + 1)
    return new, innovation, s, gain


def kf_step_with_gain(
    state: KalmanState,
    model: SystemModel,
    z,
    vbar: Gaussian,
    wbar: Gaussian,
    gain: np.ndarray,
) -> KalmanState:
    """Same recursion with an externally supplied gain.

    The Joseph form keeps the covariance valid for any gain, including
    zero (pure prediction) and precomputed schedules.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    gain = np.asarray(gain, dtype=float)
    if gain.shape != (model.n_x, model.n_z):
        raise ValueError(f"gain must be {model.n_x}x{model.n_z}, got {gain.shape}")
    h = model.observation(state.step)
    x_pred, p_pred = _predict(state, model, vbar)
    innovation = z - (h @ x_pred + wbar.mean)
    return _joseph_update(x_pred, p_pred, h, gain, innovation, wbar.cov, state.step + 1)


def _joseph_update(x_pred, p_pred, h, gain, innovation, meas_cov, next_step) -> KalmanState:
    mean = x_pred + gain @ innovation
    ikh = np.eye(x_pred.shape[0]) - gain @ h
    cov = _sym(ikh @ p_pred @ ikh.T + gain @ meas_cov @ gain.T)
    return KalmanState(mean, cov, next_step)


def precompute_gains(
    model: SystemModel,
    noise_v: Gaussian,
    noise_w: Gaussian,
    p0,
    horizon: int,
) -> GainSchedule:
    """Run the measurement-free covariance recursion and record the gains.

    The recursion only involves covariances, so the schedule can be built
    offline; recomputing it under any measurement stream is bit-identical.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    p = np.array(np.atleast_2d(p0), dtype=float)
    gains = np.empty((horizon, model.n_x, model.n_z))
    for k in range(horizon):
        f = model.transition(k)
        h = model.observation(k)
        p_pred = _sym(f @ p @ f.T + noise_v.cov)
        s = _sym(h @ p_pred @ h.T + noise_w.cov)
        try:
            np.linalg.cholesky(s)
        except LinAlgError as exc:
            raise DegenerateInnovation(
                f"singular innovation covariance at step {k}"
            ) from exc
        gain = np.linalg.solve(s, h @ p_pred).T
        ikh = np.eye(model.n_x) - gain @ h
        p = _sym(ikh @ p_pred @ ikh.T + gain @ noise_w.cov @ gain.T)
        gains[k] = gain
    return GainSchedule(gains, "preloaded")


def steady_state_gain(f, h, q, r, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Limiting Kalman gain: fixed point of the covariance recursion.

    Iterates the Riccati map from P = 0 until successive posterior
    covariances differ by less than ``tol`` in Frobenius norm. Requires a
    detectable (F, H) pair to converge; raises NoConvergence otherwise.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    f = np.atleast_2d(np.asarray(f, dtype=float))
    h = np.atleast_2d(np.asarray(h, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    n = f.shape[0]
    p = np.zeros((n, n))
    eye = np.eye(n)
    for _ in range(max_iter):
        p_pred = _sym(f @ p @ f.T + q)
        s = _sym(h @ p_pred @ h.T + r)
        try:
            np.linalg.cholesky(s)
        except LinAlgError as exc:
            raise DegenerateInnovation("singular innovation covariance") from exc
        gain = np.linalg.solve(s, h @ p_pred).T
        ikh = eye - gain @ h
        p_new = _sym(ikh @ p_pred @ ikh.T + gain @ r @ gain.T)
        if float(np.linalg.norm(p_new - p)) < tol:
            return gain
        p = p_new
    raise NoConvergence(f"covariance recursion did not settle in {max_iter} iterations")


def gains_to_csv(schedule: GainSchedule) -> str:
    """Serialize a schedule: step column plus row-major gain entries."""
    _, n_x, n_z = schedule.gains.shape
    out = io.StringIO()
    out.write(f"# kind: {schedule.kind}\n")
    cols = ",".join(f"k_{r}_{c}" for r in range(n_x) for c in range(n_z))
    out.write(f"step,{cols}\n")
    for k, gain in enumerate(schedule.gains):
        entries = ",".join(repr(float(v)) for v in gain.reshape(-1))
        out.write(f"{k},{entries}\n")
    return out.getvalue()


def gains_from_csv(text: str) -> GainSchedule:
    """Parse the ``gains_to_csv`` format back into a schedule."""
    kind = None
    rows = []
    header = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if body.startswith("kind:"):
                kind = body.split(":", 1)[1].strip()
            continue
        if header is None:
            header = line.split(",")
            continue
        rows.append(line.split(","))
    if kind is None or header is None or not rows:
        raise ValueError("gain CSV needs a kind comment, a header, and at least one row")
    shape_rows = max(int(name.split("_")[1]) for name in header[1:]) + 1
    shape_cols = max(int(name.split("_")[2]) for name in header[1:]) + 1
    gains = np.array(
        [[float(v) for v in row[1:]] for row in rows], dtype=float
    ).reshape(len(rows), shape_rows, shape_cols)
    return GainSchedule(gains, kind)
