"""Linear state-space system definitions and a ground-truth simulator.

The tracking construction used throughout the benchmarks is a
random-walk-velocity model per axis: state [position, velocity], position
measured directly, and a scalar mixture noise lifted along [dt, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .gaussians import Gaussian, GaussianMixture, mixture_sample

__all__ = [
    "MEAS_TICK",
    "SystemModel",
    "TimeGrid",
    "Trajectory",
    "constant_grid",
    "rw_velocity_model",
    "simulate",
]

# Measurement interval of the target hardware; every step length must be
# a positive integer multiple of this tick.
MEAS_TICK = 0.1080
_TICK_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Per-step intervals dt_k, each a positive multiple of MEAS_TICK."""

    dts: tuple[float, ...]

    def __post_init__(self):
        dts = tuple(float(dt) for dt in self.dts)
        if not dts:
            raise ValueError("grid must contain at least one step")
        for k, dt in enumerate(dts):
            ticks = round(dt / MEAS_TICK)
            if ticks < 1 or abs(dt - ticks * MEAS_TICK) > _TICK_TOL:
                raise ValueError(
                    f"grid step {k}: dt={dt!r} is not a positive multiple of {MEAS_TICK}"
                )
        object.__setattr__(self, "dts", dts)

    def __len__(self) -> int:
        return len(self.dts)


def constant_grid(n_steps: int = 1000, ticks: int = 1) -> TimeGrid:
    """A grid of ``n_steps`` equal intervals of ``ticks`` measurement ticks."""
    if n_steps < 1 or ticks < 1:
        raise ValueError("n_steps and ticks must be positive")
    return TimeGrid((ticks * MEAS_TICK,) * n_steps)


@dataclass(frozen=True)
class SystemModel:
    """A linear system with per-step matrices and Gaussian-mixture noises.

    ``transition``/``observation`` map a step index to F_k / H_k;
    ``process_noise``/``meas_noise`` map it to the mixtures of v_k / w_k.
    ``process_basis``, when set, exposes the generating direction g and the
    scalar mixture such that v_k = v * g; it is used to score process-noise
    residuals when the lifted per-cluster covariances are rank deficient.
    """

    n_x: int
    n_z: int
    transition: Callable[[int], np.ndarray]
    observation: Callable[[int], np.ndarray]
    process_noise: Callable[[int], GaussianMixture]
    meas_noise: Callable[[int], GaussianMixture]
    process_basis: Optional[Callable[[int], tuple[np.ndarray, GaussianMixture]]] = None

    def __post_init__(self):
        if self.n_x < 1 or self.n_z < 1:
            raise ValueError("state and measurement dimensions must be positive")


@dataclass(frozen=True)
class Trajectory:
    """Simulated or ingested run: measurements plus optional ground truth.

    ``states``, ``active_v`` and ``active_w`` are None for external logs
    that carry no truth; when present all arrays share the grid's length.
    """

    grid: TimeGrid
    measurements: np.ndarray
    states: Optional[np.ndarray] = None
    active_v: Optional[np.ndarray] = None
    active_w: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.grid)
        z = np.array(self.measurements, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[0] != n:
            raise ValueError(f"{z.shape[0]} measurements for {n} grid steps")
        z.flags.writeable = False
        object.__setattr__(self, "measurements", z)
        if self.states is not None:
            xs = np.array(self.states, dtype=float)
            if xs.ndim != 2 or xs.shape[0] != n:
                raise ValueError("states must be an (n_steps, n_x) array")
            xs.flags.writeable = False
            object.__setattr__(self, "states", xs)
        for name in ("active_v", "active_w"):
            labels = getattr(self, name)
            if labels is None:
                continue
            labels = np.array(labels, dtype=int)
            if labels.shape != (n,):
                raise ValueError(f"{name} must have one label per step")
            if np.any(labels < 0):
                raise ValueError(f"{name} contains negative cluster indices")
            labels.flags.writeable = False
            object.__setattr__(self, name, labels)

    def __len__(self) -> int:
        return len(self.grid)

    @property
    def has_truth(self) -> bool:
        return self.states is not None

    @property
    def has_labels(self) -> bool:
        return self.active_v is not None and self.active_w is not None


def _lift_process_mixture(scalar_gm: GaussianMixture, dt: float) -> GaussianMixture:
    """Scalar clusters (u, s2) become (u*[dt,1], s2*[[dt^2,dt],[dt,1]])."""
    g = np.array([dt, 1.0])
    outer = np.outer(g, g)
    comps = tuple(
        Gaussian(comp.mean[0] * g, comp.cov[0, 0] * outer) for comp in scalar_gm.components
    )
    return GaussianMixture(scalar_gm.weights, comps)


def rw_velocity_model(
    scalar_process_gm: GaussianMixture,
    meas_gm: GaussianMixture,
    grid: TimeGrid,
) -> SystemModel:
    """Random-walk-velocity tracking model on the given grid.

    F_k = [[1, dt_k], [0, 1]], H_k = [1, 0]; the scalar process mixture is
    lifted along [dt_k, 1] per step, the measurement mixture is used as is.
    Per-cluster lifted covariances are rank one by construction, so the
    model carries a ``process_basis`` for residual scoring.
    """
    if scalar_process_gm.dim != 1 or meas_gm.dim != 1:
        raise ValueError("both noise mixtures must be one-dimensional")
    transitions: dict[float, np.ndarray] = {}
    lifted: dict[float, GaussianMixture] = {}
    bases: dict[float, tuple[np.ndarray, GaussianMixture]] = {}
    for dt in set(grid.dts):
        f = np.array([[1.0, dt], [0.0, 1.0]])
        f.flags.writeable = False
        transitions[dt] = f
        lifted[dt] = _lift_process_mixture(scalar_process_gm, dt)
        g = np.array([dt, 1.0])
        g.flags.writeable = False
        bases[dt] = (g, scalar_process_gm)
    h = np.array([[1.0, 0.0]])
    h.flags.writeable = False
    return SystemModel(
        n_x=2,
        n_z=1,
        transition=lambda k: transitions[grid.dts[k]],
        observation=lambda k: h,
        process_noise=lambda k: lifted[grid.dts[k]],
        meas_noise=lambda k: meas_gm,
        process_basis=lambda k: bases[grid.dts[k]],
    )


def simulate(
    model: SystemModel,
    x0,
    grid: TimeGrid,
    rng: np.random.Generator,
) -> Trajectory:
    """Roll the system forward from ``x0`` and record everything.

    Per step: draw (cluster, v) from the process mixture, advance the
    state, draw (cluster, w) from the measurement mixture, observe. The
    generating cluster labels are kept as ground truth.
    """
    x = np.asarray(x0, dtype=float).reshape(model.n_x)
    n = len(grid)
    states = np.empty((n, model.n_x))
    measurements = np.empty((n, model.n_z))
    active_v = np.empty(n, dtype=int)
    active_w = np.empty(n, dtype=int)
    for k in range(n):
        i, v = mixture_sample(model.process_noise(k), rng)
        x = model.transition(k) @ x + v
        j, w = mixture_sample(model.meas_noise(k), rng)
        measurements[k] = model.observation(k) @ x + w
        states[k] = x
        active_v[k] = i
        active_w[k] = j
    return Trajectory(
        grid=grid,
        measurements=measurements,
        states=states,
        active_v=active_v,
        active_w=active_w,
    )
