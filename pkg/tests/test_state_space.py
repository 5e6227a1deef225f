import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import chisquare, norm

from gsfkit import (
    MEAS_TICK,
    GaussianMixture,
    TimeGrid,
    constant_grid,
    mixture_sample,
    rw_velocity_model,
    simulate,
)

from conftest import static_model


class TestTimeGrid:
    def test_accepts_tick_multiples(self):
        TimeGrid((MEAS_TICK, 2 * MEAS_TICK, 7 * MEAS_TICK))

    def test_rejects_off_tick_dt(self):
        with pytest.raises(ValueError, match="multiple"):
            TimeGrid((0.15,))

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            TimeGrid((0.0,))
        with pytest.raises(ValueError):
            TimeGrid((-MEAS_TICK,))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            TimeGrid(())

    def test_constant_grid_defaults(self):
        grid = constant_grid()
        assert len(grid) == 1000
        assert grid.dts[0] == MEAS_TICK


def model1_scalar_gm(c=0.21):
    means = c * np.array([-50.0, -30.0, 0.0, 30.0, 50.0])
    return GaussianMixture.from_scalars([0.2] * 5, means, np.ones(5))


class TestRwVelocityModel:
    def test_lifted_cluster_parameters(self):
        # scalar cluster (u=2, s2=1) at dt=0.108 lifts to mean u*[dt,1]
        # and covariance s2*[[dt^2, dt], [dt, 1]]
        vgm = GaussianMixture.from_scalars([1.0], [2.0], [1.0])
        wgm = GaussianMixture.from_scalars([1.0], [0.0], [1.0])
        model = rw_velocity_model(vgm, wgm, constant_grid(3))
        lifted = model.process_noise(0)
        assert_allclose(lifted.means[0], [0.216, 2.0], rtol=1e-14)
        assert_allclose(lifted.covs[0], [[0.011664, 0.108], [0.108, 1.0]], rtol=1e-14)

    def test_zero_cluster_degenerates(self):
        vgm = GaussianMixture.from_scalars([1.0], [0.0], [0.0])
        wgm = GaussianMixture.from_scalars([1.0], [0.0], [1.0])
        model = rw_velocity_model(vgm, wgm, constant_grid(1))
        lifted = model.process_noise(0)
        assert_allclose(lifted.means[0], [0.0, 0.0], atol=0)
        assert_allclose(lifted.covs[0], np.zeros((2, 2)), atol=0)

    def test_two_tick_step_scales_quadratically(self):
        vgm = GaussianMixture.from_scalars([1.0], [0.0], [1.0])
        wgm = GaussianMixture.from_scalars([1.0], [0.0], [1.0])
        model = rw_velocity_model(vgm, wgm, TimeGrid((2 * MEAS_TICK,)))
        assert_allclose(
            model.process_noise(0).covs[0],
            [[0.046656, 0.216], [0.216, 1.0]],
            rtol=1e-12,
        )

    def test_synthetic_family_has_five_flat_clusters(self):
        model = rw_velocity_model(
            model1_scalar_gm(), model1_scalar_gm(), constant_grid(2)
        )
        lifted = model.process_noise(0)
        assert lifted.count == 5
        assert_allclose(lifted.weights, [0.2] * 5, rtol=0, atol=0)

    def test_transition_and_observation(self):
        model = rw_velocity_model(
            model1_scalar_gm(), model1_scalar_gm(), TimeGrid((MEAS_TICK, 3 * MEAS_TICK))
        )
        assert_allclose(model.transition(0), [[1.0, MEAS_TICK], [0.0, 1.0]], rtol=0)
        assert_allclose(model.transition(1), [[1.0, 3 * MEAS_TICK], [0.0, 1.0]], rtol=0)
        assert_allclose(model.observation(0), [[1.0, 0.0]], rtol=0)

    def test_lifted_covariances_are_rank_one(self):
        model = rw_velocity_model(
            model1_scalar_gm(), model1_scalar_gm(), constant_grid(1)
        )
        for cov in model.process_noise(0).covs:
            norm2 = float(np.abs(cov).max()) ** 2
            assert abs(np.linalg.det(cov)) <= 1e-12 * max(norm2, 1.0)

    def test_process_basis_exposes_scalar_source(self):
        vgm = model1_scalar_gm()
        model = rw_velocity_model(vgm, vgm, TimeGrid((2 * MEAS_TICK,)))
        direction, scalar = model.process_basis(0)
        assert_allclose(direction, [2 * MEAS_TICK, 1.0], rtol=0)
        assert scalar is vgm

    def test_rejects_multidimensional_sources(self):
        gm2 = GaussianMixture.from_arrays([1.0], [[0.0, 0.0]], [np.eye(2)])
        gm1 = GaussianMixture.from_scalars([1.0], [0.0], [1.0])
        with pytest.raises(ValueError):
            rw_velocity_model(gm2, gm1, constant_grid(1))


class TestSimulate:
    def test_zero_noise_identity_system_is_constant(self, rng):
        zero = GaussianMixture.from_arrays(
            [1.0], [[0.0, 0.0]], [np.zeros((2, 2))]
        )
        zero_z = GaussianMixture.from_scalars([1.0], [0.0], [0.0])
        model = static_model(np.eye(2), [[1.0, 0.0]], zero, zero_z)
        x0 = np.array([3.0, -1.0])
        traj = simulate(model, x0, constant_grid(10), rng)
        for k in range(10):
            assert np.array_equal(traj.states[k], x0)
            assert traj.measurements[k, 0] == 3.0

    def test_seed_replay_is_bit_identical(self):
        gm = model1_scalar_gm()
        model = rw_velocity_model(gm, gm, constant_grid(50))
        a = simulate(model, [0.0, 0.0], constant_grid(50), np.random.default_rng(9))
        b = simulate(model, [0.0, 0.0], constant_grid(50), np.random.default_rng(9))
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.measurements, b.measurements)
        assert np.array_equal(a.active_v, b.active_v)
        assert np.array_equal(a.active_w, b.active_w)

    def test_measurement_reconstruction_is_exact(self):
        """Replaying the draw stream shows z_k is built from H x_k plus the
        recorded measurement-noise draw, bit for bit."""
        gm = model1_scalar_gm()
        grid = constant_grid(100)
        model = rw_velocity_model(gm, gm, grid)
        traj = simulate(model, [0.0, 0.0], grid, np.random.default_rng(21))

        rng = np.random.default_rng(21)
        x = np.zeros(2)
        for k in range(100):
            i, v = mixture_sample(model.process_noise(k), rng)
            x = model.transition(k) @ x + v
            j, w = mixture_sample(model.meas_noise(k), rng)
            z = model.observation(k) @ x + w
            assert np.array_equal(traj.states[k], x)
            assert np.array_equal(traj.measurements[k], z)
            assert traj.active_v[k] == i
            assert traj.active_w[k] == j

    def test_process_draws_match_mixture_density(self):
        """Chi-square goodness of fit of the recovered scalar process draws
        against the generating mixture, 20 equal-probability bins."""
        gm = model1_scalar_gm()
        grid = constant_grid(1000)
        model = rw_velocity_model(gm, gm, grid)
        traj = simulate(model, [0.0, 0.0], grid, np.random.default_rng(31))

        # v_k = x_k - F x_{k-1}; its second component is the scalar draw
        draws = np.empty(1000)
        prev = np.zeros(2)
        for k in range(1000):
            v = traj.states[k] - model.transition(k) @ prev
            draws[k] = v[1]
            prev = traj.states[k]

        def mixture_cdf(x):
            return sum(
                w * norm.cdf(x, loc=c.mean[0], scale=np.sqrt(c.cov[0, 0]))
                for w, c in zip(gm.weights, gm.components)
            )

        # invert the cdf by bisection for 20 equal-probability bin edges
        edges = []
        for q in np.linspace(0.05, 0.95, 19):
            lo, hi = -50.0, 50.0
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if mixture_cdf(mid) < q:
                    lo = mid
                else:
                    hi = mid
            edges.append(0.5 * (lo + hi))
        counts, _ = np.histogram(draws, bins=[-np.inf] + edges + [np.inf])
        result = chisquare(counts, f_exp=np.full(20, 50.0))
        assert result.pvalue > 0.001

    def test_active_label_frequencies(self):
        gm = GaussianMixture.from_scalars([0.1, 0.6, 0.3], [-1.0, 0.0, 1.0], [1.0, 1.0, 1.0])
        grid = constant_grid(10_000)
        model = rw_velocity_model(gm, gm, grid)
        traj = simulate(model, [0.0, 0.0], grid, np.random.default_rng(41))
        for labels in (traj.active_v, traj.active_w):
            freqs = np.bincount(labels, minlength=3) / len(labels)
            assert_allclose(freqs, [0.1, 0.6, 0.3], atol=0.02)

    def test_trajectory_validation(self):
        grid = constant_grid(3)
        with pytest.raises(ValueError, match="measurements"):
            from gsfkit import Trajectory

            Trajectory(grid=grid, measurements=np.zeros((2, 1)))
        from gsfkit import Trajectory

        with pytest.raises(ValueError, match="label"):
            Trajectory(grid=grid, measurements=np.zeros((3, 1)), active_v=np.zeros(2, int))
        with pytest.raises(ValueError, match="negative"):
            Trajectory(
                grid=grid,
                measurements=np.zeros((3, 1)),
                active_v=np.array([0, -1, 0]),
                active_w=np.array([0, 0, 0]),
            )
