import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import norm

from gsfkit import (
    DegenerateInnovation,
    Gaussian,
    GaussianMixture,
    KalmanState,
    ModelIndex,
    constant_grid,
    gsf_step,
    innovation_params,
    kf_step,
    posterior_as_mixture,
    rw_velocity_model,
)

from conftest import rand_mixture, rand_pd, static_model


def random_bank_inputs(rng, n_x=None, n_z=None, c_v=None, c_w=None):
    n_x = n_x if n_x is not None else int(rng.integers(1, 4))
    n_z = n_z if n_z is not None else int(rng.integers(1, 3))
    c_v = c_v if c_v is not None else int(rng.integers(1, 5))
    c_w = c_w if c_w is not None else int(rng.integers(1, 5))
    f = rng.standard_normal((n_x, n_x))
    h = rng.standard_normal((n_z, n_x))
    vgm = rand_mixture(rng, n_x, c_v)
    wgm = rand_mixture(rng, n_z, c_w)
    model = static_model(f, h, vgm, wgm)
    state = KalmanState(rng.standard_normal(n_x), rand_pd(rng, n_x), 0)
    z = rng.standard_normal(n_z)
    return model, state, z


class TestGsfStepDegenerateBank:
    def test_single_pair_matches_kf_step(self, rng):
        for _ in range(20):
            model, state, z = random_bank_inputs(rng, c_v=1, c_w=1)
            posterior = gsf_step(state, model, z, 0)
            assert posterior.count == 1
            assert posterior.weights[0] == 1.0
            vbar = Gaussian(model.process_noise(0).means[0], model.process_noise(0).covs[0])
            wbar = Gaussian(model.meas_noise(0).means[0], model.meas_noise(0).covs[0])
            ref, innovation, s, _ = kf_step(state, model, z, vbar, wbar)
            assert_allclose(posterior.means[0], ref.mean, rtol=1e-12, atol=1e-14)
            assert_allclose(posterior.covs[0], ref.cov, rtol=1e-12, atol=1e-14)
            assert_allclose(posterior.innov_covs[0], s, rtol=1e-12)


class TestGsfStepWeights:
    def test_indistinguishable_members_split_evenly(self):
        # two process clusters with identical statistics and equal priors
        vgm = GaussianMixture.from_scalars([0.5, 0.5], [0.0, 0.0], [1.0, 1.0])
        wgm = GaussianMixture.from_scalars([1.0], [0.0], [1.0])
        model = static_model([[1.0]], [[1.0]], vgm, wgm)
        posterior = gsf_step(KalmanState([0.0], [[1.0]], 0), model, [0.4], 0)
        assert_allclose(posterior.weights, [0.5, 0.5], rtol=0, atol=1e-16)

    def test_two_member_likelihood_ratio(self):
        """Members predicting zhat 0 and 2 with S=1 at z=0 split the weight
        as the standard-normal density ratio e^2 : 1."""
        vgm = GaussianMixture.from_scalars([0.5, 0.5], [0.0, 2.0], [0.0, 0.0])
        wgm = GaussianMixture.from_scalars([1.0], [0.0], [1.0])
        model = static_model([[1.0]], [[1.0]], vgm, wgm)
        state = KalmanState([0.0], [[0.0]], 0)
        posterior = gsf_step(state, model, [0.0], 0)
        lik = np.array([norm.pdf(0.0, 0.0, 1.0), norm.pdf(0.0, 2.0, 1.0)])
        expected = lik / lik.sum()
        assert_allclose(expected[0], 0.8807970779778823, rtol=1e-12)
        assert_allclose(posterior.weights, expected, rtol=1e-12)

    def test_weights_match_per_member_oracle(self, rng):
        """Bank weights equal prior * N(z; zhat, S) per member, evaluated
        independently via scipy, for random banks."""
        from scipy.stats import multivariate_normal

        for _ in range(20):
            model, state, z = random_bank_inputs(rng)
            posterior = gsf_step(state, model, z, 0)
            vgm, wgm = model.process_noise(0), model.meas_noise(0)
            scores = np.empty(posterior.count)
            for flat in range(posterior.count):
                i, j = posterior.model_index(flat)
                zhat, s = innovation_params(state, model, 0, ModelIndex(i, j))
                scores[flat] = (
                    vgm.weights[i]
                    * wgm.weights[j]
                    * multivariate_normal.pdf(z, mean=zhat, cov=s)
                )
            assert_allclose(posterior.weights, scores / scores.sum(), rtol=1e-9)

    def test_normalization_over_random_banks(self, rng):
        for _ in range(200):
            model, state, z = random_bank_inputs(rng)
            posterior = gsf_step(state, model, z, 0)
            assert abs(float(posterior.weights.sum()) - 1.0) <= 1e-12

    def test_prior_rescaling_within_renormalization_window(self):
        vgm_a = GaussianMixture.from_scalars([0.2, 0.8], [-1.0, 1.0], [1.0, 1.0])
        vgm_b = GaussianMixture.from_scalars(
            [0.2 * 1.0005, 0.8 * 1.0005], [-1.0, 1.0], [1.0, 1.0]
        )
        wgm = GaussianMixture.from_scalars([1.0], [0.0], [1.0])
        state = KalmanState([0.3], [[0.5]], 0)
        pa = gsf_step(state, static_model([[1.0]], [[1.0]], vgm_a, wgm), [0.7], 0)
        pb = gsf_step(state, static_model([[1.0]], [[1.0]], vgm_b, wgm), [0.7], 0)
        assert_allclose(pa.weights, pb.weights, rtol=1e-9)

    def test_permutation_equivariance(self, rng):
        vgm = rand_mixture(rng, 2, 3)
        wgm = rand_mixture(rng, 1, 2)
        perm = [2, 0, 1]
        vgm_p = GaussianMixture(
            vgm.weights[perm], tuple(vgm.components[p] for p in perm)
        )
        f = np.array([[1.0, 0.1], [0.0, 1.0]])
        h = np.array([[1.0, 0.0]])
        state = KalmanState(rng.standard_normal(2), rand_pd(rng, 2), 0)
        z = rng.standard_normal(1)
        pa = gsf_step(state, static_model(f, h, vgm, wgm), z, 0)
        pb = gsf_step(state, static_model(f, h, vgm_p, wgm), z, 0)
        for i_new, i_old in enumerate(perm):
            for j in range(2):
                fa = pa.flat_index(ModelIndex(i_old, j))
                fb = pb.flat_index(ModelIndex(i_new, j))
                assert_allclose(pb.weights[fb], pa.weights[fa], rtol=1e-12)
                assert_allclose(pb.means[fb], pa.means[fa], rtol=1e-12)
                assert_allclose(pb.covs[fb], pa.covs[fa], rtol=1e-12)

    def test_underflowed_weights_are_kept(self):
        # one member sits 60 sigma away; its weight underflows to 0 but the
        # bank still carries all entries
        vgm = GaussianMixture.from_scalars([0.5, 0.5], [0.0, 60.0], [0.0, 0.0])
        wgm = GaussianMixture.from_scalars([1.0], [0.0], [1.0])
        model = static_model([[1.0]], [[1.0]], vgm, wgm)
        posterior = gsf_step(KalmanState([0.0], [[0.0]], 0), model, [0.0], 0)
        assert posterior.count == 2
        assert posterior.weights[1] == 0.0
        assert posterior.weights[0] == 1.0


class TestInnovationParams:
    def test_perfect_prior_zero_noise_means(self):
        vgm = GaussianMixture.from_scalars([1.0], [0.0], [0.0])
        wgm = GaussianMixture.from_scalars([1.0], [0.0], [2.0])
        model = static_model([[1.0]], [[1.0]], vgm, wgm)
        state = KalmanState([3.0], [[0.0]], 0)
        zhat, s = innovation_params(state, model, 0, ModelIndex(0, 0))
        assert zhat[0] == 3.0
        assert s[0, 0] == 2.0

    def test_noise_means_add(self):
        vgm = GaussianMixture.from_scalars([1.0], [2.0], [0.0])
        wgm = GaussianMixture.from_scalars([1.0], [3.0], [1.0])
        model = static_model([[1.0]], [[1.0]], vgm, wgm)
        state = KalmanState([1.0], [[0.0]], 0)
        zhat, _ = innovation_params(state, model, 0, ModelIndex(0, 0))
        assert zhat[0] == 6.0

    def test_tracking_model_first_cluster(self):
        # cluster means -10.5 at c=0.21 lift to a predicted measurement of
        # -10.5*0.108 - 10.5 from a zero prior
        means = 0.21 * np.array([-50.0, -30.0, 0.0, 30.0, 50.0])
        gm = GaussianMixture.from_scalars([0.2] * 5, means, np.ones(5))
        model = rw_velocity_model(gm, gm, constant_grid(1))
        state = KalmanState([0.0, 0.0], np.zeros((2, 2)), 0)
        zhat, s = innovation_params(state, model, 0, ModelIndex(0, 0))
        assert_allclose(zhat[0], -11.634, rtol=1e-12)
        # S = H Q0 H' + R0 = (dt*sigma)^2 + 1
        assert_allclose(s[0, 0], 0.108**2 + 1.0, rtol=1e-12)


class TestErrorsAndSerialization:
    def test_degenerate_innovation_names_the_pair(self):
        vgm = GaussianMixture.from_scalars([0.5, 0.5], [0.0, 1.0], [0.0, 0.0])
        wgm = GaussianMixture.from_scalars([0.5, 0.5], [0.0, 0.0], [1.0, 0.0])
        model = static_model([[1.0]], [[1.0]], vgm, wgm)
        state = KalmanState([0.0], [[0.0]], 0)
        with pytest.raises(DegenerateInnovation, match=r"\(0, 1\)"):
            gsf_step(state, model, [0.0], 0)

    def test_posterior_csv_and_mixture_view(self, rng):
        model, state, z = random_bank_inputs(rng, n_x=2, n_z=1, c_v=2, c_w=2)
        posterior = gsf_step(state, model, z, 0)
        text = posterior.to_csv()
        lines = text.strip().splitlines()
        assert lines[0].startswith("i,j,weight,mean_0")
        assert len(lines) == 1 + posterior.count
        mixture = posterior_as_mixture(posterior)
        assert mixture.count == posterior.count
        # the mixture view renormalizes, which may shift the last few bits
        assert_allclose(mixture.weights, posterior.weights, rtol=1e-12)

    def test_flat_index_round_trip(self, rng):
        model, state, z = random_bank_inputs(rng, c_v=3, c_w=4)
        posterior = gsf_step(state, model, z, 0)
        for flat in range(posterior.count):
            assert posterior.flat_index(posterior.model_index(flat)) == flat
        with pytest.raises(ValueError):
            posterior.flat_index(ModelIndex(3, 0))

    def test_entry_views(self, rng):
        model, state, z = random_bank_inputs(rng, c_v=2, c_w=3)
        posterior = gsf_step(state, model, z, 0)
        entries = posterior.entries
        assert len(entries) == 6
        assert entries[5].index == ModelIndex(1, 2)
        assert_allclose(entries[5].mean, posterior.means[5], rtol=0, atol=0)


class TestPosteriorPsd:
    def test_member_covariances_stay_psd(self, rng):
        for _ in range(50):
            model, state, z = random_bank_inputs(rng)
            posterior = gsf_step(state, model, z, 0)
            eigs = np.linalg.eigvalsh(posterior.covs)
            assert eigs.min() >= -1e-10
