import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from emvr import (Dataset, DomainError, GmmParams, PooledGmm, ScalarTwoGmm,
                  ScalarTwoGmmParams, full_stats, load_params, mean_field,
                  run_em, save_params, scalar2_m_step)
from emvr.data import gen_multivariate_mixture
from emvr.gmm import (gmm_log_partition, gmm_m_step, gmm_phi, gmm_posterior,
                      init_kmeans, init_random_responsibility,
                      stats_from_params)


def random_params(g, p, seed):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(g))
    means = rng.standard_normal((g, p))
    a = rng.standard_normal((p, p))
    cov = a @ a.T + p * np.eye(p)
    return GmmParams(weights=w, means=means, cov_chol=np.linalg.cholesky(cov))


class TestPosterior:
    def test_equal_means_gives_weights(self):
        params = GmmParams(weights=np.array([0.3, 0.7]),
                           means=np.zeros((2, 2)),
                           cov_chol=np.eye(2))
        post = gmm_posterior(params, np.array([0.4, -1.0]))
        assert np.abs(post - [0.3, 0.7]).max() <= 1e-15

    def test_single_component(self):
        params = GmmParams(weights=np.array([1.0]), means=np.zeros((1, 3)),
                           cov_chol=np.eye(3))
        assert gmm_posterior(params, np.zeros(3)) == pytest.approx([1.0])

    def test_symmetric_midpoint(self):
        params = GmmParams(weights=np.array([0.5, 0.5]),
                           means=np.array([[-1.0], [1.0]]),
                           cov_chol=np.eye(1))
        post = gmm_posterior(params, np.array([0.0]))
        assert np.abs(post - 0.5).max() <= 1e-15

    @pytest.mark.parametrize("seed", range(5))
    def test_normalized_and_in_range(self, seed):
        params = random_params(4, 3, seed)
        rng = np.random.default_rng(seed + 50)
        for y in rng.standard_normal((10, 3)) * 3:
            post = gmm_posterior(params, y)
            assert abs(post.sum() - 1.0) <= 1e-14
            assert (post >= 0).all() and (post <= 1).all()


class TestSbar:
    def test_blocks(self, gmm_model, gmm_data):
        params = random_params(3, 2, 0)
        row = gmm_model.sbar_i(gmm_data, 4, params)
        masses, moments = row[:3], row[3:].reshape(3, 2)
        assert abs(masses.sum() - 1.0) <= 1e-14
        assert np.abs(moments.sum(axis=0) - gmm_data.row(4)).max() <= 1e-12

    def test_matches_latent_enumeration(self, gmm_data):
        # direct oracle: sum s(y, z) p(z | y) over the two latent values
        model = PooledGmm.from_data(2, gmm_data)
        params = random_params(2, 2, 3)
        y = gmm_data.row(7)
        cov = params.covariance()
        joint = np.array([params.weights[z] * multivariate_normal.pdf(y, params.means[z], cov)
                          for z in range(2)])
        post = joint / joint.sum()
        expected = np.zeros(6)
        for z in range(2):
            stat = np.zeros(6)
            stat[z] = 1.0
            stat[2 + 2 * z: 4 + 2 * z] = y
            expected += post[z] * stat
        assert np.abs(model.sbar_i(gmm_data, 7, params) - expected).max() <= 1e-12

    def test_full_stats_affine_structure(self, gmm_model, gmm_data):
        params = random_params(3, 2, 9)
        s = full_stats(gmm_model, gmm_data, params)
        assert abs(s[:3].sum() - 1.0) <= 1e-12
        moments = s[3:].reshape(3, 2)
        assert np.abs(moments.sum(axis=0) - gmm_data.values.mean(axis=0)).max() <= 1e-12


class TestMStep:
    def test_single_component_closed_form(self, gmm_data):
        model = PooledGmm.from_data(1, gmm_data)
        mean = gmm_data.values.mean(axis=0)
        s = np.concatenate([[1.0], mean])
        params = model.m_step(s)
        assert params.weights == pytest.approx([1.0])
        assert np.abs(params.means[0] - mean).max() <= 1e-14
        expected_cov = gmm_data.second_moment - np.outer(mean, mean)
        assert np.abs(params.covariance() - expected_cov).max() <= 1e-12

    def test_weights_renormalize(self, gmm_model):
        s = init_random_responsibility(gmm_model, _data(), seed=1)
        s = s.copy()
        s[:3] *= 1 + 3e-11  # masses now sum to 1 + 3e-11
        params = gmm_model.m_step(s) if False else gmm_m_step(s, _data().second_moment)
        assert abs(params.weights.sum() - 1.0) <= 1e-15

    def test_one_em_iteration_matches_textbook_oracle(self, gmm_data):
        model = PooledGmm.from_data(3, gmm_data)
        params0 = random_params(3, 2, 11)
        X = gmm_data.values
        cov0 = params0.covariance()
        dens = np.stack([params0.weights[z] * multivariate_normal.pdf(X, params0.means[z], cov0)
                         for z in range(3)], axis=1)
        resp = dens / dens.sum(axis=1, keepdims=True)
        nk = resp.sum(axis=0)
        w = nk / gmm_data.n
        mu = (resp.T @ X) / nk[:, None]
        pooled = np.zeros((2, 2))
        for ell in range(3):
            diff = X - mu[ell]
            pooled += (resp[:, ell][:, None] * diff).T @ diff
        pooled /= gmm_data.n
        params1 = model.m_step(full_stats(model, gmm_data, params0))
        assert np.abs(params1.weights - w).max() <= 1e-10
        assert np.abs(params1.means - mu).max() <= 1e-10
        assert np.abs(params1.covariance() - pooled).max() <= 1e-10

    def test_empty_component_rejected(self, gmm_model):
        s = np.zeros(gmm_model.stat_dim)
        s[0] = 1.0
        with pytest.raises(DomainError) as err:
            gmm_model.m_step(s)
        assert err.value.violation == "empty component"

    def test_degenerate_covariance_rejected(self, gmm_model, gmm_data):
        s = init_random_responsibility(gmm_model, gmm_data, seed=2).copy()
        s[3:5] *= 60.0  # inflate one moment block until the covariance loses PD
        with pytest.raises(DomainError) as err:
            gmm_model.m_step(s)
        assert err.value.violation == "degenerate covariance"

    def test_domain_check_paths(self, gmm_model, gmm_data):
        good = init_random_responsibility(gmm_model, gmm_data, seed=3)
        assert gmm_model.domain_check(good) is None
        bad = good.copy()
        bad[0] = 0.0
        assert gmm_model.domain_check(bad) == "empty component"
        worse = good.copy()
        worse[3:5] *= 60.0
        assert gmm_model.domain_check(worse) == "degenerate covariance"


def _data():
    return gen_multivariate_mixture(80, 3, 2, 3.0, seed=7)


class TestOptimality:
    """The refit parameters minimize the complete-data objective."""

    @staticmethod
    def _value(model, s, weights, means, chol):
        params = GmmParams(weights=weights, means=means, cov_chol=chol)
        return float(-s @ gmm_phi(params) + gmm_log_partition(params, model.second_moment))

    def test_refit_beats_perturbations_and_is_stationary(self, gmm_model, gmm_data):
        rng = np.random.default_rng(0)
        for trial in range(20):
            s = init_random_responsibility(gmm_model, gmm_data, seed=200 + trial)
            star = gmm_model.m_step(s)
            f_star = self._value(gmm_model, s, star.weights, star.means, star.cov_chol)
            for _ in range(5):
                z = np.log(star.weights) + 0.1 * rng.standard_normal(3)
                w = np.exp(z) / np.exp(z).sum()
                means = star.means + 0.05 * rng.standard_normal((3, 2))
                chol = star.cov_chol + 0.02 * np.tril(rng.standard_normal((2, 2)))
                if (np.diag(chol) <= 0).any():
                    continue
                assert self._value(gmm_model, s, w, means, chol) >= f_star - 1e-12

    def test_fd_gradient_vanishes_at_refit(self, gmm_model, gmm_data):
        # chart: weights via softmax, free means, lower-triangular factor
        for trial in range(20):
            s = init_random_responsibility(gmm_model, gmm_data, seed=300 + trial)
            star = gmm_model.m_step(s)
            z0 = np.log(star.weights)
            tril = np.tril_indices(2)

            def value(z, means_flat, chol_flat):
                w = np.exp(z - z.max())
                w = w / w.sum()
                chol = np.zeros((2, 2))
                chol[tril] = chol_flat
                return self._value(gmm_model, s, w, means_flat.reshape(3, 2), chol)

            x0 = np.concatenate([z0, star.means.reshape(-1), star.cov_chol[tril]])

            def f(x):
                return value(x[:3], x[3:9], x[9:])

            grad = np.zeros(x0.size)
            h = 1e-5
            for j in range(x0.size):
                e = np.zeros(x0.size)
                e[j] = h
                grad[j] = (f(x0 + e) - f(x0 - e)) / (2 * h)
            assert np.linalg.norm(grad) <= 1e-6


class TestNll:
    def test_single_component_closed_form(self, gmm_data):
        # at the exact MLE the Gaussian NLL has the entropy form
        model = PooledGmm.from_data(1, gmm_data)
        mean = gmm_data.values.mean(axis=0)
        params = model.m_step(np.concatenate([[1.0], mean]))
        p = gmm_data.dim
        expected = 0.5 * (p * np.log(2 * np.pi) + np.linalg.slogdet(params.covariance())[1] + p)
        assert model.penalized_nll(gmm_data, params) == pytest.approx(expected, abs=1e-10)

    def test_matches_direct_logsumexp_oracle(self, gmm_data):
        model = PooledGmm.from_data(3, gmm_data)
        params = random_params(3, 2, 17)
        cov = params.covariance()
        dens = np.stack([params.weights[z] * multivariate_normal.pdf(gmm_data.values,
                                                                     params.means[z], cov)
                         for z in range(3)], axis=1)
        expected = -np.log(dens.sum(axis=1)).mean()
        assert model.penalized_nll(gmm_data, params) == pytest.approx(expected, abs=1e-10)

    def test_duplicate_component_leaves_nll_unchanged(self, gmm_data):
        model2 = PooledGmm.from_data(2, gmm_data)
        params = random_params(1, 2, 23)
        single = GmmParams(weights=np.array([1.0]), means=params.means,
                           cov_chol=params.cov_chol)
        double = GmmParams(weights=np.array([0.5, 0.5]),
                           means=np.vstack([params.means, params.means]),
                           cov_chol=params.cov_chol)
        one = PooledGmm.from_data(1, gmm_data).penalized_nll(gmm_data, single)
        two = model2.penalized_nll(gmm_data, double)
        assert two == pytest.approx(one, abs=1e-12)

    def test_norm_const_flag(self, gmm_data):
        model = PooledGmm.from_data(3, gmm_data)
        params = random_params(3, 2, 29)
        delta = (model.penalized_nll(gmm_data, params)
                 - model.penalized_nll(gmm_data, params, include_norm_const=False))
        assert delta == pytest.approx(gmm_data.dim / 2 * np.log(2 * np.pi), abs=1e-14)

    @pytest.mark.parametrize("scale", [1e8, 1e-8])
    def test_log_domain_stability_under_scaling(self, scale):
        base = gen_multivariate_mixture(60, 3, 2, 3.0, seed=5)
        data = Dataset(base.values * scale)
        model = PooledGmm.from_data(3, data)
        s = init_random_responsibility(model, data, seed=1)
        params = model.m_step(s)
        assert np.isfinite(model.penalized_nll(data, params))
        post = gmm_posterior(params, data.row(0))
        assert np.isfinite(post).all() and abs(post.sum() - 1.0) <= 1e-14


class TestPhi:
    def test_single_component_at_origin(self):
        params = GmmParams(weights=np.array([1.0]), means=np.zeros((1, 2)),
                           cov_chol=np.eye(2))
        assert np.abs(gmm_phi(params)).max() == 0.0

    def test_zero_weight_rejected(self):
        params = GmmParams(weights=np.array([0.0, 1.0]), means=np.zeros((2, 1)),
                           cov_chol=np.eye(1))
        with pytest.raises(DomainError):
            gmm_phi(params)

    def test_complete_data_loglik_identity(self, gmm_data):
        # direct density oracle: the soft-assigned complete-data log
        # likelihood decomposes through the statistics and phi/psi
        model = PooledGmm.from_data(3, gmm_data)
        params = random_params(3, 2, 31)
        rng = np.random.default_rng(4)
        resp = rng.dirichlet(np.ones(3), size=gmm_data.n)
        cov = params.covariance()
        direct = 0.0
        for z in range(3):
            logp = (np.log(params.weights[z])
                    + multivariate_normal.logpdf(gmm_data.values, params.means[z], cov))
            direct += (resp[:, z] * logp).sum()
        direct /= gmm_data.n
        masses = resp.mean(axis=0)
        moments = resp.T @ gmm_data.values / gmm_data.n
        s = np.concatenate([masses, moments.reshape(-1)])
        via_stats = s @ gmm_phi(params) - gmm_log_partition(params, gmm_data.second_moment)
        assert via_stats == pytest.approx(direct, abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_refit_natural_jacobian_symmetry(self, gmm_model, gmm_data, seed):
        from emvr import fd_natural_jacobian
        s = init_random_responsibility(gmm_model, gmm_data, seed=400 + seed)
        _, asym = fd_natural_jacobian(gmm_model, s)
        assert asym <= 1e-4


class TestScalarTwo:
    def test_posterior_at_symmetric_point_returns_prior(self):
        data = Dataset(np.array([0.0]))
        model = ScalarTwoGmm.from_data(data)
        params = ScalarTwoGmmParams(mu=np.array([0.5, -0.5]))
        row = model.sbar_rows(data, None, params)[0]
        assert np.abs(row[:2] - [0.2, 0.8]).max() <= 1e-15

    def test_m_step_and_error_path(self):
        params = scalar2_m_step(np.array([0.4, 0.6, 0.2, -0.3]))
        assert params.mu == pytest.approx([0.5, -0.5])
        with pytest.raises(DomainError):
            scalar2_m_step(np.array([1.0, 0.0, 0.5, 0.0]))

    def test_one_em_step_matches_brute_oracle(self):
        rng = np.random.default_rng(12)
        y = rng.standard_normal(10) + np.where(rng.random(10) < 0.2, 1.0, -1.0) * 0.5
        data = Dataset(y)
        model = ScalarTwoGmm.from_data(data)
        params = ScalarTwoGmmParams(mu=np.array([1.0, -1.0]))
        num1 = 0.2 * norm.pdf(y, 1.0, 1.0)
        num2 = 0.8 * norm.pdf(y, -1.0, 1.0)
        p1 = num1 / (num1 + num2)
        expected_mu = np.array([(p1 * y).sum() / p1.sum(),
                                ((1 - p1) * y).sum() / (1 - p1).sum()])
        stepped = model.m_step(full_stats(model, data, params))
        assert np.abs(stepped.mu - expected_mu).max() <= 1e-12

    def test_nll_matches_direct(self, scalar_data, scalar_model):
        params = ScalarTwoGmmParams(mu=np.array([0.7, -0.3]))
        y = scalar_data.values[:, 0]
        direct = -np.log(0.2 * norm.pdf(y, 0.7, 1.0) + 0.8 * norm.pdf(y, -0.3, 1.0)).mean()
        assert scalar_model.penalized_nll(scalar_data, params) == pytest.approx(direct,
                                                                                abs=1e-12)


class TestCheckpointStats:
    def test_fused_pass_matches_reference(self, gmm_model, gmm_data):
        params = random_params(3, 2, 43)
        sbar, nll = gmm_model.checkpoint_stats(gmm_data, params)
        assert np.abs(sbar - full_stats(gmm_model, gmm_data, params)).max() <= 1e-13
        assert nll == pytest.approx(gmm_model.penalized_nll(gmm_data, params), abs=1e-12)
        sbar2, nan = gmm_model.checkpoint_stats(gmm_data, params, want_nll=False)
        assert np.array_equal(sbar, sbar2) and np.isnan(nan)

    def test_norm_const_convention_applies(self, gmm_data):
        from emvr import PooledGmm
        reduced = PooledGmm.from_data(3, gmm_data, include_norm_const=False)
        full = PooledGmm.from_data(3, gmm_data)
        params = random_params(3, 2, 47)
        delta = full.penalized_nll(gmm_data, params) - reduced.penalized_nll(gmm_data, params)
        assert delta == pytest.approx(np.log(2 * np.pi), abs=1e-14)
        _, w_full = full.checkpoint_stats(gmm_data, params)
        _, w_red = reduced.checkpoint_stats(gmm_data, params)
        assert w_full - w_red == pytest.approx(np.log(2 * np.pi), abs=1e-14)


class TestInitializers:
    def test_random_responsibility_admissible(self, gmm_model, gmm_data):
        s = init_random_responsibility(gmm_model, gmm_data, seed=0)
        assert gmm_model.domain_check(s) is None
        assert abs(s[:3].sum() - 1.0) <= 1e-12

    def test_kmeans_separated_fixture_recovers_centers(self):
        data = gen_multivariate_mixture(400, 3, 2, 8.0, seed=1)
        model = PooledGmm.from_data(3, data)
        s = init_kmeans(model, data, seed=0)
        trace = run_em(model, data, s, 60, metric_mode="none")
        h = mean_field(model, data, trace.s_final)
        assert np.linalg.norm(h) <= 1e-8

    def test_param_bridge_is_full_stats(self, gmm_model, gmm_data):
        params = random_params(3, 2, 37)
        assert np.array_equal(stats_from_params(gmm_model, gmm_data, params),
                              full_stats(gmm_model, gmm_data, params))


class TestSerialization:
    def test_round_trip_pooled(self, tmp_path):
        params = random_params(3, 2, 41)
        path = tmp_path / "params.txt"
        save_params(path, params)
        back = load_params(path)
        assert np.array_equal(back.weights, params.weights)
        assert np.array_equal(back.means, params.means)
        assert np.array_equal(back.cov_chol, params.cov_chol)

    def test_round_trip_scalar(self, tmp_path):
        params = ScalarTwoGmmParams(mu=np.array([0.123456789012345, -2.5e-7]))
        path = tmp_path / "params.txt"
        save_params(path, params)
        assert np.array_equal(load_params(path).mu, params.mu)

    def test_unknown_format_rejected(self, tmp_path):
        path = tmp_path / "params.txt"
        path.write_text("format = nonsense\n")
        with pytest.raises(ValueError):
            load_params(path)
