"""Model core: priors, sampling, likelihood, finite-difference Jacobians."""

import numpy as np
import pytest

from nested_eig.builtin import make_example1, make_pk
from nested_eig.errors import ForwardModelError
from nested_eig.models import (
    Dataset,
    ExperimentModel,
    LognormalFactor,
    NormalFactor,
    PriorSpec,
    UniformFactor,
    jac_phi_fd,
    jac_theta_fd,
    jac_z_fd,
    log_likelihood,
    log_likelihood_batch,
    log_prior_joint,
    model_jac_phi,
    model_jac_theta,
    residual,
    sample_data,
    sample_prior,
)

RNG = np.random.default_rng


def scalar_model(sigma2=1.0, n_e=1):
    """d_y = 1 model y = theta + eps, no nuisance."""
    return ExperimentModel(
        d_y=1, d_theta=1, d_phi=0, d_xi=1, n_e=n_e,
        noise_cov=np.array([[sigma2]]),
        forward=lambda xi, t, p: np.array([t[0]]),
        jac_theta=lambda xi, t, p: np.array([[1.0]]),
        jac_phi=lambda xi, t, p: np.zeros((1, 0)),
    )


class TestPriorFactors:
    def test_normal_scalar_at_zero(self):
        f = NormalFactor([0.0], [[1.0]])
        assert f.log_density(np.array([0.0])) == pytest.approx(-0.5 * np.log(2 * np.pi))

    def test_normal_hess_is_negated_precision(self):
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        f = NormalFactor([1.0, -1.0], cov)
        H = f.hess_log_density(np.array([0.3, 0.4]))
        np.testing.assert_array_equal(H, -f.precision)

    def test_uniform_support(self):
        f = UniformFactor([0.0], [1.0])
        assert f.log_density(np.array([0.5])) == 0.0
        assert f.log_density(np.array([1.5])) == -np.inf
        assert np.all(f.grad_log_density(np.array([0.5])) == 0.0)
        assert np.all(f.hess_log_density(np.array([0.5])) == 0.0)

    def test_lognormal_closed_form_at_one(self):
        f = LognormalFactor([0.0], 0.05)
        # -1/2 log(2 pi 0.05) at the mode of log x
        assert f.log_density(np.array([1.0])) == pytest.approx(0.5789276035723228, abs=1e-12)
        assert f.log_density(np.array([-1.0])) == -np.inf

    def test_lognormal_spread_readings(self):
        fv = LognormalFactor([0.0], 0.05, spread="variance")
        fs = LognormalFactor([0.0], np.sqrt(0.05), spread="stddev")
        x = np.array([0.7])
        assert fv.log_density(x) == pytest.approx(fs.log_density(x), rel=1e-12)

    @pytest.mark.parametrize("factor", [
        NormalFactor([0.5, -0.2], np.array([[1.0, 0.2], [0.2, 0.5]])),
        LognormalFactor([0.0, np.log(0.1)], 0.05),
        UniformFactor([0.0, 1.0], [2.0, 3.0]),
    ])
    def test_grad_hess_match_finite_differences(self, factor):
        rng = RNG(3)
        for _ in range(20):
            x = factor.sample(rng)
            g = factor.grad_log_density(x)
            H = factor.hess_log_density(x)
            h = 1e-6 * np.maximum(1.0, np.abs(x))
            for i in range(factor.dim):
                e = np.zeros(factor.dim)
                e[i] = h[i]
                gfd = (factor.log_density(x + e) - factor.log_density(x - e)) / (2 * h[i])
                assert g[i] == pytest.approx(gfd, rel=2e-5, abs=2e-5)
                hfd = (factor.grad_log_density(x + e) - factor.grad_log_density(x - e)) / (2 * h[i])
                np.testing.assert_allclose(H[:, i], hfd, rtol=2e-5, atol=2e-5)

    def test_batch_matches_scalar(self):
        for factor in (
            NormalFactor([0.1], [[0.5]]),
            LognormalFactor([0.2], 0.1),
            UniformFactor([-1.0], [2.0]),
        ):
            X = factor.sample_batch(RNG(0), 50)
            lb = factor.log_density_batch(X)
            ls = np.array([factor.log_density(x) for x in X])
            np.testing.assert_allclose(lb, ls, rtol=1e-12, atol=1e-12)


class TestSamplePrior:
    def test_uniform_box_containment(self):
        prior = PriorSpec(UniformFactor([0, 0], [1, 1]), UniformFactor([0], [1]))
        for seed in range(5):
            th, ph = sample_prior(prior, RNG(seed))
            assert np.all((th >= 0) & (th <= 1)) and 0 <= ph[0] <= 1

    def test_normal_mean_law_of_large_numbers(self):
        f = NormalFactor([0.0, 0.0], np.eye(2))
        X = f.sample_batch(RNG(7), 100_000)
        assert np.all(np.abs(X.mean(axis=0)) < 0.02)

    def test_lognormal_log_mean(self):
        f = LognormalFactor([np.log(0.1)], 0.05)
        X = f.sample_batch(RNG(11), 100_000)
        assert abs(np.mean(np.log(X)) - np.log(0.1)) < 0.005


class TestSampleData:
    def test_unbiased_noise(self):
        m = scalar_model(sigma2=1e-2)
        draws = np.array([
            sample_data(m, [0.0], np.array([1.3]), np.zeros(0), RNG(s)).Y[0, 0]
            for s in range(100_000)
        ])
        assert abs(draws.mean() - 1.3) < 3e-3

    def test_example1_noise_free_mean(self):
        m, _ = make_example1()
        g = m.eval_forward(np.array([1.0]), np.array([2.0]), np.array([5.0]))
        np.testing.assert_allclose(g, [2.0, 0.0], atol=1e-15)

    def test_column_count(self):
        m = scalar_model(n_e=3)
        d = sample_data(m, [0.0], np.array([0.0]), np.zeros(0), RNG(0))
        assert d.Y.shape == (1, 3) and d.n_e == 3

    def test_forward_failure_reports_inputs(self):
        m = ExperimentModel(
            d_y=1, d_theta=1, d_phi=0, d_xi=1, n_e=1, noise_cov=[[1.0]],
            forward=lambda xi, t, p: np.array([np.nan]),
        )
        with pytest.raises(ForwardModelError) as err:
            sample_data(m, [0.0], np.array([2.0]), np.zeros(0), RNG(0))
        assert err.value.theta is not None

    def test_residual_covariance_matches_noise(self):
        cov = np.array([[1e-2, 4e-3], [4e-3, 2e-2]])
        m, _ = make_example1()
        m = ExperimentModel(
            d_y=2, d_theta=1, d_phi=1, d_xi=1, n_e=1, noise_cov=cov,
            forward=m.forward,
        )
        g = m.eval_forward([0.5], np.array([0.2]), np.array([0.0]))
        R = np.stack([
            sample_data(m, [0.5], np.array([0.2]), np.array([0.0]), RNG(s)).Y[:, 0] - g
            for s in range(100_000)
        ])
        emp = np.cov(R.T)
        assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) < 0.02


class TestLogLikelihood:
    def test_zero_residual(self):
        m = scalar_model()
        d = Dataset(Y=np.array([[0.7]]), design=[0.0])
        val = log_likelihood(m, d, np.array([0.7]), np.zeros(0))
        assert val == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_residual_two(self):
        m = scalar_model()
        d = Dataset(Y=np.array([[2.7]]), design=[0.0])
        val = log_likelihood(m, d, np.array([0.7]), np.zeros(0))
        assert val == pytest.approx(-0.5 * np.log(2 * np.pi) - 2.0, abs=1e-12)

    def test_example1_hand_value(self):
        m, _ = make_example1()
        d = Dataset(Y=np.array([[0.1], [0.1]]), design=[0.5])
        val = log_likelihood(m, d, np.array([0.0]), np.array([0.0]))
        # quadratic form: 2 * 0.1^2 / (2 * 0.01) = 1; normalization -log(2 pi 0.01)
        assert val == pytest.approx(-np.log(2 * np.pi * 1e-2) - 1.0, abs=1e-12)

    def test_column_permutation_invariance(self):
        m = scalar_model(n_e=4)
        Y = np.array([[0.3, -0.2, 0.9, 0.1]])
        d1 = Dataset(Y=Y, design=[0.0])
        d2 = Dataset(Y=Y[:, ::-1].copy(), design=[0.0])
        t, p = np.array([0.1]), np.zeros(0)
        assert log_likelihood(m, d1, t, p) == pytest.approx(log_likelihood(m, d2, t, p), rel=1e-14)

    def test_density_integrates_to_one(self):
        # Gauss-Hermite quadrature of exp(log_likelihood) over y, d_y=1, n_e=1
        sigma2 = 0.35
        m = scalar_model(sigma2=sigma2)
        g = 0.4
        nodes, weights = np.polynomial.hermite.hermgauss(80)
        total = 0.0
        for t, w in zip(nodes, weights):
            y = g + np.sqrt(2 * sigma2) * t
            d = Dataset(Y=np.array([[y]]), design=[0.0])
            # Gauss-Hermite absorbs exp(-t^2); add it back in log space
            total += w * np.exp(log_likelihood(m, d, np.array([g]), np.zeros(0)) + t * t)
        total *= np.sqrt(2 * sigma2)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_batch_matches_scalar_path(self):
        m, prior = make_pk()
        xi = 0.94 * 1.25 ** np.arange(15)
        rng = RNG(5)
        th, ph = prior.sample(rng)
        d = sample_data(m, xi, th, ph, rng)
        TH, PH = prior.sample_batch(rng, 40)
        lb = log_likelihood_batch(m, d, TH, PH)
        ls = np.array([log_likelihood(m, d, t, p) for t, p in zip(TH, PH)])
        np.testing.assert_allclose(lb, ls, rtol=1e-9, atol=1e-9)


class TestResidual:
    def test_zero(self):
        m = scalar_model()
        g = m.eval_forward([0.0], np.array([1.1]), np.zeros(0))
        np.testing.assert_array_equal(residual(m, g, [0.0], np.array([1.1]), np.zeros(0)), [0.0])

    def test_example1_hand_value(self):
        m, _ = make_example1()
        r = residual(m, np.array([2.0, 0.0]), [1.0], np.array([1.0]), np.array([0.0]))
        np.testing.assert_allclose(r, [1.0, 0.0], atol=1e-15)

    def test_linearity_in_data(self):
        m, _ = make_example1()
        y = np.array([0.3, -0.1])
        delta = np.array([0.05, 0.07])
        args = ([0.4], np.array([0.2]), np.array([0.1]))
        np.testing.assert_allclose(
            residual(m, y + delta, *args) - residual(m, y, *args), delta, atol=1e-15
        )


class TestJacobians:
    def test_example1_fd_exact(self):
        m, _ = make_example1()
        J = jac_phi_fd(m, np.array([0.3]), np.array([0.5]), np.array([0.2]))
        np.testing.assert_allclose(J, [[0.0], [0.7]], atol=1e-8)
        Jt = jac_theta_fd(m, np.array([0.3]), np.array([0.5]), np.array([0.2]))
        np.testing.assert_allclose(Jt, [[0.3], [0.0]], atol=1e-8)

    def test_constant_model_zero(self):
        m = ExperimentModel(
            d_y=2, d_theta=1, d_phi=1, d_xi=1, n_e=1, noise_cov=np.eye(2),
            forward=lambda xi, t, p: np.array([1.0, 2.0]),
        )
        J = jac_phi_fd(m, [0.0], np.array([0.1]), np.array([0.2]))
        np.testing.assert_allclose(J, np.zeros((2, 1)), atol=1e-10)

    def test_pk_analytic_vs_fd_at_median(self):
        m, prior = make_pk()
        xi = 0.94 * 1.25 ** np.arange(15)
        th = prior.theta_factor.start_point()
        ph = prior.phi_factor.start_point()
        Ja = model_jac_phi(m, xi, th, ph)
        Jf = jac_phi_fd(m, xi, th, ph)
        np.testing.assert_allclose(Ja, Jf, rtol=1e-5, atol=1e-8)

    def test_pk_all_jacobians_100_random_points(self):
        m, prior = make_pk()
        xi = 0.94 * 1.25 ** np.arange(15)
        rng = RNG(17)
        for _ in range(100):
            th, ph = prior.sample(rng)
            np.testing.assert_allclose(
                model_jac_theta(m, xi, th, ph), jac_theta_fd(m, xi, th, ph),
                rtol=1e-5, atol=1e-7,
            )
            np.testing.assert_allclose(
                model_jac_phi(m, xi, th, ph), jac_phi_fd(m, xi, th, ph),
                rtol=1e-5, atol=1e-7,
            )

    def test_jac_z_stacks_theta_phi(self):
        m, prior = make_example1()
        xi = np.array([0.6])
        th, ph = prior.sample(RNG(2))
        Jz = jac_z_fd(m, xi, th, ph)
        np.testing.assert_allclose(Jz, [[0.6, 0.0], [0.0, 0.4]], atol=1e-8)


class TestLogPriorJoint:
    def test_standard_normal_scalar(self):
        prior = PriorSpec(NormalFactor([0.0], [[1.0]]), NormalFactor([0.0], [[1.0]]))
        v = log_prior_joint(prior, np.array([0.0]), np.array([0.0]))
        assert v == pytest.approx(-np.log(2 * np.pi), abs=1e-12)

    def test_uniform_outside_support(self):
        prior = PriorSpec(UniformFactor([0.0], [1.0]), UniformFactor([0.0], [1.0]))
        assert log_prior_joint(prior, np.array([0.5]), np.array([0.5])) == 0.0
        assert log_prior_joint(prior, np.array([1.5]), np.array([0.5])) == -np.inf

    def test_lognormal_value(self):
        prior = PriorSpec(LognormalFactor([0.0], 0.05), NormalFactor([0.0], [[1.0]]))
        v = log_prior_joint(prior, np.array([1.0]), np.array([0.0]))
        assert v == pytest.approx(0.5789276035723228 - 0.5 * np.log(2 * np.pi), abs=1e-10)


class TestModelValidation:
    def test_asymmetric_noise_rejected(self):
        with pytest.raises(ValueError):
            ExperimentModel(
                d_y=2, d_theta=1, d_phi=0, d_xi=1, n_e=1,
                noise_cov=np.array([[1.0, 0.5], [0.1, 1.0]]),
                forward=lambda xi, t, p: np.zeros(2),
            )

    def test_non_spd_noise_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            ExperimentModel(
                d_y=1, d_theta=1, d_phi=0, d_xi=1, n_e=1,
                noise_cov=np.array([[-1.0]]),
                forward=lambda xi, t, p: np.zeros(1),
            )

    def test_forward_deterministic(self):
        m, _ = make_pk()
        xi = 0.94 * 1.25 ** np.arange(15)
        a = m.eval_forward(xi, np.array([1.0, 0.1]), np.array([20.0]))
        b = m.eval_forward(xi, np.array([1.0, 0.1]), np.array([20.0]))
        np.testing.assert_array_equal(a, b)
