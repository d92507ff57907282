"""Estimator behavior: convergence to the analytic reference, determinism,
importance-sampling reductions, degenerate handling."""

import numpy as np
import pytest

from nested_eig.builtin import (
    SyntheticDiscretizedFamily,
    SyntheticDiscretizedSpec,
    analytic_eig_example1,
    make_example1,
    make_pk,
)
from nested_eig.allocation import PilotConstants
from nested_eig.estimators import (
    dlmc,
    dlmc2is,
    dlmc2is_terms,
    dlmc_terms,
    mc2la,
    mc2la_summand,
    run_to_tolerance,
    substream,
)
from nested_eig.laplace import (
    LaplaceFit,
    fit_joint_map,
    fit_nuisance_map,
    laplace_log_density_batch,
    sample_laplace_batch,
)
from nested_eig.models import (
    ExperimentModel,
    NormalFactor,
    PriorSpec,
    UniformFactor,
    log_likelihood_batch,
    sample_data,
)

RNG = np.random.default_rng
EIG_HALF = analytic_eig_example1(0.5)


class TestDlmc:
    def test_constant_model_zero_information(self):
        m = ExperimentModel(
            d_y=1, d_theta=1, d_phi=1, d_xi=1, n_e=1, noise_cov=[[1.0]],
            forward=lambda xi, t, p: np.array([3.0]),
        )
        prior = PriorSpec(NormalFactor([0.0], [[1.0]]), NormalFactor([0.0], [[1.0]]))
        r = dlmc(m, prior, [0.0], 400, 16, 16, seed=0)
        assert abs(r.estimate) < 3.0 * r.stderr + 1e-3

    def test_example1_converges_to_oracle(self):
        m, prior = make_example1()
        r = dlmc(m, prior, [0.5], 20_000, 1000, 1000, seed=42)
        assert abs(r.estimate - EIG_HALF) <= 0.1

    def test_degenerate_sizes_execute(self):
        m, prior = make_example1()
        r = dlmc(m, prior, [0.5], 1, 1, 1, seed=0)
        assert np.isfinite(r.estimate)
        assert (r.n_outer, r.m1_inner, r.m2_inner) == (1, 1, 1)

    def test_work_units(self):
        m, prior = make_example1()
        r = dlmc(m, prior, [0.5], 7, 3, 5, seed=0)
        assert r.work_units == 7 * (3 + 5)


class TestDlmc2is:
    def test_example1_tiny_inner_loops_suffice(self):
        m, prior = make_example1()
        r = dlmc2is(m, prior, [0.5], 20_000, 2, 2, seed=7)
        assert abs(r.estimate - EIG_HALF) <= 0.1
        assert r.degenerate_inner_count == 0

    def test_forced_prior_matches_dlmc_in_distribution(self):
        m, prior = make_example1()
        a = np.zeros(50)
        b = np.zeros(50)
        for run in range(50):
            a[run] = dlmc(m, prior, [0.5], 40, 4, 4, seed=1000 + run).estimate
            b[run] = dlmc2is(
                m, prior, [0.5], 40, 4, 4, seed=1000 + run, force_prior_proposal=True
            ).estimate
        se = np.sqrt(np.var(a, ddof=1) / 50 + np.var(b, ddof=1) / 50)
        assert abs(a.mean() - b.mean()) <= 3.0 * se

    def test_exact_proposals_constant_weights(self):
        # conjugate case: likelihood x prior / posterior is constant in the
        # sample, so the inner importance weights carry zero variance
        m, prior = make_example1()
        rng = substream(3, "dlmc2is", 0)
        theta, phi = prior.sample(rng)
        data = sample_data(m, [0.5], theta, phi, rng)
        fit_phi = fit_nuisance_map(m, prior, data, theta, rng=rng)
        PH = sample_laplace_batch(fit_phi, rng, 64)
        logw = (
            log_likelihood_batch(m, data, np.broadcast_to(theta, (64, 1)), PH)
            + prior.phi_factor.log_density_batch(PH, cond=theta)
            - laplace_log_density_batch(fit_phi, PH)
        )
        assert np.var(logw) < 1e-8
        fit_z = fit_joint_map(m, prior, data, rng=rng)
        Z = sample_laplace_batch(fit_z, rng, 64)
        logw2 = (
            log_likelihood_batch(m, data, Z[:, :1], Z[:, 1:])
            + prior.log_joint_batch(Z[:, :1], Z[:, 1:])
            - laplace_log_density_batch(fit_z, Z)
        )
        assert np.var(logw2) < 1e-8

    def test_degenerate_inner_batches_are_counted(self):
        # forward carries no information about phi and the box prior is tiny,
        # so the Gaussian proposal virtually never lands in the support
        m = ExperimentModel(
            d_y=1, d_theta=1, d_phi=1, d_xi=1, n_e=1, noise_cov=[[1.0]],
            forward=lambda xi, t, p: np.array([t[0]]),
            jac_theta=lambda xi, t, p: np.array([[1.0]]),
            jac_phi=lambda xi, t, p: np.array([[0.0]]),
        )
        prior = PriorSpec(NormalFactor([0.0], [[1.0]]), UniformFactor([0.0], [1e-8]))
        r = dlmc2is(m, prior, [0.0], 20, 3, 3, seed=5)
        assert r.degenerate_inner_count > 0

    def test_d_phi_zero_runs_same_path(self):
        from nested_eig.builtin import make_example1_nonuisance, analytic_eig_example1_nonuisance

        m, prior = make_example1_nonuisance()
        r = dlmc2is(m, prior, [0.5], 3000, 2, 2, seed=11)
        truth = analytic_eig_example1_nonuisance(0.5)
        assert abs(r.estimate - truth) <= 4.0 * r.stderr + 0.02


class TestMc2la:
    def test_example1_within_clt_band(self):
        m, prior = make_example1()
        r = mc2la(m, prior, [0.5], 10_000, seed=3)
        assert abs(r.estimate - EIG_HALF) <= 3.0 * np.sqrt(r.sample_variance_outer / r.n_outer)

    def test_summand_uses_exact_prior_hessian(self):
        prior = PriorSpec(NormalFactor([0.0], [[2.0]]), NormalFactor([0.0], [[1.0]]))
        fit = LaplaceFit(
            mode=np.array([0.3]), precision=np.array([[5.0]]),
            log_det_precision=np.log(5.0), grad_norm_at_mode=0.0, iterations=1,
            chol_precision=np.array([[np.sqrt(5.0)]]),
            chol_inv=np.array([[1.0 / np.sqrt(5.0)]]),
        )
        got = mc2la_summand(prior, fit)
        lp = -0.5 * np.log(2 * np.pi * 2.0) - 0.3**2 / 4.0
        expect = -0.5 * (np.log(2 * np.pi) - np.log(5.0)) - 0.5 - lp - 0.5 * (1 / 5.0) * (-1 / 2.0)
        assert got == pytest.approx(expect, rel=1e-12)

    def test_single_sample_executes(self):
        m, prior = make_example1()
        r = mc2la(m, prior, [0.5], 1, seed=0)
        assert np.isfinite(r.estimate)
        assert r.work_units == 1


class TestDeterminism:
    def test_bit_identical_across_thread_counts(self):
        m, prior = make_example1()
        for fn, args in (
            (dlmc, ([0.5], 64, 8, 8)),
            (dlmc2is, ([0.5], 32, 2, 2)),
            (mc2la, ([0.5], 32)),
        ):
            r1 = fn(m, prior, *args, seed=9, threads=1)
            r8 = fn(m, prior, *args, seed=9, threads=8)
            assert r1.estimate == r8.estimate
            assert r1.sample_variance_outer == r8.sample_variance_outer

    def test_same_seed_same_terms(self):
        m, prior = make_example1()
        t1 = dlmc_terms(m, prior, [0.5], 32, 4, 4, seed=5)
        t2 = dlmc_terms(m, prior, [0.5], 32, 4, 4, seed=5)
        np.testing.assert_array_equal(t1, t2)
        t3 = dlmc2is_terms(m, prior, [0.5], 16, 2, 2, seed=5)
        t4 = dlmc2is_terms(m, prior, [0.5], 16, 2, 2, seed=5)
        np.testing.assert_array_equal(t3, t4)


class TestRunToTolerance:
    def _pilot(self):
        return PilotConstants(c1=0.5, c2=2.0, d3=2.0)

    def test_large_tolerance_kappa_to_one(self):
        m, prior = make_example1()
        r = run_to_tolerance("dlmc2is", m, prior, [0.5], 1e6 * 2.0, 0.05, self._pilot(), seed=0)
        assert r.allocation.kappa > 0.999

    def test_work_units_match_allocation(self):
        m, prior = make_example1()
        r = run_to_tolerance("dlmc", m, prior, [0.5], 0.5, 0.05, self._pilot(), seed=0)
        a = r.allocation
        assert r.work_units == a.n_outer * (a.m1_inner + a.m2_inner)

    def test_example1_tolerance_mostly_met(self):
        from nested_eig.allocation import estimate_constants_pilot

        m, prior = make_example1()
        pilot = estimate_constants_pilot(m, prior, [0.5], 400, 32, 32,
                                         proposal="laplace-is", seed=1)
        hits = 0
        for r in range(20):
            res = run_to_tolerance("dlmc2is", m, prior, [0.5], 0.1, 0.05, pilot,
                                   seed=300 + r)
            hits += abs(res.estimate - EIG_HALF) <= 0.1
        assert hits >= 18

    def test_mc2la_uses_variance_pilot_only(self):
        m, prior = make_example1()
        pilot = PilotConstants(c1=0.0, c2=0.0, d3=0.9)
        r = run_to_tolerance("mc2la", m, prior, [0.5], 0.2, 0.05, pilot, seed=0)
        expect_n = int(np.ceil(pilot.d3 * r.allocation.c_alpha**2 / 0.2**2))
        assert r.allocation.n_outer == expect_n
        assert r.allocation.kappa == 1.0

    def test_discretized_work_scaling(self):
        fam = SyntheticDiscretizedFamily(SyntheticDiscretizedSpec(0.5, 2.0, 1.0))
        m, prior = fam.at_mesh(0.25)
        r = dlmc(m, prior, [0.5], 5, 2, 2, seed=0)
        assert r.work_units == pytest.approx(5 * 4 * 0.25**-1.0)
