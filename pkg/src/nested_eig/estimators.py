"""Expected-information-gain estimators.

Three estimators share one outer-loop harness:

* ``dlmc``: reference double-loop Monte Carlo with two inner loops (one
  marginalizing the nuisance at fixed theta, one for the evidence);
* ``dlmc2is``: the same double loop with Gaussian fits of the two inner
  posteriors used as importance-sampling proposals;
* ``mc2la``: per outer sample, the nuisance is profiled out and the
  marginalized posterior Gaussianized, giving the KL term in closed form.

Determinism contract: every outer sample draws from its own counter-keyed
substream and results are reduced in outer-index order, so a given master
seed yields bit-identical results for any thread count.
"""

from __future__ import annotations

import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import MapSolverError, NestedEigError
from .kernels import logmeanexp
from .laplace import (
    LaplaceFit,
    SolverConfig,
    fit_joint_map,
    fit_nuisance_map,
    fit_theta_map,
    laplace_log_density_batch,
    sample_laplace_batch,
)
from .models import PriorSpec, log_likelihood_batch, sample_data

logger = logging.getLogger("nested_eig")

_SEED_MASK = (1 << 64) - 1


def tag_int(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def substream(master_seed: int, tag: str, index: int):
    """Independent generator for one (purpose, outer-index) pair."""
    ss = np.random.SeedSequence(
        entropy=(int(master_seed) & _SEED_MASK, tag_int(tag), int(index))
    )
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(master_seed: int, tag: str, index: int) -> int:
    """A 64-bit child seed, for nesting whole estimator runs."""
    ss = np.random.SeedSequence(
        entropy=(int(master_seed) & _SEED_MASK, tag_int(tag), int(index))
    )
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def resolve_threads(threads: Optional[int]) -> int:
    if threads is None:
        threads = int(os.environ.get("NESTED_EIG_THREADS", "1"))
    return max(1, int(threads))


def _map_indexed(worker, n, threads):
    """Apply worker over range(n), preserving index order."""
    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(worker, range(n)))
    return [worker(i) for i in range(n)]


@dataclass
class EigResult:
    """Outcome of one estimator run (estimate in nats)."""

    estimate: float
    n_outer: int
    m1_inner: int
    m2_inner: int
    sample_variance_outer: float
    work_units: float
    degenerate_inner_count: int
    allocation: object = None

    @property
    def stderr(self):
        if self.n_outer > 0 and np.isfinite(self.sample_variance_outer):
            return float(np.sqrt(self.sample_variance_outer / self.n_outer))
        return np.nan


def _assemble(terms, n_outer, m1, m2, work_per_outer):
    terms = np.asarray(terms, dtype=float)
    valid = np.isfinite(terms)
    n_deg = int(np.sum(~valid))
    if n_deg > 0.01 * n_outer:
        logger.warning(
            "%d of %d outer samples degenerate (all inner weights vanished or fit failed)",
            n_deg,
            n_outer,
        )
    kept = terms[valid]
    est = float(np.mean(kept)) if kept.size else np.nan
    var = float(np.var(kept, ddof=1)) if kept.size > 1 else 0.0
    return EigResult(
        estimate=est,
        n_outer=n_outer,
        m1_inner=m1,
        m2_inner=m2,
        sample_variance_outer=var,
        work_units=n_outer * work_per_outer,
        degenerate_inner_count=n_deg,
    )


def _tile(v, m):
    return np.broadcast_to(v, (m, v.shape[0]))


# ---------------------------------------------------------------------------
# DLMC
# ---------------------------------------------------------------------------

def dlmc_terms(model, prior, xi, n_outer, m1, m2, seed, threads=1):
    """Per-outer-sample log-ratio terms of the double-loop estimator."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))

    def worker(n):
        rng = substream(seed, "dlmc", n)
        theta, phi = prior.sample(rng)
        data = sample_data(model, xi, theta, phi, rng)
        PH1 = prior.phi_factor.sample_batch(rng, m1, cond=theta)
        ll1 = log_likelihood_batch(model, data, _tile(theta, m1), PH1)
        TH2, PH2 = prior.sample_batch(rng, m2)
        ll2 = log_likelihood_batch(model, data, TH2, PH2)
        lp1 = logmeanexp(ll1)
        lp2 = logmeanexp(ll2)
        if not (np.isfinite(lp1) and np.isfinite(lp2)):
            return np.nan
        return lp1 - lp2

    return np.array(_map_indexed(worker, n_outer, threads))


def dlmc(model, prior, xi, n_outer, m1, m2, seed, threads=None) -> EigResult:
    """Reference double-loop Monte Carlo estimator with two inner loops."""
    threads = resolve_threads(threads)
    terms = dlmc_terms(model, prior, xi, n_outer, m1, m2, seed, threads)
    return _assemble(terms, n_outer, m1, m2, (m1 + m2) * model.work_per_eval())


# ---------------------------------------------------------------------------
# DLMC2IS
# ---------------------------------------------------------------------------

def _fit_with_retry(fit_fun, rng, n, what):
    try:
        return fit_fun(rng)
    except MapSolverError:
        retry_rng = substream_from(rng)
        try:
            return fit_fun(retry_rng)
        except MapSolverError:
            logger.debug("%s fit failed twice at outer sample %d; skipping", what, n)
            return None


def substream_from(rng):
    """Fresh generator derived from the state of an existing one."""
    return np.random.Generator(np.random.PCG64(int(rng.integers(0, 2**63))))


def dlmc2is_terms(
    model,
    prior,
    xi,
    n_outer,
    m1,
    m2,
    seed,
    cfg: SolverConfig = None,
    force_prior_proposal=False,
    threads=1,
):
    """Per-outer terms of the importance-sampled double loop.

    Inner draws come from Gaussian fits of pi(phi | Y, theta) and
    pi(theta, phi | Y); log weights add the prior and subtract the
    proposal density. Draws outside a compact prior support carry
    log-weight -inf. With ``force_prior_proposal`` the proposals are the
    prior factors themselves (identity weights), which reduces the
    estimator to plain DLMC in distribution.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    cfg = cfg or SolverConfig()
    dt = prior.d_theta

    def worker(n):
        rng = substream(seed, "dlmc2is", n)
        theta, phi = prior.sample(rng)
        data = sample_data(model, xi, theta, phi, rng)

        if force_prior_proposal:
            PH1 = prior.phi_factor.sample_batch(rng, m1, cond=theta)
            ll1 = log_likelihood_batch(model, data, _tile(theta, m1), PH1)
            TH2, PH2 = prior.sample_batch(rng, m2)
            ll2 = log_likelihood_batch(model, data, TH2, PH2)
            lp1 = logmeanexp(ll1)
            lp2 = logmeanexp(ll2)
            if not (np.isfinite(lp1) and np.isfinite(lp2)):
                return np.nan
            return lp1 - lp2

        zhint = np.concatenate([theta, phi])
        fit_phi = _fit_with_retry(
            lambda r: fit_nuisance_map(model, prior, data, theta, cfg, rng=r, start_hint=phi),
            rng, n, "nuisance",
        )
        if fit_phi is None:
            return np.nan
        fit_z = _fit_with_retry(
            lambda r: fit_joint_map(model, prior, data, cfg, rng=r, start_hint=zhint),
            rng, n, "joint",
        )
        if fit_z is None:
            return np.nan

        # inner loop 1: marginal likelihood at fixed theta
        PH1 = sample_laplace_batch(fit_phi, rng, m1)
        logw1 = prior.phi_factor.log_density_batch(PH1, cond=theta)
        sup1 = logw1 > -np.inf
        ll1 = np.full(m1, -np.inf)
        if np.any(sup1):
            ll1[sup1] = log_likelihood_batch(
                model, data, _tile(theta, int(sup1.sum())), PH1[sup1]
            )
        logw1 = logw1 + ll1 - laplace_log_density_batch(fit_phi, PH1)

        # inner loop 2: evidence
        Z2 = sample_laplace_batch(fit_z, rng, m2)
        TH2, PH2 = Z2[:, :dt], Z2[:, dt:]
        logw2 = prior.log_joint_batch(TH2, PH2)
        sup2 = logw2 > -np.inf
        ll2 = np.full(m2, -np.inf)
        if np.any(sup2):
            ll2[sup2] = log_likelihood_batch(model, data, TH2[sup2], PH2[sup2])
        logw2 = logw2 + ll2 - laplace_log_density_batch(fit_z, Z2)

        lp1 = logmeanexp(logw1)
        lp2 = logmeanexp(logw2)
        if not (np.isfinite(lp1) and np.isfinite(lp2)):
            return np.nan
        return lp1 - lp2

    return np.array(_map_indexed(worker, n_outer, threads))


def dlmc2is(
    model,
    prior,
    xi,
    n_outer,
    m1,
    m2,
    seed,
    cfg: SolverConfig = None,
    force_prior_proposal=False,
    threads=None,
) -> EigResult:
    """Double-loop Monte Carlo with two Laplace importance-sampling proposals."""
    threads = resolve_threads(threads)
    terms = dlmc2is_terms(
        model, prior, xi, n_outer, m1, m2, seed, cfg, force_prior_proposal, threads
    )
    return _assemble(terms, n_outer, m1, m2, (m1 + m2) * model.work_per_eval())


# ---------------------------------------------------------------------------
# MC2LA
# ---------------------------------------------------------------------------

def mc2la_terms(model, prior, xi, n_outer, seed, cfg: SolverConfig = None, threads=1):
    """Per-outer closed-form KL terms from the marginalized-posterior fit."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    cfg = cfg or SolverConfig()

    def worker(n):
        rng = substream(seed, "mc2la", n)
        theta, phi = prior.sample(rng)
        data = sample_data(model, xi, theta, phi, rng)
        fit = _fit_with_retry(
            lambda r: fit_theta_map(model, prior, data, cfg, rng=r, start_hint=theta),
            rng, n, "theta",
        )
        if fit is None:
            return np.nan
        return mc2la_summand(prior, fit)

    return np.array(_map_indexed(worker, n_outer, threads))


def mc2la_summand(prior: PriorSpec, fit: LaplaceFit):
    """-1/2 log det(2 pi Sigma) - d/2 - log pi(mode) - 1/2 tr(Sigma hess log pi)."""
    d = fit.dim
    log_det_2pi_sigma = d * np.log(2.0 * np.pi) - fit.log_det_precision
    lp = prior.theta_factor.log_density(fit.mode)
    Hp = prior.theta_factor.hess_log_density(fit.mode)
    sigma = scipy.linalg.cho_solve((fit.chol_precision, True), np.eye(d))
    return -0.5 * log_det_2pi_sigma - 0.5 * d - lp - 0.5 * float(np.trace(sigma @ Hp))


def mc2la(model, prior, xi, n_outer, seed, cfg: SolverConfig = None, threads=None) -> EigResult:
    """Monte Carlo double-Laplace estimator (no inner sampling loops)."""
    threads = resolve_threads(threads)
    terms = mc2la_terms(model, prior, xi, n_outer, seed, cfg, threads)
    return _assemble(terms, n_outer, 0, 0, model.work_per_eval())


# ---------------------------------------------------------------------------
# Tolerance-driven runner
# ---------------------------------------------------------------------------

ESTIMATOR_KINDS = ("dlmc", "dlmc2is", "mc2la")


def run_to_tolerance(
    kind,
    model,
    prior,
    xi,
    tol,
    alpha,
    pilot,
    seed,
    cfg: SolverConfig = None,
    threads=None,
) -> EigResult:
    """Allocate samples from pilot constants, run the estimator, annotate.

    For the double-loop kinds the allocation solves the work-minimization
    problem; for mc2la only the outer sample size is set, from its
    variance pilot (the full tolerance goes to the statistical error).
    The model is run at its declared mesh, if any; the mesh itself is not
    re-optimized here (see allocate_with_discretization for that).
    """
    from .allocation import Allocation, allocate, c_alpha_of

    if kind not in ESTIMATOR_KINDS:
        raise NestedEigError(f"unknown estimator kind {kind!r}")
    threads = resolve_threads(threads)
    if kind == "mc2la":
        ca = c_alpha_of(alpha)
        n_real = ca**2 * pilot.d3 / tol**2
        alloc = Allocation(
            kappa=1.0,
            n_outer=max(1, int(np.ceil(n_real))),
            m1_inner=1,
            m2_inner=1,
            predicted_work=n_real * model.work_per_eval(),
            c_alpha=ca,
            n_real=n_real,
            m1_real=1.0,
            m2_real=1.0,
        )
        result = mc2la(model, prior, xi, alloc.n_outer, seed, cfg, threads)
    else:
        alloc = allocate(pilot, tol, alpha)
        runner = dlmc if kind == "dlmc" else dlmc2is
        kwargs = {} if kind == "dlmc" else {"cfg": cfg}
        result = runner(
            model, prior, xi, alloc.n_outer, alloc.m1_inner, alloc.m2_inner,
            seed, threads=threads, **kwargs,
        )
    result.allocation = alloc
    return result
