"""Pilot estimation of bias/variance constants and optimal sample allocation.

The double-loop estimator's error model is

  bias     ~ C1/M1 + C2/M2            (+ C3 h^eta with a discretized solver)
  variance ~ (D3 + D1/M1 + D2/M2)/N,   D1 = 2 C1, D2 = 2 C2.

Splitting a tolerance TOL between the two with a parameter kappa and
minimizing total work N (M1 + M2) (times h^-gamma when discretized) has a
closed-form solution, implemented here verbatim, together with the pilot
estimators of the constants.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from .errors import AllocationError, PilotError
from .estimators import (
    _fit_with_retry,
    _map_indexed,
    _tile,
    mc2la_summand,
    resolve_threads,
    substream,
)
from .laplace import (
    SolverConfig,
    fit_joint_map,
    fit_nuisance_map,
    fit_theta_map,
    laplace_log_density_batch,
    sample_laplace_batch,
)
from .models import log_likelihood_batch, sample_data

logger = logging.getLogger("nested_eig")

PROPOSAL_KINDS = ("prior", "laplace-is")


def c_alpha_of(alpha: float) -> float:
    """Two-sided normal confidence constant Phi^-1(1 - alpha/2)."""
    if not 0.0 < alpha < 1.0:
        raise AllocationError(f"alpha must lie in (0, 1), got {alpha}")
    return float(norm.ppf(1.0 - alpha / 2.0))


@dataclass
class PilotConstants:
    """Bias/variance constants from a pilot run; d1 = 2 c1, d2 = 2 c2 by
    construction. c3/eta/gamma describe discretization bias and work when
    present."""

    c1: float
    c2: float
    d3: float
    c3: Optional[float] = None
    eta: Optional[float] = None
    gamma: Optional[float] = None
    n_outer_pilot: int = 0
    m1_inner_pilot: int = 0
    m2_inner_pilot: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for nm in ("c1", "c2", "d3"):
            v = getattr(self, nm)
            if not np.isfinite(v) or v < 0.0:
                raise PilotError(f"pilot constant {nm} must be finite and >= 0, got {v}")

    @property
    def d1(self):
        return 2.0 * self.c1

    @property
    def d2(self):
        return 2.0 * self.c2

    def has_discretization(self):
        return self.c3 is not None and self.eta is not None and self.gamma is not None

    def to_json(self) -> str:
        payload = asdict(self)
        payload["d1"] = self.d1
        payload["d2"] = self.d2
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PilotConstants":
        payload = json.loads(text)
        known = {f for f in cls.__dataclass_fields__}
        d1 = payload.pop("d1", None)
        d2 = payload.pop("d2", None)
        unknown = set(payload) - known
        if unknown:
            raise PilotError(f"unknown fields in constants file: {sorted(unknown)}")
        out = cls(**payload)
        # the derived constants are written for completeness; reject files
        # that break the by-construction relation
        if d1 is not None and abs(d1 - out.d1) > 1e-12 * max(1.0, out.d1):
            raise PilotError(f"constants file violates d1 = 2 c1 (d1={d1}, c1={out.c1})")
        if d2 is not None and abs(d2 - out.d2) > 1e-12 * max(1.0, out.d2):
            raise PilotError(f"constants file violates d2 = 2 c2 (d2={d2}, c2={out.c2})")
        return out


@dataclass
class Allocation:
    """Sample sizes and error split for a target tolerance.

    Integer sizes are ceilings (floor 1) of the real-valued optima, which
    are kept alongside so the constraints can be re-verified exactly.
    """

    kappa: float
    n_outer: int
    m1_inner: int
    m2_inner: int
    predicted_work: float
    c_alpha: float
    h_mesh: Optional[float] = None
    n_real: float = 0.0
    m1_real: float = 0.0
    m2_real: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Closed-form solvers
# ---------------------------------------------------------------------------

def _ceil1(x):
    return max(1, int(np.ceil(x - 1e-12)))


def allocate(constants: PilotConstants, tol: float, alpha: float = 0.05) -> Allocation:
    """Work-optimal (kappa, N, M1, M2) for the double-loop estimator.

    When c1 = c2 = 0 (exact importance sampling) the bias constraint is
    vacuous: one inner sample per loop and the whole tolerance goes to the
    statistical error (kappa = 1).
    """
    if tol <= 0.0:
        raise AllocationError(f"tol must be positive, got {tol}")
    if constants.d3 <= 0.0:
        raise AllocationError("d3 must be positive to allocate samples")
    ca = c_alpha_of(alpha)
    c1, c2, d3 = constants.c1, constants.c2, constants.d3
    if c1 == 0.0 and c2 == 0.0:
        kappa = 1.0
        n_real = ca**2 * d3 / tol**2
        m1_real = m2_real = 1.0
    else:
        kappa = (8.0 * tol + 3.0 * d3 - np.sqrt(16.0 * tol * d3 + 9.0 * d3**2)) / (8.0 * tol)
        root = np.sqrt(c1 * c2)
        m1_real = (c1 + root) / ((1.0 - kappa) * tol)
        m2_real = (c2 + root) / ((1.0 - kappa) * tol)
        n_real = ca**2 * (d3 + 2.0 * (1.0 - kappa) * tol) / (kappa**2 * tol**2)
    return Allocation(
        kappa=float(kappa),
        n_outer=_ceil1(n_real),
        m1_inner=_ceil1(m1_real),
        m2_inner=_ceil1(m2_real),
        predicted_work=float(n_real * (m1_real + m2_real)),
        c_alpha=ca,
        n_real=float(n_real),
        m1_real=float(m1_real),
        m2_real=float(m2_real),
    )


def allocate_with_discretization(
    constants: PilotConstants, tol: float, alpha: float = 0.05
) -> Allocation:
    """Work-optimal (kappa, N, M1, M2, h) with discretization bias c3 h^eta
    and per-evaluation work h^-gamma."""
    if tol <= 0.0:
        raise AllocationError(f"tol must be positive, got {tol}")
    if not constants.has_discretization():
        raise AllocationError("constants lack c3/eta/gamma for a discretized allocation")
    c1, c2, d3 = constants.c1, constants.c2, constants.d3
    c3, eta, gam = constants.c3, constants.eta, constants.gamma
    if min(c3, eta, gam) <= 0.0 or d3 <= 0.0:
        raise AllocationError("c3, eta, gamma and d3 must all be positive")
    ca = c_alpha_of(alpha)

    if c1 == 0.0 and c2 == 0.0:
        # Bias budget goes entirely to the mesh; minimizing
        # 2 N h^-gamma in kappa gives kappa = 2 eta / (2 eta + gamma).
        kappa = 2.0 * eta / (2.0 * eta + gam)
        h = ((1.0 - kappa) * tol / c3) ** (1.0 / eta)
        n_real = ca**2 * d3 / (kappa * tol) ** 2
        m1_real = m2_real = 1.0
        work = n_real * 2.0 * h ** (-gam)
        return Allocation(
            kappa=float(kappa),
            n_outer=_ceil1(n_real),
            m1_inner=1,
            m2_inner=1,
            predicted_work=float(work),
            c_alpha=ca,
            h_mesh=float(h),
            n_real=float(n_real),
            m1_real=1.0,
            m2_real=1.0,
        )

    disc = d3 * (
        9.0 * d3 * eta**2
        + 6.0 * d3 * eta * gam
        + d3 * gam**2
        + 16.0 * eta**2 * tol
        + 8.0 * tol * eta * gam
    )
    kappa = (
        eta
        * (8.0 * tol * eta + 3.0 * d3 * eta + d3 * gam + 4.0 * tol * gam - np.sqrt(disc))
        / (2.0 * tol * (4.0 * eta**2 + 4.0 * eta * gam + gam**2))
    )
    if not 0.0 < kappa < 1.0:
        raise AllocationError(
            f"splitting parameter outside (0,1): kappa={kappa} "
            f"(d3={d3}, tol={tol}, eta={eta}, gamma={gam})"
        )
    denom = 1.0 - kappa * (1.0 + gam / (2.0 * eta))
    if denom <= 0.0:
        raise AllocationError(
            f"infeasible mesh/bias split: 1 - kappa (1 + gamma/2 eta) = {denom:g} <= 0"
        )
    root = np.sqrt(c1 * c2)
    m1_real = (c1 + root) / (denom * tol)
    m2_real = (c2 + root) / (denom * tol)
    n_real = ca**2 / (kappa**2 * tol) * (d3 / tol + 2.0 * denom)
    h = (gam * kappa * tol / (2.0 * eta * c3)) ** (1.0 / eta)
    work = n_real * (m1_real + m2_real) * h ** (-gam)
    return Allocation(
        kappa=float(kappa),
        n_outer=_ceil1(n_real),
        m1_inner=_ceil1(m1_real),
        m2_inner=_ceil1(m2_real),
        predicted_work=float(work),
        c_alpha=ca,
        h_mesh=float(h),
        n_real=float(n_real),
        m1_real=float(m1_real),
        m2_real=float(m2_real),
    )


@dataclass
class AllocationReport:
    bias_lhs: float
    bias_rhs: float
    variance_lhs: float
    variance_rhs: float
    kappa_valid: bool
    bias_ok: bool
    variance_ok: bool

    @property
    def ok(self):
        return self.kappa_valid and self.bias_ok and self.variance_ok


def verify_allocation(constants: PilotConstants, alloc: Allocation, tol: float,
                      rel_tol: float = 1e-9) -> AllocationReport:
    """Re-evaluate both error constraints at the real-valued optima."""
    kappa = alloc.kappa
    kappa_valid = 0.0 < kappa <= 1.0
    bias = 0.0
    if constants.c1 > 0.0:
        bias += constants.c1 / alloc.m1_real
    if constants.c2 > 0.0:
        bias += constants.c2 / alloc.m2_real
    if alloc.h_mesh is not None and constants.c3 is not None:
        bias += constants.c3 * alloc.h_mesh ** constants.eta
    bias_rhs = (1.0 - kappa) * tol
    var = constants.d3
    if constants.c1 > 0.0:
        var += constants.d1 / alloc.m1_real
    if constants.c2 > 0.0:
        var += constants.d2 / alloc.m2_real
    var /= alloc.n_real
    var_rhs = (kappa * tol / alloc.c_alpha) ** 2
    scale_b = max(abs(bias_rhs), tol)
    scale_v = max(abs(var_rhs), tol**2)
    return AllocationReport(
        bias_lhs=float(bias),
        bias_rhs=float(bias_rhs),
        variance_lhs=float(var),
        variance_rhs=float(var_rhs),
        kappa_valid=kappa_valid,
        bias_ok=bias <= bias_rhs + rel_tol * scale_b,
        variance_ok=var <= var_rhs + rel_tol * scale_v,
    )


# ---------------------------------------------------------------------------
# Pilot estimation
# ---------------------------------------------------------------------------

def _ratio_and_logmean(logw):
    """(sample variance / sample mean^2, log sample mean) via shifted moments.

    logw holds log weights, -inf meaning an exactly zero weight. Returns
    (nan, -inf) for an all-dead batch.
    """
    m = logw.shape[0]
    s = np.max(logw)
    if s == -np.inf or not np.isfinite(s):
        return np.nan, -np.inf
    a = np.exp(logw - s)
    m1 = float(np.mean(a))
    m2 = float(np.mean(a * a))
    ratio = (m2 / m1**2 - 1.0) * m / (m - 1.0)
    return max(ratio, 0.0), s + np.log(m1)


def estimate_constants_pilot(
    model,
    prior,
    xi,
    n_pilot,
    m1_pilot,
    m2_pilot,
    proposal="prior",
    seed=0,
    cfg: SolverConfig = None,
    threads=None,
) -> PilotConstants:
    """Estimate c1, c2 (bias) and d3 (outer variance) from a pilot run.

    c1 is half the average, over outer samples, of the relative inner-1
    variance Var[w]/E[w]^2 of the (possibly importance-weighted)
    likelihood; c2 likewise for the evidence loop; d3 is the outer sample
    variance of the estimated log ratio. All moments are computed on
    max-shifted exponentials so raw likelihoods never overflow.
    """
    if proposal not in PROPOSAL_KINDS:
        raise PilotError(f"proposal must be one of {PROPOSAL_KINDS}, got {proposal!r}")
    if m1_pilot < 2 or m2_pilot < 2:
        raise PilotError("pilot inner sizes must be >= 2 for variance estimation")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    cfg = cfg or SolverConfig()
    threads = resolve_threads(threads)
    dt = prior.d_theta

    def worker(n):
        rng = substream(seed, "pilot", n)
        theta, phi = prior.sample(rng)
        data = sample_data(model, xi, theta, phi, rng)
        if proposal == "prior":
            PH1 = prior.phi_factor.sample_batch(rng, m1_pilot, cond=theta)
            logw1 = log_likelihood_batch(model, data, _tile(theta, m1_pilot), PH1)
            TH2, PH2 = prior.sample_batch(rng, m2_pilot)
            logw2 = log_likelihood_batch(model, data, TH2, PH2)
        else:
            fit_phi = _fit_with_retry(
                lambda r: fit_nuisance_map(
                    model, prior, data, theta, cfg, rng=r, start_hint=phi
                ),
                rng, n, "nuisance",
            )
            fit_z = _fit_with_retry(
                lambda r: fit_joint_map(
                    model, prior, data, cfg, rng=r,
                    start_hint=np.concatenate([theta, phi]),
                ),
                rng, n, "joint",
            ) if fit_phi is not None else None
            if fit_phi is None or fit_z is None:
                return None
            PH1 = sample_laplace_batch(fit_phi, rng, m1_pilot)
            logw1 = prior.phi_factor.log_density_batch(PH1, cond=theta)
            sup = logw1 > -np.inf
            ll = np.full(m1_pilot, -np.inf)
            if np.any(sup):
                ll[sup] = log_likelihood_batch(
                    model, data, _tile(theta, int(sup.sum())), PH1[sup]
                )
            logw1 = logw1 + ll - laplace_log_density_batch(fit_phi, PH1)
            Z2 = sample_laplace_batch(fit_z, rng, m2_pilot)
            TH2, PH2 = Z2[:, :dt], Z2[:, dt:]
            logw2 = prior.log_joint_batch(TH2, PH2)
            sup2 = logw2 > -np.inf
            ll2 = np.full(m2_pilot, -np.inf)
            if np.any(sup2):
                ll2[sup2] = log_likelihood_batch(model, data, TH2[sup2], PH2[sup2])
            logw2 = logw2 + ll2 - laplace_log_density_batch(fit_z, Z2)
        r1, lp1 = _ratio_and_logmean(logw1)
        r2, lp2 = _ratio_and_logmean(logw2)
        if not (np.isfinite(r1) and np.isfinite(r2) and np.isfinite(lp1) and np.isfinite(lp2)):
            return None
        return r1, r2, lp1 - lp2

    rows = [r for r in _map_indexed(worker, n_pilot, threads)]
    kept = [r for r in rows if r is not None]
    n_skipped = n_pilot - len(kept)
    if n_skipped > 0.10 * n_pilot:
        raise PilotError(
            f"{n_skipped} of {n_pilot} pilot samples degenerate; cannot estimate constants"
        )
    if len(kept) < 2:
        raise PilotError("too few valid pilot samples")
    r1 = np.array([r[0] for r in kept])
    r2 = np.array([r[1] for r in kept])
    lr = np.array([r[2] for r in kept])
    return PilotConstants(
        c1=0.5 * float(np.mean(r1)),
        c2=0.5 * float(np.mean(r2)),
        d3=float(np.var(lr, ddof=1)),
        n_outer_pilot=n_pilot,
        m1_inner_pilot=m1_pilot,
        m2_inner_pilot=m2_pilot,
        meta={
            "proposal": proposal,
            "seed": int(seed),
            "skipped": int(n_skipped),
            "xi": [float(v) for v in xi],
        },
    )


def estimate_variance_pilot_mc2la(
    model, prior, xi, n_pilot, seed=0, cfg: SolverConfig = None, threads=None
) -> float:
    """Outer sample variance of the mc2la per-sample term."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    cfg = cfg or SolverConfig()
    threads = resolve_threads(threads)

    def worker(n):
        rng = substream(seed, "pilot-mc2la", n)
        theta, phi = prior.sample(rng)
        data = sample_data(model, xi, theta, phi, rng)
        fit = _fit_with_retry(
            lambda r: fit_theta_map(model, prior, data, cfg, rng=r, start_hint=theta),
            rng, n, "theta",
        )
        return np.nan if fit is None else mc2la_summand(prior, fit)

    vals = np.array(_map_indexed(worker, n_pilot, threads))
    ok = np.isfinite(vals)
    if np.sum(~ok) > 0.10 * n_pilot:
        raise PilotError("too many failed fits in the mc2la variance pilot")
    if np.sum(ok) < 2:
        raise PilotError("too few valid pilot samples")
    return float(np.var(vals[ok], ddof=1))


# ---------------------------------------------------------------------------
# Discretization-bias pilot
# ---------------------------------------------------------------------------

@dataclass
class C3FitResult:
    c3: float
    eta: float
    h_grid: np.ndarray
    biases: np.ndarray
    stderrs: np.ndarray
    monotone: bool
    below_noise_floor: bool


def estimate_c3_pilot(
    family,
    xi,
    h_grid,
    seed=0,
    estimator="dlmc2is",
    n_outer=2000,
    m1=2,
    m2=2,
    cfg: SolverConfig = None,
    h_ref=None,
    threads=None,
) -> C3FitResult:
    """Fit |EIG_h - EIG_ref| ~ c3 h^eta by log-log regression.

    ``family.at_mesh(h)`` must return a (model, prior) pair. All runs share
    one master seed, so the h-dependence is estimated on common random
    numbers and the reference noise largely cancels in the differences.
    """
    from .estimators import dlmc2is_terms, mc2la_terms

    h_grid = np.sort(np.asarray(h_grid, dtype=float))[::-1]
    if h_grid.size < 2:
        raise AllocationError("h-grid must contain at least two mesh sizes")
    if np.any(h_grid <= 0.0):
        raise AllocationError("mesh sizes must be positive")
    threads = resolve_threads(threads)
    h_ref = float(h_ref) if h_ref is not None else float(h_grid.min()) / 4.0

    def terms_at(h):
        model, prior = family.at_mesh(h)
        if estimator == "dlmc2is":
            return dlmc2is_terms(model, prior, xi, n_outer, m1, m2, seed, cfg, threads=threads)
        if estimator == "mc2la":
            return mc2la_terms(model, prior, xi, n_outer, seed, cfg, threads=threads)
        raise AllocationError(f"unsupported estimator for the mesh pilot: {estimator!r}")

    ref = terms_at(h_ref)
    biases = np.zeros(h_grid.size)
    stderrs = np.zeros(h_grid.size)
    for j, h in enumerate(h_grid):
        t = terms_at(h)
        d = t - ref
        d = d[np.isfinite(d)]
        biases[j] = abs(float(np.mean(d)))
        stderrs[j] = float(np.std(d, ddof=1) / np.sqrt(d.size)) if d.size > 1 else np.inf

    resolved = biases > 3.0 * stderrs
    below_floor = not bool(np.all(resolved))
    monotone = bool(np.all(np.diff(biases) <= 0.0))  # h_grid is descending
    if not monotone:
        logger.warning("mesh-bias sequence is not monotone in h; rate fit may be poor")
    use = resolved if np.sum(resolved) >= 2 else np.ones_like(resolved, dtype=bool)
    with np.errstate(divide="ignore"):
        lx = np.log(h_grid[use])
        ly = np.log(np.maximum(biases[use], 1e-300))
    slope, intercept = np.polyfit(lx, ly, 1)
    return C3FitResult(
        c3=float(np.exp(intercept)),
        eta=float(slope),
        h_grid=h_grid,
        biases=biases,
        stderrs=stderrs,
        monotone=monotone,
        below_noise_floor=below_floor,
    )
