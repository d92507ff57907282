"""Experiment abstraction: forward model, priors, Gaussian observation noise.

An experiment consists of a deterministic forward map ``g(xi, theta, phi)``
observed ``n_e`` times under additive Gaussian noise, a prior over the
parameters of interest ``theta`` and a (possibly conditional) prior over the
nuisance parameters ``phi``. Everything downstream (MAP fits, estimators,
pilots) consumes only the primitives defined here.

All densities are handled in log space throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from . import kernels
from .errors import ForwardModelError

_EPS = np.finfo(float).eps
FD_STEP = _EPS ** (1.0 / 3.0)  # central-difference step scale, fixed package-wide


def _as_vector(x, dim, name):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (dim,):
        raise ValueError(f"{name} must have shape ({dim},), got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# Prior factors
# ---------------------------------------------------------------------------

class PriorFactor:
    """Base class for one factor of the prior.

    A factor is a distribution over a vector, optionally conditioned on
    another vector (used for the nuisance factor pi(phi | theta)). The
    built-in families ignore the conditioning argument; a user-supplied
    subclass may set ``cond_dependent = True`` and use it.
    """

    dim: int
    cond_dependent = False

    def sample(self, rng, cond=None):
        raise NotImplementedError

    def sample_batch(self, rng, n, cond=None):
        return np.stack([self.sample(rng, cond) for _ in range(n)])

    def log_density(self, x, cond=None):
        raise NotImplementedError

    def log_density_batch(self, X, cond=None):
        return np.array([self.log_density(x, cond) for x in X])

    def grad_log_density(self, x, cond=None):
        raise NotImplementedError

    def hess_log_density(self, x, cond=None):
        raise NotImplementedError

    def grad_log_density_cond(self, x, cond):
        """Gradient of log pi(x | cond) with respect to cond (zero if independent)."""
        return np.zeros(np.shape(cond))

    def start_point(self, cond=None):
        """A reasonable interior point to start MAP solves from."""
        raise NotImplementedError

    @property
    def box(self):
        """(lower, upper) support bounds when compact, else None."""
        return None


class NormalFactor(PriorFactor):
    """Multivariate normal factor given by mean and covariance."""

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.dim = self.mean.shape[0]
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(self.dim)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        self.cov = cov
        self._chol = np.linalg.cholesky(cov)
        self.precision = scipy.linalg.cho_solve((self._chol, True), np.eye(self.dim))
        self.precision = 0.5 * (self.precision + self.precision.T)
        self._log_norm = -0.5 * (
            self.dim * np.log(2.0 * np.pi) + 2.0 * np.sum(np.log(np.diag(self._chol)))
        )

    def sample(self, rng, cond=None):
        return self.mean + self._chol @ rng.standard_normal(self.dim)

    def sample_batch(self, rng, n, cond=None):
        return self.mean + rng.standard_normal((n, self.dim)) @ self._chol.T

    def log_density(self, x, cond=None):
        v = x - self.mean
        return self._log_norm - 0.5 * np.dot(v, self.precision @ v)

    def log_density_batch(self, X, cond=None):
        V = X - self.mean
        return self._log_norm - 0.5 * np.einsum("ij,ij->i", V @ self.precision, V)

    def grad_log_density(self, x, cond=None):
        return -self.precision @ (x - self.mean)

    def hess_log_density(self, x, cond=None):
        return -self.precision

    def start_point(self, cond=None):
        return self.mean.copy()


class LognormalFactor(PriorFactor):
    """Componentwise lognormal: log(x_i) ~ N(mu_i, sigma2_i).

    The spread parameter is interpreted as the variance of the log by
    default; pass ``spread="stddev"`` to read it as a standard deviation.
    """

    def __init__(self, mu_log, spread_log, spread="variance"):
        self.mu = np.atleast_1d(np.asarray(mu_log, dtype=float))
        self.dim = self.mu.shape[0]
        s = np.broadcast_to(np.asarray(spread_log, dtype=float), (self.dim,)).copy()
        if spread == "variance":
            self.var = s
        elif spread == "stddev":
            self.var = s**2
        else:
            raise ValueError(f"spread must be 'variance' or 'stddev', got {spread!r}")
        self.sigma = np.sqrt(self.var)
        self._norm_const = -0.5 * float(np.sum(np.log(2.0 * np.pi * self.var)))
        self._half_inv_var = 0.5 / self.var

    def sample(self, rng, cond=None):
        return np.exp(self.mu + self.sigma * rng.standard_normal(self.dim))

    def sample_batch(self, rng, n, cond=None):
        return np.exp(self.mu + self.sigma * rng.standard_normal((n, self.dim)))

    def log_density(self, x, cond=None):
        if np.any(x <= 0.0):
            return -np.inf
        lx = np.log(x)
        d = lx - self.mu
        return self._norm_const - float(np.sum(lx)) - float(np.dot(d * d, self._half_inv_var))

    def log_density_batch(self, X, cond=None):
        out = np.full(X.shape[0], -np.inf)
        ok = np.all(X > 0.0, axis=1)
        if np.any(ok):
            lx = np.log(X[ok])
            d = lx - self.mu
            out[ok] = self._norm_const - np.sum(lx, axis=1) - (d * d) @ self._half_inv_var
        return out

    def grad_log_density(self, x, cond=None):
        lx = np.log(x)
        return -(1.0 + (lx - self.mu) / self.var) / x

    def hess_log_density(self, x, cond=None):
        lx = np.log(x)
        d = (1.0 - 1.0 / self.var + (lx - self.mu) / self.var) / x**2
        return np.diag(d)

    def start_point(self, cond=None):
        return np.exp(self.mu)  # componentwise median


class UniformFactor(PriorFactor):
    """Box uniform on [lower, upper] per coordinate."""

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if self.lower.shape != self.upper.shape or np.any(self.upper <= self.lower):
            raise ValueError("uniform bounds must satisfy lower < upper per coordinate")
        self.dim = self.lower.shape[0]
        self._log_dens_inside = -np.sum(np.log(self.upper - self.lower))

    def sample(self, rng, cond=None):
        return rng.uniform(self.lower, self.upper)

    def sample_batch(self, rng, n, cond=None):
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def _inside(self, x):
        return np.all(x >= self.lower) and np.all(x <= self.upper)

    def log_density(self, x, cond=None):
        return self._log_dens_inside if self._inside(x) else -np.inf

    def log_density_batch(self, X, cond=None):
        ok = np.all((X >= self.lower) & (X <= self.upper), axis=1)
        return np.where(ok, self._log_dens_inside, -np.inf)

    def grad_log_density(self, x, cond=None):
        return np.zeros(self.dim)

    def hess_log_density(self, x, cond=None):
        return np.zeros((self.dim, self.dim))

    def start_point(self, cond=None):
        return 0.5 * (self.lower + self.upper)

    @property
    def box(self):
        return self.lower, self.upper


class EmptyFactor(PriorFactor):
    """Zero-dimensional factor: the degenerate no-nuisance case."""

    dim = 0

    def sample(self, rng, cond=None):
        return np.zeros(0)

    def sample_batch(self, rng, n, cond=None):
        return np.zeros((n, 0))

    def log_density(self, x, cond=None):
        return 0.0

    def log_density_batch(self, X, cond=None):
        return np.zeros(X.shape[0])

    def grad_log_density(self, x, cond=None):
        return np.zeros(0)

    def hess_log_density(self, x, cond=None):
        return np.zeros((0, 0))

    def start_point(self, cond=None):
        return np.zeros(0)


@dataclass
class PriorSpec:
    """Joint prior factored as pi(theta) * pi(phi | theta)."""

    theta_factor: PriorFactor
    phi_factor: PriorFactor

    @property
    def d_theta(self):
        return self.theta_factor.dim

    @property
    def d_phi(self):
        return self.phi_factor.dim

    def sample(self, rng):
        theta = self.theta_factor.sample(rng)
        phi = self.phi_factor.sample(rng, cond=theta)
        return theta, phi

    def sample_batch(self, rng, n):
        TH = self.theta_factor.sample_batch(rng, n)
        if self.phi_factor.cond_dependent:
            PH = np.stack([self.phi_factor.sample(rng, cond=t) for t in TH])
        else:
            PH = self.phi_factor.sample_batch(rng, n)
        return TH, PH

    def log_joint(self, theta, phi):
        lt = self.theta_factor.log_density(theta)
        if lt == -np.inf:
            return -np.inf
        return lt + self.phi_factor.log_density(phi, cond=theta)

    def log_joint_batch(self, TH, PH):
        lt = self.theta_factor.log_density_batch(TH)
        if self.phi_factor.cond_dependent:
            lp = np.array(
                [self.phi_factor.log_density(p, cond=t) for t, p in zip(TH, PH)]
            )
        else:
            lp = self.phi_factor.log_density_batch(PH)
        return lt + lp

    def grad_log_joint_z(self, theta, phi):
        """Gradient of log pi(theta, phi) with respect to z = (theta, phi)."""
        gt = self.theta_factor.grad_log_density(theta)
        if self.phi_factor.cond_dependent:
            gt = gt + self.phi_factor.grad_log_density_cond(phi, theta)
        gp = self.phi_factor.grad_log_density(phi, cond=theta)
        return np.concatenate([gt, gp])

    def hess_log_joint_z(self, theta, phi):
        """Hessian of log pi(theta, phi) in z; block diagonal when independent."""
        dt, dp = self.d_theta, self.d_phi
        H = np.zeros((dt + dp, dt + dp))
        H[:dt, :dt] = self.theta_factor.hess_log_density(theta)
        H[dt:, dt:] = self.phi_factor.hess_log_density(phi, cond=theta)
        if self.phi_factor.cond_dependent:
            # No analytic cross terms for conditional factors: central differences
            # of the z-gradient on the log joint.
            def grad_z(zv):
                return self.grad_log_joint_z(zv[:dt], zv[dt:])

            z = np.concatenate([theta, phi])
            Hfd = _fd_jacobian(grad_z, z)
            H = 0.5 * (Hfd + Hfd.T)
        return H


# ---------------------------------------------------------------------------
# Experiment model and data
# ---------------------------------------------------------------------------

@dataclass
class ExperimentModel:
    """Deterministic forward map with additive Gaussian observation noise.

    ``forward(xi, theta, phi)`` returns the length-``d_y`` model output;
    optional analytic Jacobians and a batched forward accelerate the hot
    paths (central finite differences and a per-row Python loop are the
    fallbacks). ``work_exponent_gamma``, ``weak_rate_eta`` and
    ``mesh_param_h`` describe an approximate (discretized) forward solver
    for work accounting; they are dimensionless and optional.
    """

    d_y: int
    d_theta: int
    d_phi: int
    d_xi: int
    n_e: int
    noise_cov: np.ndarray
    forward: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    jac_theta: Optional[Callable] = None
    jac_phi: Optional[Callable] = None
    jac_z: Optional[Callable] = None
    forward_batch: Optional[Callable] = None
    work_exponent_gamma: Optional[float] = None
    weak_rate_eta: Optional[float] = None
    mesh_param_h: Optional[float] = None
    name: str = ""
    _chol: np.ndarray = field(init=False, repr=False, default=None)
    _log_norm_1: float = field(init=False, repr=False, default=0.0)

    def __post_init__(self):
        if self.n_e < 1:
            raise ValueError("n_e must be a positive integer")
        S = np.asarray(self.noise_cov, dtype=float)
        if S.ndim == 0:
            S = S * np.eye(self.d_y)
        elif S.ndim == 1:
            S = np.diag(S)
        if S.shape != (self.d_y, self.d_y):
            raise ValueError("noise_cov must be d_y x d_y")
        asym = np.max(np.abs(S - S.T))
        if asym > 1e-12 * max(1.0, np.max(np.abs(S))):
            raise ValueError("noise_cov must be symmetric")
        self.noise_cov = 0.5 * (S + S.T)
        self._chol = np.linalg.cholesky(self.noise_cov)  # raises if not SPD
        self._chol_inv = scipy.linalg.solve_triangular(
            self._chol, np.eye(self.d_y), lower=True
        )
        self._prec = self._chol_inv.T @ self._chol_inv
        # -1/2 log det(2 pi Sigma) for a single observation
        self._log_norm_1 = -0.5 * (
            self.d_y * np.log(2.0 * np.pi) + 2.0 * np.sum(np.log(np.diag(self._chol)))
        )

    @property
    def noise_chol(self):
        return self._chol

    def eval_forward(self, xi, theta, phi):
        g = self.forward(xi, theta, phi)
        if not isinstance(g, np.ndarray) or g.dtype != np.float64:
            g = np.atleast_1d(np.asarray(g, dtype=float))
        if not np.isfinite(g).all():
            raise ForwardModelError(
                f"forward map returned non-finite output at theta={theta}, phi={phi}",
                theta=theta,
                phi=phi,
            )
        return g

    def eval_forward_batch(self, xi, TH, PH):
        """Forward map on row-aligned parameter batches; no finiteness check."""
        if self.forward_batch is not None:
            return np.asarray(self.forward_batch(xi, TH, PH), dtype=float)
        return np.stack(
            [np.asarray(self.forward(xi, t, p), dtype=float) for t, p in zip(TH, PH)]
        )

    def work_per_eval(self):
        """Abstract work units per forward evaluation (h^-gamma when discretized)."""
        if self.mesh_param_h is not None and self.work_exponent_gamma is not None:
            return float(self.mesh_param_h) ** (-float(self.work_exponent_gamma))
        return 1.0


@dataclass
class Dataset:
    """Observed data for one experiment: d_y x n_e matrix and its design."""

    Y: np.ndarray
    design: np.ndarray

    def __post_init__(self):
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        self.design = np.atleast_1d(np.asarray(self.design, dtype=float))
        if not np.all(np.isfinite(self.Y)):
            raise ValueError("dataset contains non-finite entries")

    @property
    def n_e(self):
        return self.Y.shape[1]


# ---------------------------------------------------------------------------
# Sampling and likelihood primitives
# ---------------------------------------------------------------------------

def sample_prior(prior: PriorSpec, rng):
    """Draw (theta, phi) from pi(theta) pi(phi | theta)."""
    return prior.sample(rng)


def sample_data(model: ExperimentModel, xi, theta, phi, rng) -> Dataset:
    """Draw n_e observations y_i = g(xi, theta, phi) + eps_i."""
    g = model.eval_forward(xi, theta, phi)
    eps = model.noise_chol @ rng.standard_normal((model.d_y, model.n_e))
    return Dataset(Y=g[:, None] + eps, design=np.atleast_1d(xi))


def residual(model: ExperimentModel, y_i, xi, theta, phi):
    """Data residual y_i - g(xi, theta, phi)."""
    return np.asarray(y_i, dtype=float) - model.eval_forward(xi, theta, phi)


class _WhitenedData:
    """Per-dataset cache of whitened observations for fast likelihood evals."""

    __slots__ = ("W", "wsum", "wss", "n_e")

    def __init__(self, model, data):
        self.W = model._chol_inv @ data.Y
        self.wsum = self.W.sum(axis=1)
        self.wss = float(np.sum(self.W * self.W))
        self.n_e = data.n_e


def _whitened(model, data):
    cache = getattr(data, "_whiten_cache", None)
    if cache is None:
        cache = _WhitenedData(model, data)
        data._whiten_cache = cache
    return cache


def sum_residual_quad(model: ExperimentModel, data: Dataset, g):
    """sum_i r_i . Sigma_eps^-1 r_i for residuals r_i = y_i - g.

    Computed from the whitened residuals directly (never via the expanded
    cross terms): the MAP solvers difference this quantity near its
    minimum, where expansion cancellation noise would dominate.
    """
    c = _whitened(model, data)
    R = c.W - (model._chol_inv @ g)[:, None]
    return float(np.sum(R * R))


def log_likelihood(model: ExperimentModel, data: Dataset, theta, phi, xi=None):
    """Gaussian log likelihood of the dataset given (theta, phi).

    Returns -(n_e/2) log det(2 pi Sigma_eps) - 1/2 sum_i r_i . Sigma^-1 r_i.
    """
    xi = data.design if xi is None else xi
    g = model.eval_forward(xi, theta, phi)
    return data.n_e * model._log_norm_1 - 0.5 * sum_residual_quad(model, data, g)


def log_likelihood_batch(model: ExperimentModel, data: Dataset, TH, PH, xi=None):
    """Vectorized log likelihood over row-aligned parameter batches.

    Rows whose forward output is non-finite get -inf (they carry zero
    likelihood; the caller decides whether that is an error).
    """
    xi = data.design if xi is None else xi
    if TH.shape[0] == 0:
        return np.zeros(0)
    G = model.eval_forward_batch(xi, TH, PH)
    c = _whitened(model, data)
    finite = np.all(np.isfinite(G), axis=1)
    out = np.full(TH.shape[0], -np.inf)
    if np.any(finite):
        WG = np.ascontiguousarray(G[finite] @ model._chol_inv.T)
        quads = kernels.residual_quads(WG, c.wsum, c.wss, float(c.n_e))
        out[finite] = data.n_e * model._log_norm_1 - 0.5 * quads
    return out


def log_prior_joint(prior: PriorSpec, theta, phi):
    """log pi(theta) + log pi(phi | theta); -inf outside the support."""
    return prior.log_joint(theta, phi)


# ---------------------------------------------------------------------------
# Finite-difference Jacobians
# ---------------------------------------------------------------------------

def _fd_jacobian(fun, x, steps=None):
    """Central-difference Jacobian of fun at x, one column per coordinate."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if steps is None:
        steps = FD_STEP * np.maximum(1.0, np.abs(x))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = steps[i]
        fp = np.asarray(fun(x + e), dtype=float)
        fm = np.asarray(fun(x - e), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise ForwardModelError(
                f"non-finite evaluation while differencing coordinate {i} at {x}"
            )
        cols.append((fp - fm) / (2.0 * steps[i]))
    if not cols:
        return np.zeros((np.size(fun(x)), 0))
    return np.stack(cols, axis=1)


def jac_theta_fd(model: ExperimentModel, xi, theta, phi):
    """Central-difference Jacobian of g with respect to theta."""
    return _fd_jacobian(lambda t: model.forward(xi, t, phi), np.asarray(theta, float))


def jac_phi_fd(model: ExperimentModel, xi, theta, phi):
    """Central-difference Jacobian of g with respect to phi."""
    return _fd_jacobian(lambda p: model.forward(xi, theta, p), np.asarray(phi, float))


def jac_z_fd(model: ExperimentModel, xi, theta, phi):
    """Central-difference Jacobian of g with respect to z = (theta, phi)."""
    dt = np.size(theta)

    def f(z):
        return model.forward(xi, z[:dt], z[dt:])

    return _fd_jacobian(f, np.concatenate([np.atleast_1d(theta), np.atleast_1d(phi)]))


def model_jac_theta(model, xi, theta, phi):
    if model.jac_theta is not None:
        return np.asarray(model.jac_theta(xi, theta, phi), dtype=float)
    return jac_theta_fd(model, xi, theta, phi)


def model_jac_phi(model, xi, theta, phi):
    if model.jac_phi is not None:
        return np.asarray(model.jac_phi(xi, theta, phi), dtype=float)
    return jac_phi_fd(model, xi, theta, phi)


def model_jac_z(model, xi, theta, phi):
    if model.jac_z is not None:
        return np.asarray(model.jac_z(xi, theta, phi), dtype=float)
    if model.jac_theta is not None and model.jac_phi is not None:
        return np.hstack(
            [model_jac_theta(model, xi, theta, phi), model_jac_phi(model, xi, theta, phi)]
        )
    return jac_z_fd(model, xi, theta, phi)
