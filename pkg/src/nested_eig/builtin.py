"""Built-in experiment models and their analytic references.

* ``example1``: two-channel linear Gaussian model (xi*theta, (1-xi)*phi)
  with a closed-form information gain, used as the main oracle.
* ``pk``: one-compartment pharmacokinetic sampling-time model with
  lognormal priors; the volume of distribution is the nuisance.
* ``synthetic-disc``: a mesh-indexed family wrapping the linear model with
  an exactly known information-gain offset b*h^eta and work rate h^-gamma,
  standing in for a discretized forward solver.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConfigError
from .models import (
    EmptyFactor,
    ExperimentModel,
    LognormalFactor,
    NormalFactor,
    PriorSpec,
)


# ---------------------------------------------------------------------------
# Linear Gaussian model and closed-form information gain
# ---------------------------------------------------------------------------

@dataclass
class LinearGaussianSpec:
    """y_i = A theta + B phi + eps_i with Gaussian priors; all conjugate."""

    A: np.ndarray
    B: np.ndarray
    theta_mean: np.ndarray
    theta_cov: np.ndarray
    phi_mean: np.ndarray
    phi_cov: np.ndarray
    noise_cov: np.ndarray
    n_e: int = 1

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.theta_mean = np.atleast_1d(np.asarray(self.theta_mean, dtype=float))
        self.phi_mean = np.atleast_1d(np.asarray(self.phi_mean, dtype=float))
        self.theta_cov = np.atleast_2d(np.asarray(self.theta_cov, dtype=float))
        self.phi_cov = np.atleast_2d(np.asarray(self.phi_cov, dtype=float))
        self.noise_cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))

    @property
    def d_theta(self):
        return self.A.shape[1]

    @property
    def d_phi(self):
        return self.B.shape[1]


def joint_posterior_moments(spec: LinearGaussianSpec, Y):
    """Exact joint posterior mean and covariance of z = (theta, phi)."""
    G = np.hstack([spec.A, spec.B])
    dz = G.shape[1]
    prior_prec = np.zeros((dz, dz))
    dt = spec.d_theta
    prior_prec[:dt, :dt] = np.linalg.inv(spec.theta_cov)
    prior_prec[dt:, dt:] = np.linalg.inv(spec.phi_cov)
    Sn_inv = np.linalg.inv(spec.noise_cov)
    post_prec = prior_prec + spec.n_e * G.T @ Sn_inv @ G
    post_cov = np.linalg.inv(post_prec)
    mu0 = np.concatenate([spec.theta_mean, spec.phi_mean])
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    rhs = prior_prec @ mu0 + G.T @ Sn_inv @ Y.sum(axis=1)
    return post_cov @ rhs, post_cov


def analytic_eig_linear_gaussian(spec: LinearGaussianSpec, about="theta-only"):
    """Closed-form expected information gain for the linear Gaussian model.

    With conjugate Gaussians the posterior covariance is data independent,
    so the expected KL divergence collapses to half the log ratio of prior
    to posterior determinants, marginal in theta or joint in (theta, phi).
    """
    G = np.hstack([spec.A, spec.B])
    dz = G.shape[1]
    dt = spec.d_theta
    prior_prec = np.zeros((dz, dz))
    prior_prec[:dt, :dt] = np.linalg.inv(spec.theta_cov)
    prior_prec[dt:, dt:] = np.linalg.inv(spec.phi_cov)
    Sn_inv = np.linalg.inv(spec.noise_cov)
    post_prec = prior_prec + spec.n_e * G.T @ Sn_inv @ G
    post_cov = np.linalg.inv(post_prec)
    if about == "theta-only":
        s, ld_prior = np.linalg.slogdet(spec.theta_cov)
        s2, ld_post = np.linalg.slogdet(post_cov[:dt, :dt])
        return 0.5 * (ld_prior - ld_post)
    if about == "joint":
        prior_cov = np.zeros((dz, dz))
        prior_cov[:dt, :dt] = spec.theta_cov
        prior_cov[dt:, dt:] = spec.phi_cov
        s, ld_prior = np.linalg.slogdet(prior_cov)
        s2, ld_post = np.linalg.slogdet(post_cov)
        return 0.5 * (ld_prior - ld_post)
    raise ValueError(f"about must be 'theta-only' or 'joint', got {about!r}")


# ---------------------------------------------------------------------------
# Example 1: two-channel linear model
# ---------------------------------------------------------------------------

EX1_THETA_VAR = 1.0
EX1_PHI_VAR = 1e-2
EX1_NOISE_VAR = 1e-2


def example1_spec(xi, n_e=1) -> LinearGaussianSpec:
    xi = float(np.atleast_1d(xi)[0])
    return LinearGaussianSpec(
        A=np.array([[xi], [0.0]]),
        B=np.array([[0.0], [1.0 - xi]]),
        theta_mean=[0.0],
        theta_cov=[[EX1_THETA_VAR]],
        phi_mean=[0.0],
        phi_cov=[[EX1_PHI_VAR]],
        noise_cov=EX1_NOISE_VAR * np.eye(2),
        n_e=n_e,
    )


def analytic_eig_example1(xi, about="theta-only", n_e=1):
    return analytic_eig_linear_gaussian(example1_spec(xi, n_e), about)


def _ex1_forward(xi, theta, phi):
    x = xi[0] if np.ndim(xi) else xi
    return np.array([x * theta[0], (1.0 - x) * phi[0]])


def _ex1_jac_theta(xi, theta, phi):
    x = xi[0] if np.ndim(xi) else xi
    return np.array([[x], [0.0]])


def _ex1_jac_phi(xi, theta, phi):
    x = xi[0] if np.ndim(xi) else xi
    return np.array([[0.0], [1.0 - x]])


def make_example1(n_e=1):
    """The two-channel linear model and its Gaussian priors."""
    model = ExperimentModel(
        d_y=2,
        d_theta=1,
        d_phi=1,
        d_xi=1,
        n_e=n_e,
        noise_cov=EX1_NOISE_VAR * np.eye(2),
        forward=_ex1_forward,
        jac_theta=_ex1_jac_theta,
        jac_phi=_ex1_jac_phi,
        forward_batch=lambda xi, TH, PH: kernels.ex1_forward_batch(
            float(np.atleast_1d(xi)[0]), TH, PH
        ),
        name="example1",
    )
    prior = PriorSpec(
        theta_factor=NormalFactor([0.0], [[EX1_THETA_VAR]]),
        phi_factor=NormalFactor([0.0], [[EX1_PHI_VAR]]),
    )
    return model, prior


def make_example1_nonuisance(n_e=1):
    """Both channels as parameters of interest: the degenerate d_phi = 0 path."""

    def fwd(xi, theta, phi):
        x = xi[0] if np.ndim(xi) else xi
        return np.array([x * theta[0], (1.0 - x) * theta[1]])

    def jt(xi, theta, phi):
        x = xi[0] if np.ndim(xi) else xi
        return np.array([[x, 0.0], [0.0, 1.0 - x]])

    model = ExperimentModel(
        d_y=2,
        d_theta=2,
        d_phi=0,
        d_xi=1,
        n_e=n_e,
        noise_cov=EX1_NOISE_VAR * np.eye(2),
        forward=fwd,
        jac_theta=jt,
        jac_phi=lambda xi, theta, phi: np.zeros((2, 0)),
        name="example1-nonuisance",
    )
    prior = PriorSpec(
        theta_factor=NormalFactor([0.0, 0.0], np.diag([EX1_THETA_VAR, EX1_PHI_VAR])),
        phi_factor=EmptyFactor(),
    )
    return model, prior


def analytic_eig_example1_nonuisance(xi, n_e=1):
    """Joint information gain when both channels are of interest."""
    spec = example1_spec(xi, n_e)
    return analytic_eig_linear_gaussian(spec, about="joint")


# ---------------------------------------------------------------------------
# Pharmacokinetic sampling-time model
# ---------------------------------------------------------------------------

PK_DOSE = 400.0
PK_NOISE_VAR = 1e-2
PK_N_TIMES = 15
PK_LOG_SPREAD = 0.05


def pk_geometric_design():
    """Geometrically spaced sampling times 0.94 * 1.25^(j-1), j = 1..15."""
    return 0.94 * 1.25 ** np.arange(PK_N_TIMES)


@dataclass
class PkSpec:
    dose: float = PK_DOSE
    noise_var: float = PK_NOISE_VAR
    spread: str = "variance"  # reading of the lognormal spread parameter
    n_e: int = 1


def _pk_forward(xi, theta, phi):
    return kernels.pk_forward_one(xi, theta[0], theta[1], phi[0], PK_DOSE)


def _pk_jac_theta(xi, theta, phi):
    return kernels.pk_jacobian(xi, theta[0], theta[1], phi[0], PK_DOSE)[:, :2]


def _pk_jac_phi(xi, theta, phi):
    return kernels.pk_jacobian(xi, theta[0], theta[1], phi[0], PK_DOSE)[:, 2:3]


def _pk_jac_z(xi, theta, phi):
    return kernels.pk_jacobian(xi, theta[0], theta[1], phi[0], PK_DOSE)


def make_pk(spec: Optional[PkSpec] = None):
    """One-compartment model with lognormal priors; volume is the nuisance.

    Interest parameters: absorption rate (log-median 1) and elimination
    rate (log-median 0.1). Nuisance: volume of distribution (log-median 20).
    """
    spec = spec or PkSpec()
    model = ExperimentModel(
        d_y=PK_N_TIMES,
        d_theta=2,
        d_phi=1,
        d_xi=PK_N_TIMES,
        n_e=spec.n_e,
        noise_cov=spec.noise_var * np.eye(PK_N_TIMES),
        forward=_pk_forward,
        jac_theta=_pk_jac_theta,
        jac_phi=_pk_jac_phi,
        jac_z=_pk_jac_z,
        forward_batch=lambda xi, TH, PH: kernels.pk_forward_batch(
            np.asarray(xi, dtype=float), TH, PH, PK_DOSE
        ),
        name="pk",
    )
    prior = PriorSpec(
        theta_factor=LognormalFactor(
            [0.0, np.log(0.1)], PK_LOG_SPREAD, spread=spec.spread
        ),
        phi_factor=LognormalFactor([np.log(20.0)], PK_LOG_SPREAD, spread=spec.spread),
    )
    return model, prior


# ---------------------------------------------------------------------------
# Synthetic discretized family
# ---------------------------------------------------------------------------

@dataclass
class SyntheticDiscretizedSpec:
    """Mesh-indexed wrapper with an exactly planted information-gain bias.

    At mesh size h the model behaves like the linear two-channel model at
    an effective design chosen so that the analytic information gain is
    shifted by exactly ``bias_amplitude * h**rate``; per-evaluation work
    scales as ``h**-work_rate``. h -> 0 recovers the base model.
    """

    bias_amplitude: float = 0.5
    rate: float = 2.0  # weak convergence exponent of the planted bias
    work_rate: float = 1.0
    n_e: int = 1


class SyntheticDiscretizedFamily:
    def __init__(self, spec: Optional[SyntheticDiscretizedSpec] = None):
        self.spec = spec or SyntheticDiscretizedSpec()

    def effective_design(self, xi, h):
        """Design whose exact information gain carries the planted offset."""
        x = float(np.atleast_1d(xi)[0])
        e0 = analytic_eig_example1(x, n_e=self.spec.n_e)
        e_h = e0 + self.spec.bias_amplitude * float(h) ** self.spec.rate
        ratio = EX1_THETA_VAR / EX1_NOISE_VAR
        return np.sqrt((np.exp(2.0 * e_h) - 1.0) / ratio)

    def analytic_eig(self, xi, h=0.0):
        x = float(np.atleast_1d(xi)[0])
        return (
            analytic_eig_example1(x, n_e=self.spec.n_e)
            + self.spec.bias_amplitude * float(h) ** self.spec.rate
        )

    def at_mesh(self, h):
        """Model/prior pair evaluated with mesh parameter h."""
        h = float(h)
        spec = self.spec

        def warp(xi):
            return self.effective_design(xi, h) if h > 0.0 else float(np.atleast_1d(xi)[0])

        def fwd(xi, theta, phi):
            x = warp(xi)
            return np.array([x * theta[0], (1.0 - x) * phi[0]])

        model = ExperimentModel(
            d_y=2,
            d_theta=1,
            d_phi=1,
            d_xi=1,
            n_e=spec.n_e,
            noise_cov=EX1_NOISE_VAR * np.eye(2),
            forward=fwd,
            jac_theta=lambda xi, t, p: np.array([[warp(xi)], [0.0]]),
            jac_phi=lambda xi, t, p: np.array([[0.0], [1.0 - warp(xi)]]),
            forward_batch=lambda xi, TH, PH: kernels.ex1_forward_batch(warp(xi), TH, PH),
            work_exponent_gamma=spec.work_rate,
            weak_rate_eta=spec.rate,
            mesh_param_h=h if h > 0.0 else None,
            name=f"synthetic-disc(h={h:g})",
        )
        prior = PriorSpec(
            theta_factor=NormalFactor([0.0], [[EX1_THETA_VAR]]),
            phi_factor=NormalFactor([0.0], [[EX1_PHI_VAR]]),
        )
        return model, prior


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

def build_model(name, params=None):
    """Construct a registered model by name.

    Returns (model, prior, oracle) where oracle(xi) is the analytic
    information gain or None when no closed form exists.
    """
    params = dict(params or {})
    if name == "example1":
        n_e = int(params.pop("n_e", 1))
        _reject_unknown(name, params)
        model, prior = make_example1(n_e=n_e)
        return model, prior, lambda xi: analytic_eig_example1(xi, n_e=n_e)
    if name == "example1-nonuisance":
        n_e = int(params.pop("n_e", 1))
        _reject_unknown(name, params)
        model, prior = make_example1_nonuisance(n_e=n_e)
        return model, prior, lambda xi: analytic_eig_example1_nonuisance(xi, n_e=n_e)
    if name == "pk":
        spec = PkSpec(
            spread=params.pop("spread", "variance"),
            n_e=int(params.pop("n_e", 1)),
        )
        _reject_unknown(name, params)
        model, prior = make_pk(spec)
        return model, prior, None
    if name == "synthetic-disc":
        spec = SyntheticDiscretizedSpec(
            bias_amplitude=float(params.pop("b", 0.5)),
            rate=float(params.pop("eta", 2.0)),
            work_rate=float(params.pop("gamma", 1.0)),
            n_e=int(params.pop("n_e", 1)),
        )
        h = float(params.pop("h", 0.0))
        _reject_unknown(name, params)
        family = SyntheticDiscretizedFamily(spec)
        model, prior = family.at_mesh(h)
        return model, prior, lambda xi, _f=family, _h=h: _f.analytic_eig(xi, _h)
    raise ConfigError(f"unknown model name {name!r}")


def _reject_unknown(name, params):
    if params:
        raise ConfigError(f"unknown parameters for model {name!r}: {sorted(params)}")


MODEL_NAMES = ("example1", "example1-nonuisance", "pk", "synthetic-disc")
