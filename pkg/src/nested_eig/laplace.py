"""MAP solves and Gaussian (Laplace) fits.

Three fits are provided, all sharing one quasi-Newton solver:

* the nuisance profile: minimize f(theta, phi) over phi at fixed theta,
* the marginalized-posterior fit over theta, whose objective profiles the
  nuisance MAP and carries the log-determinant and profiled-prior terms,
* the joint fit over z = (theta, phi).

Curvatures use the Gauss-Newton convention (residual-weighted second
derivatives of g dropped) unless configured otherwise; they are the
precision matrices of the returned Gaussian approximations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import numpy as np

from .errors import ForwardModelError, MapSolverError
from .models import (
    Dataset,
    ExperimentModel,
    PriorSpec,
    FD_STEP,
    model_jac_phi,
    model_jac_theta,
    model_jac_z,
    sum_residual_quad,
)

_BOX_SHRINK = 1e-9  # relative clamp inset for box-supported priors


@dataclass
class SolverConfig:
    """Settings for the MAP solver and curvature evaluation."""

    grad_tol: float = 1e-8  # scaled by 1 + |f(start)|
    max_iters: int = 200
    n_multistarts: int = 3
    jitter_start: float = 1e-10
    jitter_cap: float = 1e6
    k_hessian: str = "gauss-newton"  # curvature convention inside k(theta)
    # Accept the first converged start instead of racing all of them; the
    # remaining starts still run whenever the early ones fail.
    multistart_greedy: bool = True

    def __post_init__(self):
        if self.grad_tol <= 0 or self.max_iters < 1:
            raise ValueError("grad_tol must be > 0 and max_iters >= 1")
        if self.k_hessian not in ("gauss-newton", "full"):
            raise ValueError("k_hessian must be 'gauss-newton' or 'full'")


@dataclass
class LaplaceFit:
    """A Gaussian fit: mode, precision and diagnostics."""

    mode: np.ndarray
    precision: np.ndarray
    log_det_precision: float
    grad_norm_at_mode: float
    iterations: int
    jitter_added: float = 0.0
    converged: bool = True
    chol_precision: np.ndarray = field(default=None, repr=False)
    chol_inv: np.ndarray = field(default=None, repr=False)  # inverse of chol_precision

    @property
    def dim(self):
        return self.mode.shape[0]


def chol_pd(A, jitter_start=1e-10, jitter_cap=1e6):
    """Cholesky with symmetrization and a doubling jitter ladder.

    Returns (L, log_det, jitter). Raises MapSolverError if the cap is hit.
    """
    A = 0.5 * (np.asarray(A, dtype=float) + np.asarray(A, dtype=float).T)
    d = A.shape[0]
    if d == 0:
        return np.zeros((0, 0)), 0.0, 0.0
    if not np.all(np.isfinite(A)):
        raise MapSolverError("curvature matrix contains non-finite entries")
    if d == 1:
        a = A[0, 0]
        if a > 0.0 and np.isfinite(a):
            r = np.sqrt(a)
            return np.array([[r]]), np.log(a), 0.0
    jitter = 0.0
    lam = jitter_start
    while True:
        try:
            L = np.linalg.cholesky(A + jitter * np.eye(d))
            return L, 2.0 * np.sum(np.log(np.diag(L))), jitter
        except np.linalg.LinAlgError:
            jitter = lam
            lam *= 2.0
            if jitter > jitter_cap:
                raise MapSolverError(
                    f"matrix not positive definite after jitter {jitter:g}"
                )


def _tri_inv(L):
    return np.linalg.inv(L) if L.shape[0] else np.zeros((0, 0))


def _shrink_box(box):
    """Pre-shrink a (lower, upper) box by the relative clamp inset; infinite
    sides pass through. Boxes handed to the solver are always pre-shrunk."""
    if box is None:
        return None
    lo = np.asarray(box[0], dtype=float)
    hi = np.asarray(box[1], dtype=float)
    finite = np.isfinite(lo) & np.isfinite(hi)
    width = np.where(finite, hi - lo, 0.0)
    return (
        np.where(np.isfinite(lo), lo + _BOX_SHRINK * width, lo),
        np.where(np.isfinite(hi), hi - _BOX_SHRINK * width, hi),
    )


def _clamp(x, box):
    if box is None:
        return x
    return np.clip(x, box[0], box[1])


def minimize_bfgs(f, fg, x0, grad_tol, max_iters=200, box=None, h0=None):
    """Quasi-Newton (BFGS) minimization with backtracking line search.

    ``f(x)`` returns the objective (may be +inf outside the domain),
    ``fg(x)`` returns (value, gradient). Iterates are clamped to ``box``
    (open box, slightly shrunk) when given.

    Near the minimum the remaining decrease can fall below the floating
    point resolution of f while the gradient still exceeds the tolerance
    (steep objectives); when Armijo cannot certify progress, the full
    quasi-Newton step is accepted on a gradient-reduction test instead.

    ``h0`` seeds the inverse-Hessian approximation (for instance with an
    inverted Gauss-Newton matrix); the default is a rescaled identity.

    Returns (x, fval, grad, iterations, converged).
    """
    x = _clamp(np.asarray(x0, dtype=float).copy(), box)
    fx, g = fg(x)
    if not np.isfinite(fx):
        return x, fx, g, 0, False
    n = x.shape[0]
    if n == 0:
        return x, fx, g, 0, True
    if h0 is not None and np.all(np.isfinite(h0)):
        H = h0
        first_update = False
    else:
        H = np.eye(n)
        first_update = True
    it = 0
    gnorm = np.max(np.abs(g))
    while it < max_iters and gnorm > grad_tol:
        p = -H @ g
        dphi = np.dot(p, g)
        if not np.isfinite(dphi) or dphi >= 0.0:
            H = np.eye(n)
            first_update = True
            p = -g
            dphi = -np.dot(g, g)
        if it == 0 and first_update:
            # damp the unscaled first step so steep objectives do not force
            # a long backtracking cascade
            pn = np.sqrt(np.dot(p, p))
            if pn > 1.0:
                p /= pn
                dphi /= pn
        it += 1
        f_res = 64.0 * np.finfo(float).eps * (1.0 + abs(fx))
        accepted = False
        gn = None
        alpha = 1.0
        if -dphi > f_res:
            # decrease is resolvable in f: plain Armijo backtracking
            for _ in range(50):
                xn = _clamp(x + alpha * p, box)
                fn = f(xn)
                if np.isfinite(fn) and fn <= fx + 1e-4 * alpha * dphi:
                    accepted = True
                    break
                alpha *= 0.5
                if alpha * np.max(np.abs(p)) < 1e-18 * (1.0 + np.max(np.abs(x))):
                    break
        if not accepted:
            # endgame: f is flat to machine resolution along p; take the
            # full step if it does not measurably raise f and it shrinks
            # the gradient
            xn = _clamp(x + p, box)
            if not np.array_equal(xn, x):
                fn, gn = fg(xn)
                if not (np.isfinite(fn) and fn <= fx + f_res
                        and np.max(np.abs(gn)) < gnorm):
                    break
            else:
                break
        if np.array_equal(xn, x):
            break
        if gn is None:
            fn, gn = fg(xn)
        s = xn - x
        y = gn - g
        x, fx, g = xn, fn, gn
        gnorm = np.max(np.abs(g))
        sy = np.dot(s, y)
        if sy > 1e-12 * np.sqrt(np.dot(s, s) * np.dot(y, y)):
            if first_update:
                H = (sy / np.dot(y, y)) * np.eye(n)
                first_update = False
            rho = 1.0 / sy
            Hy = H @ y
            H = (
                H
                - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                + rho * (1.0 + rho * np.dot(y, Hy)) * np.outer(s, s)
            )
    converged = gnorm <= grad_tol
    return x, fx, g, it, converged


def _multistart(f, fg, starts, cfg: SolverConfig, box, h0_fn=None):
    """Run the solver from several starts; best converged value wins.

    In greedy mode the first converged start is accepted immediately; the
    remaining starts are only visited when earlier ones fail. ``h0_fn``
    maps a start point to an initial inverse-Hessian seed (or None).
    """
    best_conv = None
    best_any = None
    for x0 in starts:
        x0c = _clamp(np.asarray(x0, dtype=float), box)
        f0 = f(x0c)
        if not np.isfinite(f0):
            continue
        tol = cfg.grad_tol * (1.0 + abs(f0))
        h0 = _safe_h0(h0_fn, x0c)
        res = minimize_bfgs(f, fg, x0, tol, cfg.max_iters, box, h0=h0)
        if best_any is None or res[1] < best_any[1]:
            best_any = res
        if res[4]:
            if cfg.multistart_greedy:
                return res
            if best_conv is None or res[1] < best_conv[1]:
                best_conv = res
    if best_conv is not None:
        return best_conv
    if best_any is None:
        raise MapSolverError("no finite starting point for MAP solve")
    return best_any


def _safe_h0(h0_fn, x):
    if h0_fn is None:
        return None
    try:
        return h0_fn(x)
    except (np.linalg.LinAlgError, ForwardModelError):
        return None


def _quad_soft(model, data, theta, phi):
    """Residual quadratic form; non-finite (not raising) on forward failure,
    which the line search treats as a rejected point."""
    g = model.forward(data.design, theta, phi)
    return sum_residual_quad(model, data, g)


def _grad_quad_phi(model, data, theta, phi):
    """Gradient of 1/2 sum_i r_i.Sigma^-1 r_i with respect to phi."""
    g = model.forward(data.design, theta, phi)
    J = model_jac_phi(model, data.design, theta, phi)
    rsum = data.Y.sum(axis=1) - data.n_e * g
    return -J.T @ (model._prec @ rsum), J


# ---------------------------------------------------------------------------
# f(theta, phi) and its derivatives in phi
# ---------------------------------------------------------------------------

def eval_f(model: ExperimentModel, prior: PriorSpec, data: Dataset, theta, phi):
    """f(theta, phi) = 1/2 sum_i r_i . Sigma^-1 r_i - log pi(phi | theta).

    +inf when phi is outside the prior support or the forward map fails.
    """
    lp = prior.phi_factor.log_density(phi, cond=theta)
    if lp == -np.inf:
        return np.inf
    q = _quad_soft(model, data, theta, phi)
    return 0.5 * q - lp


def grad_f_phi(model, prior, data, theta, phi):
    gq, _ = _grad_quad_phi(model, data, theta, phi)
    return gq - prior.phi_factor.grad_log_density(phi, cond=theta)


def gauss_newton_phi(model, data, theta, phi, J=None):
    """n_e J^T Sigma^-1 J with J the phi-Jacobian of g."""
    if J is None:
        J = model_jac_phi(model, data.design, theta, phi)
    W = model._chol_inv @ J
    return data.n_e * (W.T @ W)


def hess_f_phi(model, prior, data, theta, phi, gauss_newton=True):
    """Hessian of f in phi: Gauss-Newton by default, full form on request.

    The full form adds the residual-weighted second derivative of g,
    obtained by central differences of the phi-Jacobian.
    """
    J = model_jac_phi(model, data.design, theta, phi)
    H = gauss_newton_phi(model, data, theta, phi, J=J)
    H = H - prior.phi_factor.hess_log_density(phi, cond=theta)
    if not gauss_newton and phi.shape[0] > 0:
        g = model.eval_forward(data.design, theta, phi)
        rsum = data.Y.sum(axis=1) - data.n_e * g
        sir = model._prec @ rsum
        d = phi.shape[0]
        steps = FD_STEP * np.maximum(1.0, np.abs(phi))
        T = np.zeros((d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = steps[j]
            Jp = model_jac_phi(model, data.design, theta, phi + e)
            Jm = model_jac_phi(model, data.design, theta, phi - e)
            # column j of d/dphi_j (J^T Sigma^-1 rsum), residual held fixed
            T[:, j] = ((Jp - Jm) / (2.0 * steps[j])).T @ sir
        H = H - 0.5 * (T + T.T)
    return H


# ---------------------------------------------------------------------------
# Nuisance profile fit
# ---------------------------------------------------------------------------

_TRIVIAL_EMPTY = dict(
    precision=np.zeros((0, 0)),
    log_det_precision=0.0,
    grad_norm_at_mode=0.0,
    iterations=0,
)


def fit_nuisance_map(
    model: ExperimentModel,
    prior: PriorSpec,
    data: Dataset,
    theta,
    cfg: SolverConfig = None,
    rng=None,
    warm_start=None,
    start_hint=None,
) -> LaplaceFit:
    """Fit the Gaussian profile of the nuisance posterior at fixed theta.

    The mode minimizes f(theta, phi); the precision is the Gauss-Newton
    curvature n_e J^T Sigma^-1 J - hess log pi(phi_hat | theta).
    """
    cfg = cfg or SolverConfig()
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if prior.d_phi == 0:
        return LaplaceFit(
            mode=np.zeros(0),
            chol_precision=np.zeros((0, 0)),
            chol_inv=np.zeros((0, 0)),
            **_TRIVIAL_EMPTY,
        )

    fac = prior.phi_factor

    def f(phi):
        return eval_f(model, prior, data, theta, phi)

    def fg(phi):
        val = f(phi)
        if not np.isfinite(val):
            return val, np.zeros_like(phi)
        gq, _ = _grad_quad_phi(model, data, theta, phi)
        return val, gq - fac.grad_log_density(phi, cond=theta)

    box = _shrink_box(fac.box)

    def h0_fn(x):
        P0 = gauss_newton_phi(model, data, theta, x) - fac.hess_log_density(x, cond=theta)
        return np.linalg.inv(P0)

    best = None
    if warm_start is not None:
        w = _clamp(np.asarray(warm_start, dtype=float), box)
        fw = f(w)
        if np.isfinite(fw):
            tol = cfg.grad_tol * (1.0 + abs(fw))
            res = minimize_bfgs(f, fg, w, tol, cfg.max_iters, box, h0=_safe_h0(h0_fn, w))
            if res[4]:
                best = res
    if best is None:
        rng = rng or np.random.default_rng(0)
        starts = [] if start_hint is None else [np.asarray(start_hint, dtype=float)]
        starts += [fac.start_point(cond=theta)]
        starts += [fac.sample(rng, cond=theta) for _ in range(cfg.n_multistarts - 1)]
        best = _multistart(f, fg, starts, cfg, box, h0_fn=h0_fn)
    mode, fval, g, iters, converged = best
    if not converged:
        raise MapSolverError(
            f"nuisance MAP did not converge at theta={theta} (|g|={np.max(np.abs(g)):.2e})"
        )
    P = gauss_newton_phi(model, data, theta, mode) - fac.hess_log_density(mode, cond=theta)
    L, logdet, jitter = chol_pd(P, cfg.jitter_start, cfg.jitter_cap)
    return LaplaceFit(
        mode=mode,
        precision=P + jitter * np.eye(P.shape[0]),
        log_det_precision=logdet,
        grad_norm_at_mode=float(np.max(np.abs(g))),
        iterations=iters,
        jitter_added=jitter,
        chol_precision=L,
        chol_inv=_tri_inv(L),
    )


def marginalized_log_posterior_unnorm(
    model, prior, data, theta, cfg: SolverConfig = None, rng=None, warm_start=None
):
    """Profiled log posterior of theta with the nuisance integrated by
    Laplace's method, up to a theta-independent constant.

    log pi(theta) + log pi(phi_hat | theta) + (d_phi/2) log 2pi
      - 1/2 log det(hess_phi f) - 1/2 sum_i r_i . Sigma^-1 r_i  at phi_hat(theta).
    """
    cfg = cfg or SolverConfig()
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    lt = prior.theta_factor.log_density(theta)
    if lt == -np.inf:
        return -np.inf
    fit = fit_nuisance_map(model, prior, data, theta, cfg, rng=rng, warm_start=warm_start)
    k = 0.5 * _k_logdet(model, prior, data, theta, fit, cfg)
    ell = prior.phi_factor.log_density(fit.mode, cond=theta)
    quad = _quad_soft(model, data, theta, fit.mode)
    return lt + ell + 0.5 * prior.d_phi * np.log(2.0 * np.pi) - k - 0.5 * quad


def _k_logdet(model, prior, data, theta, fit, cfg):
    """log det of the phi-curvature used inside k(theta)."""
    if cfg.k_hessian == "gauss-newton":
        return fit.log_det_precision
    H = hess_f_phi(model, prior, data, theta, fit.mode, gauss_newton=False)
    _, logdet, _ = chol_pd(H, cfg.jitter_start, cfg.jitter_cap)
    return logdet


# ---------------------------------------------------------------------------
# Marginalized-posterior fit over theta
# ---------------------------------------------------------------------------

class _Profile:
    """Profiled objective F(theta) with warm-started inner solves.

    F = 1/2 sum_i r_i.Sigma^-1 r_i - log pi(theta) + k(theta) - l(theta),
    evaluated at phi_hat(theta); k is half the log-determinant of the
    phi-curvature, l the log prior density of the profiled nuisance.

    Inner solves share one pair of objective closures (the probe theta
    lives in a cell) and run warm-started with a Gauss-Newton inverse as
    the initial BFGS matrix, so re-solves at nearby thetas cost a couple
    of objective evaluations; a cold full multistart fit is the fallback.
    """

    def __init__(self, model, prior, data, cfg, rng):
        self.model = model
        self.prior = prior
        self.data = data
        self.cfg = cfg
        # the inner residual gradient enters the envelope gradient of F,
        # so the inner solves run two orders tighter than the outer one
        self.inner_cfg = replace(cfg, grad_tol=0.01 * cfg.grad_tol)
        self.rng = rng
        self.warm = None
        self.nfev = 0
        self._last = None  # one-point memo for repeated center evaluations
        fac = prior.phi_factor
        self._box = _shrink_box(fac.box)
        self._theta = None

        def f_inner(phi):
            lp = fac.log_density(phi, cond=self._theta)
            if lp == -np.inf:
                return np.inf
            return 0.5 * _quad_soft(model, data, self._theta, phi) - lp

        def fg_inner(phi):
            val = f_inner(phi)
            if not np.isfinite(val):
                return val, np.zeros_like(phi)
            gq, _ = _grad_quad_phi(model, data, self._theta, phi)
            return val, gq - fac.grad_log_density(phi, cond=self._theta)

        self._f_inner = f_inner
        self._fg_inner = fg_inner

    def inner(self, theta):
        """(phi_hat, gn_precision, logdet) at theta, warm-refined."""
        if self.prior.d_phi == 0:
            return np.zeros(0), np.zeros((0, 0)), 0.0
        fac = self.prior.phi_factor
        mode = None
        if self.warm is not None:
            self._theta = theta
            w = _clamp(np.asarray(self.warm, dtype=float), self._box)
            fw = self._f_inner(w)
            if np.isfinite(fw):
                P_w = gauss_newton_phi(self.model, self.data, theta, w)
                P_w = P_w - fac.hess_log_density(w, cond=theta)
                h0 = None
                try:
                    h0 = np.linalg.inv(P_w)
                except np.linalg.LinAlgError:
                    pass
                tol = self.inner_cfg.grad_tol * (1.0 + abs(fw))
                res = minimize_bfgs(
                    self._f_inner, self._fg_inner, w, tol,
                    self.inner_cfg.max_iters, self._box, h0=h0,
                )
                if res[4]:
                    mode = res[0]
        if mode is None:
            fit = fit_nuisance_map(
                self.model, self.prior, self.data, theta, self.inner_cfg, rng=self.rng
            )
            self.warm = fit.mode
            return fit.mode, fit.precision, fit.log_det_precision
        self.warm = mode
        P = gauss_newton_phi(self.model, self.data, theta, mode)
        P = P - fac.hess_log_density(mode, cond=theta)
        L, logdet, _ = chol_pd(P, self.cfg.jitter_start, self.cfg.jitter_cap)
        return mode, P, logdet

    def _k_of(self, theta, phi, logdet_gn):
        if self.cfg.k_hessian == "gauss-newton":
            return 0.5 * logdet_gn
        H = hess_f_phi(self.model, self.prior, self.data, theta, phi, gauss_newton=False)
        _, logdet, _ = chol_pd(H, self.cfg.jitter_start, self.cfg.jitter_cap)
        return 0.5 * logdet

    def parts(self, theta):
        """(F, phi_hat, k, l) at theta; F is +inf outside the theta support."""
        key = theta.tobytes()
        if self._last is not None and self._last[0] == key:
            return self._last[1]
        self.nfev += 1
        h = self.prior.theta_factor.log_density(theta)
        if h == -np.inf:
            out = (np.inf, None, np.nan, np.nan)
        else:
            phi, _, logdet = self.inner(theta)
            k = self._k_of(theta, phi, logdet)
            ell = self.prior.phi_factor.log_density(phi, cond=theta)
            quad = _quad_soft(self.model, self.data, theta, phi)
            out = (0.5 * quad - h + k - ell, phi, k, ell)
        self._last = (key, out)
        return out

    def value(self, theta):
        return self.parts(theta)[0]

    def k_at(self, theta):
        """k(theta) alone, via a warm inner re-solve."""
        phi, _, logdet = self.inner(theta)
        return self._k_of(theta, phi, logdet)

    def value_grad(self, theta):
        """F and its gradient.

        The profiled residual and prior terms are differentiated exactly
        through the envelope (the inner gradient vanishes at phi_hat), so
        the steep part of F carries no differencing error; only the mild
        log-determinant term k is central-differenced.
        """
        f0, phi, k0, _ = self.parts(theta)
        if not np.isfinite(f0):
            return f0, np.zeros_like(theta)
        g_fwd = self.model.eval_forward(self.data.design, theta, phi)
        Jt = model_jac_theta(self.model, self.data.design, theta, phi)
        rsum = self.data.Y.sum(axis=1) - self.data.n_e * g_fwd
        grad = -Jt.T @ (self.model._prec @ rsum)
        grad -= self.prior.theta_factor.grad_log_density(theta)
        if self.prior.d_phi > 0:
            if self.prior.phi_factor.cond_dependent:
                grad -= self.prior.phi_factor.grad_log_density_cond(phi, theta)
            n = theta.shape[0]
            steps = FD_STEP * np.maximum(1.0, np.abs(theta))
            center_warm = self.warm
            for i in range(n):
                e = np.zeros(n)
                e[i] = steps[i]
                kp = self.k_at(theta + e)
                self.warm = center_warm
                km = self.k_at(theta - e)
                self.warm = center_warm
                grad[i] += (kp - km) / (2.0 * steps[i])
        return f0, grad


def fit_theta_map(
    model: ExperimentModel,
    prior: PriorSpec,
    data: Dataset,
    cfg: SolverConfig = None,
    rng=None,
    start_hint=None,
) -> LaplaceFit:
    """Fit the Gaussian approximation of the marginalized theta-posterior.

    The mode minimizes the profiled objective F; the precision drops the
    residual-weighted model curvature:

      n_e (J_z T)^T Sigma^-1 (J_z T) - hess log pi(theta)
        + hess[k - l](theta_hat),

    with T = d z / d theta = (I; d phi_hat / d theta) from differenced
    inner solves, and the k - l curvature from differenced scalar profiles.
    """
    cfg = cfg or SolverConfig()
    rng = rng or np.random.default_rng(0)
    prof = _Profile(model, prior, data, cfg, rng)
    tf = prior.theta_factor

    def h0_fn(th):
        phi, _, _ = prof.inner(th)
        Jt = model_jac_theta(model, data.design, th, phi)
        W = model._chol_inv @ Jt
        P0 = data.n_e * (W.T @ W) - tf.hess_log_density(th)
        return np.linalg.inv(P0)

    starts = [] if start_hint is None else [np.asarray(start_hint, dtype=float)]
    starts += [tf.start_point()]
    starts += [tf.sample(rng) for _ in range(cfg.n_multistarts - 1)]
    box = _shrink_box(tf.box)
    mode, fval, g, iters, converged = _multistart(
        prof.value, prof.value_grad, starts, cfg, box, h0_fn=h0_fn
    )
    if not converged:
        raise MapSolverError(
            f"theta MAP did not converge (|g|={np.max(np.abs(g)):.2e} after {iters} iters)"
        )

    _, phi_mode, k0, ell0 = prof.parts(mode)
    dt = mode.shape[0]
    dp = prior.d_phi

    # d phi_hat / d theta by central differences of re-solved inner MAPs
    dphihat = np.zeros((dp, dt))
    c0 = k0 - ell0
    steps = FD_STEP * np.maximum(1.0, np.abs(mode))
    if dp > 0:
        for j in range(dt):
            e = np.zeros(dt)
            e[j] = steps[j]
            prof.warm = phi_mode
            fp = prof.inner(mode + e)[0]
            prof.warm = phi_mode
            fm = prof.inner(mode - e)[0]
            dphihat[:, j] = (fp - fm) / (2.0 * steps[j])

    T = np.vstack([np.eye(dt), dphihat])
    Jz = model_jac_z(model, data.design, mode, phi_mode)
    J = Jz @ T
    W = model._chol_inv @ J
    P = data.n_e * (W.T @ W) - tf.hess_log_density(mode)
    if dp > 0:
        P = P + _profile_correction_hess(prof, mode, c0)

    L, logdet, jitter = chol_pd(P, cfg.jitter_start, cfg.jitter_cap)
    return LaplaceFit(
        mode=mode,
        precision=P + jitter * np.eye(dt),
        log_det_precision=logdet,
        grad_norm_at_mode=float(np.max(np.abs(g))),
        iterations=iters,
        jitter_added=jitter,
        chol_precision=L,
        chol_inv=_tri_inv(L),
    )


def _profile_correction_hess(prof: _Profile, mode, c0):
    """Hessian of c(theta) = k(theta) - l(theta) by central differences."""
    dt = mode.shape[0]
    steps = (np.finfo(float).eps ** 0.25) * np.maximum(1.0, np.abs(mode))
    warm0 = prof.warm

    def c(theta):
        prof.warm = warm0
        _, _, k, ell = prof.parts(theta)
        return k - ell

    H = np.zeros((dt, dt))
    cp = np.zeros(dt)
    cm = np.zeros(dt)
    for i in range(dt):
        e = np.zeros(dt)
        e[i] = steps[i]
        cp[i] = c(mode + e)
        cm[i] = c(mode - e)
        H[i, i] = (cp[i] - 2.0 * c0 + cm[i]) / steps[i] ** 2
    for i in range(dt):
        for j in range(i + 1, dt):
            ei = np.zeros(dt)
            ej = np.zeros(dt)
            ei[i] = steps[i]
            ej[j] = steps[j]
            cpp = c(mode + ei + ej)
            cpm = c(mode + ei - ej)
            cmp = c(mode - ei + ej)
            cmm = c(mode - ei - ej)
            H[i, j] = H[j, i] = (cpp - cpm - cmp + cmm) / (4.0 * steps[i] * steps[j])
    prof.warm = warm0
    return H


# ---------------------------------------------------------------------------
# Joint fit over z = (theta, phi)
# ---------------------------------------------------------------------------

def fit_joint_map(
    model: ExperimentModel,
    prior: PriorSpec,
    data: Dataset,
    cfg: SolverConfig = None,
    rng=None,
    start_hint=None,
) -> LaplaceFit:
    """Fit the Gaussian approximation of the joint posterior of (theta, phi).

    Mode minimizes 1/2 sum_i r_i.Sigma^-1 r_i - log pi(z); precision is
    n_e J_z^T Sigma^-1 J_z - hess_z log pi(z_hat).
    """
    cfg = cfg or SolverConfig()
    rng = rng or np.random.default_rng(0)
    dt, dp = prior.d_theta, prior.d_phi

    def split(z):
        return z[:dt], z[dt:]

    def f(z):
        th, ph = split(z)
        lp = prior.log_joint(th, ph)
        if lp == -np.inf:
            return np.inf
        return 0.5 * _quad_soft(model, data, th, ph) - lp

    def fg(z):
        val = f(z)
        if not np.isfinite(val):
            return val, np.zeros_like(z)
        th, ph = split(z)
        g = model.eval_forward(data.design, th, ph)
        Jz = model_jac_z(model, data.design, th, ph)
        rsum = data.Y.sum(axis=1) - data.n_e * g
        return val, -Jz.T @ (model._prec @ rsum) - prior.grad_log_joint_z(th, ph)

    box = _shrink_box(_joint_box(prior))

    def h0_fn(z):
        th, ph = split(z)
        Jz = model_jac_z(model, data.design, th, ph)
        W = model._chol_inv @ Jz
        P0 = data.n_e * (W.T @ W) - prior.hess_log_joint_z(th, ph)
        return np.linalg.inv(P0)

    starts = [] if start_hint is None else [np.asarray(start_hint, dtype=float)]
    starts += [
        np.concatenate([prior.theta_factor.start_point(),
                        prior.phi_factor.start_point()])
    ]
    for _ in range(cfg.n_multistarts - 1):
        th, ph = prior.sample(rng)
        starts.append(np.concatenate([th, ph]))
    mode, fval, g, iters, converged = _multistart(f, fg, starts, cfg, box, h0_fn=h0_fn)
    if not converged:
        raise MapSolverError(
            f"joint MAP did not converge (|g|={np.max(np.abs(g)):.2e})"
        )
    th, ph = split(mode)
    Jz = model_jac_z(model, data.design, th, ph)
    W = model._chol_inv @ Jz
    P = data.n_e * (W.T @ W) - prior.hess_log_joint_z(th, ph)
    L, logdet, jitter = chol_pd(P, cfg.jitter_start, cfg.jitter_cap)
    return LaplaceFit(
        mode=mode,
        precision=P + jitter * np.eye(dt + dp),
        log_det_precision=logdet,
        grad_norm_at_mode=float(np.max(np.abs(g))),
        iterations=iters,
        jitter_added=jitter,
        chol_precision=L,
        chol_inv=_tri_inv(L),
    )


def _joint_box(prior):
    dt, dp = prior.d_theta, prior.d_phi
    bt = prior.theta_factor.box
    bp = prior.phi_factor.box
    if bt is None and bp is None:
        return None
    lo = np.full(dt + dp, -np.inf)
    hi = np.full(dt + dp, np.inf)
    if bt is not None:
        lo[:dt], hi[:dt] = bt
    if bp is not None:
        lo[dt:], hi[dt:] = bp
    return lo, hi


# ---------------------------------------------------------------------------
# Gaussian density and sampling from a fit
# ---------------------------------------------------------------------------

def laplace_log_density(fit: LaplaceFit, x):
    """Log density of the fit's Gaussian at x."""
    d = fit.dim
    v = np.asarray(x, dtype=float) - fit.mode
    return (
        0.5 * fit.log_det_precision
        - 0.5 * d * np.log(2.0 * np.pi)
        - 0.5 * v @ fit.precision @ v
    )


def laplace_log_density_batch(fit: LaplaceFit, X):
    d = fit.dim
    V = np.asarray(X, dtype=float) - fit.mode
    # quadratic form via the Cholesky factor of the precision: |L^T v|^2
    Q = V @ fit.chol_precision
    return (
        0.5 * fit.log_det_precision
        - 0.5 * d * np.log(2.0 * np.pi)
        - 0.5 * np.einsum("ij,ij->i", Q, Q)
    )


def sample_laplace(fit: LaplaceFit, rng):
    """One draw: mode + L^-T eta with L the Cholesky factor of the precision."""
    eta = rng.standard_normal(fit.dim)
    if fit.dim == 0:
        return eta
    return fit.mode + fit.chol_inv.T @ eta


def sample_laplace_batch(fit: LaplaceFit, rng, n):
    eta = rng.standard_normal((n, fit.dim))
    if fit.dim == 0:
        return eta
    return fit.mode + eta @ fit.chol_inv
