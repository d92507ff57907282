"""Design-space optimization and sweeps of the information-gain surface.

The optimizer cycles through design coordinates; each coordinate step uses
a central finite difference of a minibatch estimate under common random
numbers (identical substreams on both sides of the probe), then takes a
greedy projected step: the move is kept only if a CRN re-evaluation does
not decrease the minibatch objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NestedEigError
from .estimators import (
    derive_seed,
    dlmc2is_terms,
    dlmc_terms,
    mc2la_terms,
    resolve_threads,
)
from .laplace import SolverConfig

logger = logging.getLogger("nested_eig")


@dataclass
class DesignProblem:
    """Bounds, start point and stepping rules for the coordinate optimizer."""

    bounds: np.ndarray  # (d_xi, 2) closed intervals
    initial_design: np.ndarray
    minibatch_n: int = 300
    coordinate_order: Optional[list] = None  # default: cyclic 0..d-1
    step_init: Optional[np.ndarray] = None  # default 0.05 * (hi - lo)
    max_sweeps: int = 8
    move_tol: float = 1e-3  # relative to the coordinate range
    fd_step_design: float = 1e-2
    m1_inner: int = 2
    m2_inner: int = 2

    def __post_init__(self):
        self.bounds = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        self.initial_design = np.atleast_1d(np.asarray(self.initial_design, dtype=float))
        if self.bounds.shape != (self.initial_design.shape[0], 2):
            raise ValueError("bounds must be (d_xi, 2) matching the initial design")
        if np.any(self.initial_design < self.bounds[:, 0]) or np.any(
            self.initial_design > self.bounds[:, 1]
        ):
            raise ValueError("initial design must lie within bounds")
        if self.minibatch_n < 1:
            raise ValueError("minibatch_n must be >= 1")
        if self.step_init is None:
            self.step_init = 0.05 * (self.bounds[:, 1] - self.bounds[:, 0])
        else:
            self.step_init = np.broadcast_to(
                np.asarray(self.step_init, dtype=float), self.initial_design.shape
            ).copy()


@dataclass
class TraceRow:
    sweep: int
    coordinate: int
    design: np.ndarray
    eig: float
    stderr: float


def minibatch_terms(model, prior, xi, kind, n, m1, m2, seed, cfg, threads):
    if kind == "mc2la":
        return mc2la_terms(model, prior, xi, n, seed, cfg, threads=threads)
    if kind == "dlmc2is":
        return dlmc2is_terms(model, prior, xi, n, m1, m2, seed, cfg, threads=threads)
    if kind == "dlmc":
        return dlmc_terms(model, prior, xi, n, m1, m2, seed, threads=threads)
    raise NestedEigError(f"unknown estimator kind {kind!r}")


def _mean_stderr(terms):
    t = terms[np.isfinite(terms)]
    if t.size == 0:
        return np.nan, np.nan
    se = np.std(t, ddof=1) / np.sqrt(t.size) if t.size > 1 else np.inf
    return float(np.mean(t)), float(se)


def crn_gradient(model, prior, xi, coord, delta, kind, n, seed,
                 cfg: SolverConfig = None, m1=2, m2=2, threads=1):
    """Central-difference gradient of the minibatch objective in one
    coordinate, with both probes on identical substreams.

    Returns (gradient estimate, its standard error from the paired
    per-sample differences).
    """
    xi = np.asarray(xi, dtype=float)
    e = np.zeros_like(xi)
    e[coord] = delta
    tp = minibatch_terms(model, prior, xi + e, kind, n, m1, m2, seed, cfg, threads)
    tm = minibatch_terms(model, prior, xi - e, kind, n, m1, m2, seed, cfg, threads)
    d = tp - tm
    d = d[np.isfinite(d)]
    if d.size == 0:
        return np.nan, np.inf
    grad = float(np.mean(d)) / (2.0 * delta)
    se = float(np.std(d, ddof=1) / np.sqrt(d.size)) / (2.0 * delta) if d.size > 1 else np.inf
    return grad, se


def optimize_design(
    problem: DesignProblem,
    model,
    prior,
    estimator_kind="mc2la",
    seed=0,
    cfg: SolverConfig = None,
    threads=None,
):
    """Greedy minibatch stochastic-gradient coordinate ascent on the EIG.

    Returns (best design, trace). The trace records one row per accepted
    or attempted coordinate update with the CRN minibatch estimate at the
    current design.
    """
    threads = resolve_threads(threads)
    cfg = cfg or SolverConfig()
    xi = problem.initial_design.copy()
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    order = problem.coordinate_order or list(range(xi.shape[0]))
    trace = []

    def batch(x, s):
        return minibatch_terms(
            model, prior, x, estimator_kind, problem.minibatch_n,
            problem.m1_inner, problem.m2_inner, s, cfg, threads,
        )

    for sweep in range(1, problem.max_sweeps + 1):
        max_move = 0.0
        # one acceptance substream per sweep, so the current design's
        # minibatch value can be reused across coordinates
        accept_seed = derive_seed(seed, "design-accept", sweep)
        accept_cache = {}

        def eval_accept(x):
            key = x.tobytes()
            if key not in accept_cache:
                accept_cache[key] = _mean_stderr(batch(x, accept_seed))
            return accept_cache[key]

        for coord in order:
            probe_seed = derive_seed(seed, "design-grad", sweep * 10007 + coord)
            delta = problem.fd_step_design
            try:
                grad, gse = crn_gradient(
                    model, prior, xi, coord, delta, estimator_kind,
                    problem.minibatch_n, probe_seed, cfg,
                    problem.m1_inner, problem.m2_inner, threads,
                )
            except NestedEigError:
                grad = np.nan
            if not np.isfinite(grad):
                # halve the probe once, then freeze the coordinate this sweep
                try:
                    grad, gse = crn_gradient(
                        model, prior, xi, coord, delta / 2.0, estimator_kind,
                        problem.minibatch_n, probe_seed, cfg,
                        problem.m1_inner, problem.m2_inner, threads,
                    )
                except NestedEigError:
                    grad = np.nan
                if not np.isfinite(grad):
                    logger.warning("freezing design coordinate %d for sweep %d", coord, sweep)
                    continue
            step_len = problem.step_init[coord] / np.sqrt(sweep)
            direction = np.sign(grad) if grad != 0.0 else 0.0
            if direction == 0.0 or step_len == 0.0:
                continue
            cur_eig, cur_se = eval_accept(xi)
            moved = False
            for attempt in range(2):  # full step, then one halving
                cand = xi.copy()
                cand[coord] = np.clip(xi[coord] + direction * step_len, lo[coord], hi[coord])
                if cand[coord] == xi[coord]:
                    break
                cand_eig, cand_se = eval_accept(cand)
                if np.isfinite(cand_eig) and cand_eig >= cur_eig:
                    max_move = max(max_move, abs(cand[coord] - xi[coord]) / (hi[coord] - lo[coord]))
                    xi = cand
                    trace.append(TraceRow(sweep, coord, xi.copy(), cand_eig, cand_se))
                    moved = True
                    break
                step_len *= 0.5
            if not moved:
                trace.append(TraceRow(sweep, coord, xi.copy(), cur_eig, cur_se))
        if max_move < problem.move_tol:
            break
    return xi, trace


def sweep_design(model, prior, xi_grid, estimator_kind, n_outer, seed=0,
                 cfg: SolverConfig = None, m1=2, m2=2, threads=None):
    """Evaluate the estimator on a grid of designs.

    Returns a list of (xi, eig, stderr) rows; failed points carry nan.
    """
    threads = resolve_threads(threads)
    rows = []
    for idx, xi in enumerate(xi_grid):
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        point_seed = derive_seed(seed, "sweep", idx)
        try:
            terms = minibatch_terms(
                model, prior, xi, estimator_kind, n_outer, m1, m2, point_seed, cfg, threads
            )
            eig, se = _mean_stderr(terms)
        except NestedEigError as exc:
            logger.warning("sweep point %s failed: %s", xi, exc)
            eig, se = np.nan, np.nan
        rows.append((xi, eig, se))
    return rows
