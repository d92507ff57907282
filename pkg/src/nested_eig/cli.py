"""Command-line front end.

Subcommands: pilot, allocate, estimate, sweep, optimize, consistency.
Configuration is a single JSON document with a versioned ``schema`` field;
unknown fields are rejected. All numeric CSV output uses '.' decimals and
repr-round-trip formatting, so a (config, seed) pair reproduces files
byte for byte regardless of the thread count.

Exit codes: 0 success, 2 configuration error, 3 allocation infeasible,
4 estimation failure, 5 analytic oracle unavailable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .allocation import (
    Allocation,
    PilotConstants,
    allocate,
    allocate_with_discretization,
    estimate_constants_pilot,
    estimate_variance_pilot_mc2la,
)
from .builtin import build_model
from .design import DesignProblem, optimize_design, sweep_design
from .errors import (
    AllocationError,
    ConfigError,
    NestedEigError,
    OracleUnavailableError,
)
from .estimators import ESTIMATOR_KINDS, derive_seed, run_to_tolerance
from .laplace import SolverConfig

logger = logging.getLogger("nested_eig")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ALLOCATION = 3
EXIT_ESTIMATION = 4
EXIT_ORACLE = 5

SCHEMA_VERSION = 1


def _fmt(x):
    """Shortest round-trip decimal representation, locale independent."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_PILOT_KEYS = {"n_outer", "m1", "m2", "proposal"}
_SOLVER_KEYS = {"grad_tol", "max_iters", "n_multistarts", "k_hessian", "multistart_greedy"}
_OPTIMIZE_KEYS = {
    "bounds", "minibatch_n", "max_sweeps", "step_init", "fd_step", "move_tol",
    "m1", "m2",
}
_CONSISTENCY_KEYS = {"tols", "runs"}
_TOP_KEYS = {
    "schema", "model", "estimator", "design", "grid", "tol", "alpha",
    "pilot", "solver", "optimize", "consistency", "seed", "threads",
}


@dataclass
class RunConfig:
    """Parsed, validated run configuration; round-trips losslessly."""

    model_name: str
    model_params: dict = field(default_factory=dict)
    estimator: str = "dlmc2is"
    design: list = field(default_factory=list)
    grid: list = field(default_factory=list)
    tol: float = 0.1
    alpha: float = 0.05
    pilot: dict = field(default_factory=lambda: {
        "n_outer": 1000, "m1": 200, "m2": 200, "proposal": "laplace-is",
    })
    solver: dict = field(default_factory=dict)
    optimize: dict = field(default_factory=dict)
    consistency: dict = field(default_factory=lambda: {"tols": [0.5, 0.25, 0.1], "runs": 100})
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        if not isinstance(payload, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(payload) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown configuration fields: {sorted(unknown)}")
        if payload.get("schema") != SCHEMA_VERSION:
            raise ConfigError(
                f"config schema must be {SCHEMA_VERSION}, got {payload.get('schema')!r}"
            )
        model = payload.get("model")
        if not isinstance(model, dict) or "name" not in model:
            raise ConfigError("config requires model: {name: ..., params: {...}}")
        munknown = set(model) - {"name", "params"}
        if munknown:
            raise ConfigError(f"unknown model fields: {sorted(munknown)}")
        estimator = payload.get("estimator", "dlmc2is")
        if estimator not in ESTIMATOR_KINDS:
            raise ConfigError(f"estimator must be one of {ESTIMATOR_KINDS}, got {estimator!r}")
        for key, allowed in (
            ("pilot", _PILOT_KEYS),
            ("solver", _SOLVER_KEYS),
            ("optimize", _OPTIMIZE_KEYS),
            ("consistency", _CONSISTENCY_KEYS),
        ):
            section = payload.get(key, {})
            if not isinstance(section, dict):
                raise ConfigError(f"{key} section must be an object")
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown {key} fields: {sorted(bad)}")
        cfg = cls(
            model_name=model["name"],
            model_params=dict(model.get("params", {})),
            estimator=estimator,
            design=list(payload.get("design", [])),
            grid=[list(row) for row in payload.get("grid", [])],
            tol=float(payload.get("tol", 0.1)),
            alpha=float(payload.get("alpha", 0.05)),
            seed=int(payload.get("seed", 0)),
            threads=int(payload.get("threads", 1)),
        )
        if "pilot" in payload:
            cfg.pilot = {**cfg.pilot, **payload["pilot"]}
        if "solver" in payload:
            cfg.solver = dict(payload["solver"])
        if "optimize" in payload:
            cfg.optimize = dict(payload["optimize"])
        if "consistency" in payload:
            cfg.consistency = {**cfg.consistency, **payload["consistency"]}
        return cfg

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "model": {"name": self.model_name, "params": dict(self.model_params)},
            "estimator": self.estimator,
            "design": list(self.design),
            "grid": [list(r) for r in self.grid],
            "tol": self.tol,
            "alpha": self.alpha,
            "pilot": dict(self.pilot),
            "solver": dict(self.solver),
            "optimize": dict(self.optimize),
            "consistency": dict(self.consistency),
            "seed": self.seed,
            "threads": self.threads,
        }

    def solver_config(self) -> SolverConfig:
        return SolverConfig(**self.solver) if self.solver else SolverConfig()

    def build(self):
        return build_model(self.model_name, self.model_params)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(payload)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _resolve_threads(cfg, args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("NESTED_EIG_THREADS")
    if env is not None:
        return int(env)
    return cfg.threads


def _resolve_seed(cfg, args):
    return cfg.seed if args.seed is None else args.seed


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_pilot(cfg: RunConfig, args) -> int:
    model, prior, _ = cfg.build()
    seed = _resolve_seed(cfg, args)
    threads = _resolve_threads(cfg, args)
    xi = np.asarray(cfg.design, dtype=float)
    scfg = cfg.solver_config()
    if cfg.estimator == "mc2la":
        var = estimate_variance_pilot_mc2la(
            model, prior, xi, int(cfg.pilot["n_outer"]), seed=seed, cfg=scfg,
            threads=threads,
        )
        constants = PilotConstants(
            c1=0.0, c2=0.0, d3=var,
            n_outer_pilot=int(cfg.pilot["n_outer"]),
            meta={"estimator": "mc2la", "seed": int(seed), "xi": [float(v) for v in xi]},
        )
    else:
        constants = estimate_constants_pilot(
            model, prior, xi,
            int(cfg.pilot["n_outer"]), int(cfg.pilot["m1"]), int(cfg.pilot["m2"]),
            proposal=cfg.pilot.get("proposal", "laplace-is"),
            seed=seed, cfg=scfg, threads=threads,
        )
        constants.meta["estimator"] = cfg.estimator
    if model.weak_rate_eta is not None:
        constants.eta = float(model.weak_rate_eta)
    if model.work_exponent_gamma is not None:
        constants.gamma = float(model.work_exponent_gamma)
    text = constants.to_json() + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_allocate(args) -> int:
    with open(args.constants, "r", encoding="utf-8") as fh:
        constants = PilotConstants.from_json(fh.read())
    if constants.has_discretization():
        alloc = allocate_with_discretization(constants, args.tol, args.alpha)
    else:
        alloc = allocate(constants, args.tol, args.alpha)
    text = alloc.to_json() + "\n"
    sys.stdout.write(text)
    if args.out:
        _write(args.out, text)
    return EXIT_OK


ESTIMATE_HEADER = "estimator,{xi},tol,alpha,estimate,n_outer,m1,m2,work_units,degenerate,seed"


def _xi_header(d):
    return ",".join(f"xi{i}" for i in range(d))


def cmd_estimate(cfg: RunConfig, args) -> int:
    model, prior, _ = cfg.build()
    seed = _resolve_seed(cfg, args)
    threads = _resolve_threads(cfg, args)
    tol = cfg.tol if args.tol is None else args.tol
    alpha = cfg.alpha if args.alpha is None else args.alpha
    xi = np.asarray(cfg.design, dtype=float)
    with open(args.constants, "r", encoding="utf-8") as fh:
        constants = PilotConstants.from_json(fh.read())
    result = run_to_tolerance(
        cfg.estimator, model, prior, xi, tol, alpha, constants, seed,
        cfg=cfg.solver_config(), threads=threads,
    )
    header = ESTIMATE_HEADER.format(xi=_xi_header(xi.shape[0]))
    row = ",".join(
        [cfg.estimator]
        + [_fmt(v) for v in xi]
        + [_fmt(tol), _fmt(alpha), _fmt(result.estimate), _fmt(result.n_outer),
           _fmt(result.m1_inner), _fmt(result.m2_inner), _fmt(result.work_units),
           _fmt(result.degenerate_inner_count), _fmt(seed)]
    )
    out = header + "\n" + row + "\n"
    if args.out:
        if os.path.exists(args.out):
            with open(args.out, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(row + "\n")
        else:
            _write(args.out, out)
    else:
        sys.stdout.write(out)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    model, prior, _ = cfg.build()
    seed = _resolve_seed(cfg, args)
    threads = _resolve_threads(cfg, args)
    if not cfg.grid:
        raise ConfigError("sweep requires a non-empty grid")
    n_outer = int(cfg.pilot["n_outer"])
    rows = sweep_design(
        model, prior, cfg.grid, cfg.estimator, n_outer, seed=seed,
        cfg=cfg.solver_config(), m1=int(cfg.pilot["m1"]), m2=int(cfg.pilot["m2"]),
        threads=threads,
    )
    d = len(cfg.grid[0])
    lines = [_xi_header(d) + ",eig,stderr"]
    for xi, eig, se in rows:
        lines.append(",".join([_fmt(v) for v in xi] + [_fmt(eig), _fmt(se)]))
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_optimize(cfg: RunConfig, args) -> int:
    model, prior, _ = cfg.build()
    seed = _resolve_seed(cfg, args)
    threads = _resolve_threads(cfg, args)
    opt = cfg.optimize
    if "bounds" not in opt:
        raise ConfigError("optimize requires bounds in the optimize section")
    problem = DesignProblem(
        bounds=np.asarray(opt["bounds"], dtype=float),
        initial_design=np.asarray(cfg.design, dtype=float),
        minibatch_n=int(opt.get("minibatch_n", 300)),
        max_sweeps=int(opt.get("max_sweeps", 8)),
        step_init=opt.get("step_init"),
        move_tol=float(opt.get("move_tol", 1e-3)),
        fd_step_design=float(opt.get("fd_step", 1e-2)),
        m1_inner=int(opt.get("m1", 2)),
        m2_inner=int(opt.get("m2", 2)),
    )
    xi_star, trace = optimize_design(
        problem, model, prior, estimator_kind=cfg.estimator, seed=seed,
        cfg=cfg.solver_config(), threads=threads,
    )
    d = xi_star.shape[0]
    lines = ["sweep,coordinate," + _xi_header(d) + ",eig,stderr"]
    for row in trace:
        lines.append(
            ",".join(
                [str(row.sweep), str(row.coordinate)]
                + [_fmt(v) for v in row.design]
                + [_fmt(row.eig), _fmt(row.stderr)]
            )
        )
    lines.append("final,," + ",".join(_fmt(v) for v in xi_star) + ",,")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_consistency(cfg: RunConfig, args) -> int:
    model, prior, oracle = cfg.build()
    if oracle is None:
        raise OracleUnavailableError(
            f"model {cfg.model_name!r} has no analytic information-gain oracle"
        )
    seed = _resolve_seed(cfg, args)
    threads = _resolve_threads(cfg, args)
    xi = np.asarray(cfg.design, dtype=float)
    scfg = cfg.solver_config()
    tols = [float(t) for t in cfg.consistency["tols"]]
    runs = int(cfg.consistency["runs"])
    truth = float(oracle(xi if xi.shape[0] > 1 else xi[0]))
    lines = ["tol,runs,exceedances,expected,kappa,n_outer,m1,m2"]
    for t_idx, tol in enumerate(tols):
        exceed = 0
        alloc = None
        for r in range(runs):
            run_seed = derive_seed(seed, f"consistency-{t_idx}", r)
            res = run_to_tolerance(
                cfg.estimator, model, prior, xi, tol, cfg.alpha,
                _consistency_constants(cfg, model, prior, xi, seed, scfg, threads),
                run_seed, cfg=scfg, threads=threads,
            )
            alloc = res.allocation
            if abs(res.estimate - truth) > tol:
                exceed += 1
        lines.append(
            ",".join(
                [_fmt(tol), str(runs), str(exceed), _fmt(runs * cfg.alpha)]
                + ([_fmt(alloc.kappa), str(alloc.n_outer), str(alloc.m1_inner),
                    str(alloc.m2_inner)] if alloc else ["", "", "", ""])
            )
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


_PILOT_CACHE = {}


def _consistency_constants(cfg, model, prior, xi, seed, scfg, threads):
    """One pilot per (config, seed), shared across tolerances and runs."""
    key = (cfg.model_name, cfg.estimator, tuple(np.atleast_1d(xi)), seed)
    if key not in _PILOT_CACHE:
        if cfg.estimator == "mc2la":
            var = estimate_variance_pilot_mc2la(
                model, prior, xi, int(cfg.pilot["n_outer"]), seed=seed, cfg=scfg,
                threads=threads,
            )
            _PILOT_CACHE[key] = PilotConstants(c1=0.0, c2=0.0, d3=var)
        else:
            _PILOT_CACHE[key] = estimate_constants_pilot(
                model, prior, xi,
                int(cfg.pilot["n_outer"]), int(cfg.pilot["m1"]), int(cfg.pilot["m2"]),
                proposal=cfg.pilot.get("proposal", "laplace-is"),
                seed=seed, cfg=scfg, threads=threads,
            )
    return _PILOT_CACHE[key]


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="nested-eig",
        description="Expected-information-gain estimation and design under nuisance uncertainty",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("pilot", "allocate", "estimate", "sweep", "optimize", "consistency"):
        p = sub.add_parser(name)
        if name != "allocate":
            p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (NESTED_EIG_THREADS as fallback)")
        p.add_argument("--out", default=None, help="output path (stdout if omitted)")
        p.add_argument("--tol", type=float, default=None)
        p.add_argument("--alpha", type=float, default=0.05)
        if name in ("estimate", "allocate"):
            p.add_argument("--constants", required=True, help="pilot constants JSON file")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "allocate":
            if args.tol is None:
                raise ConfigError("allocate requires --tol")
            return cmd_allocate(args)
        cfg = load_config(args.config)
        if args.command == "pilot":
            return cmd_pilot(cfg, args)
        if args.command == "estimate":
            return cmd_estimate(cfg, args)
        if args.command == "sweep":
            return cmd_sweep(cfg, args)
        if args.command == "optimize":
            return cmd_optimize(cfg, args)
        if args.command == "consistency":
            return cmd_consistency(cfg, args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except AllocationError as exc:
        logger.error("allocation infeasible: %s", exc)
        return EXIT_ALLOCATION
    except OracleUnavailableError as exc:
        logger.error("%s", exc)
        return EXIT_ORACLE
    except NestedEigError as exc:
        logger.error("estimation failed: %s", exc)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
