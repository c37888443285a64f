"""Command-line entry point: validated configs, staged experiments, run artifacts.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 an asserted tolerance failed.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import pathlib
import sys
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from . import artifacts as art
from .asymptotics import long_run_average, renormalized_gap, tauberian_consistency, verify_lambda_via_control
from .bsde_solver import RegressionBasis, RegressionError, jump_constraint_gap, penalization_sweep, truncation_horizon
from .builtins import BUILTINS, list_builtins, problem_from_spec
from .core_model import ControlProblem, cost_depends_on_y, validate_problem
from .forward_sim import BlowUpError, estimate_contraction, estimate_invariant_measure, estimate_second_moment, simulate_paths
from .grid import BOUNDARY_POLICIES, Grid, MonotonicityError
from .pde_solver import DEFAULT_BETA_SCHEDULE, ConvergenceError, extract_feedback, solve_discounted, solve_ergodic_vanishing_discount

logger = logging.getLogger("ergodic_hjb")

STAGES = ("validate", "simulate", "pde", "bsde", "asymptotics")
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_TOLERANCE = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# --- field converters --------------------------------------------------------


def _num(path, v, *, positive=False, nonneg=False, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, f"expected a number, got {v!r}")
    if integer and float(v) != int(v):
        raise ConfigError(path, f"expected an integer, got {v!r}")
    v = int(v) if integer else float(v)
    if positive and not v > 0:
        raise ConfigError(path, "must be positive")
    if nonneg and v < 0:
        raise ConfigError(path, "must be nonnegative")
    return v


def _pos(path, v):
    return _num(path, v, positive=True)


def _nonneg(path, v):
    return _num(path, v, nonneg=True)


def _pos_int(path, v):
    return _num(path, v, positive=True, integer=True)


def _int(path, v):
    return _num(path, v, integer=True)


def _vec(path, v):
    v = [v] if isinstance(v, (int, float)) and not isinstance(v, bool) else v
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(path, "expected a nonempty list of numbers")
    return [_num(f"{path}[{i}]", x) for i, x in enumerate(v)]


def _pos_list(path, v):
    out = _vec(path, v)
    for i, x in enumerate(out):
        if not x > 0:
            raise ConfigError(f"{path}[{i}]", "must be positive")
    return out


def _nonneg_list(path, v):
    out = _vec(path, v)
    for i, x in enumerate(out):
        if x < 0:
            raise ConfigError(f"{path}[{i}]", "must be nonnegative")
    return out


def _opt_vec(path, v):
    return None if v is None else _vec(path, v)


def _opt_pos(path, v):
    return None if v is None else _pos(path, v)


def _str(path, v):
    if not isinstance(v, str):
        raise ConfigError(path, f"expected a string, got {v!r}")
    return v


def _bool(path, v):
    if not isinstance(v, bool):
        raise ConfigError(path, f"expected true/false, got {v!r}")
    return v


def _bounds(path, v):
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(path, "expected a list of [lo, hi] pairs")
    if all(isinstance(x, (int, float)) for x in v):
        v = [v]
    out = []
    for i, pair in enumerate(v):
        pair = _vec(f"{path}[{i}]", pair)
        if len(pair) != 2 or not pair[1] > pair[0]:
            raise ConfigError(f"{path}[{i}]", "expected an ordered pair [lo, hi]")
        out.append(pair)
    return out


def _c(conv, default=dataclasses.MISSING, **kw):
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda d=default: copy.deepcopy(d), metadata={"conv": conv}, **kw)
    return field(default=default, metadata={"conv": conv}, **kw)


@dataclass
class GridConfig:
    bounds: list = _c(_bounds)
    h: float = _c(_pos)
    boundary: str = _c(_str, "one-sided-extrapolation")


@dataclass
class PdeConfig:
    beta_schedule: list = _c(_pos_list, list(DEFAULT_BETA_SCHEDULE))
    tol: float = _c(_pos, 1e-8)
    phi_mode: str = _c(_str, "extrapolate")


@dataclass
class ContractionConfig:
    x: list = _c(_vec, [1.0])
    x_prime: list = _c(_vec, [0.0])
    dt: float = _c(_pos, 1e-3)
    ts: list = _c(_nonneg_list, [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0])
    n_paths: int = _c(_pos_int, 2000)


@dataclass
class InvariantConfig:
    feedback: int = _c(_int, 0)
    burn_in: float = _c(_pos, 5.0)
    n_samples: int = _c(_pos_int, 20000)
    dt: float = _c(_pos, 0.01)
    thinning: int = _c(_pos_int, 100)
    n_chains: int = _c(_pos_int, 1000)


@dataclass
class SimulateConfig:
    x0: list = _c(_vec, [0.0])
    a0: Optional[list] = _c(_opt_vec, None)
    dt: float = _c(_pos, 0.01)
    T: float = _c(_pos, 10.0)
    n_paths: int = _c(_pos_int, 2000)
    contraction: ContractionConfig = field(default_factory=ContractionConfig)
    invariant: InvariantConfig = field(default_factory=InvariantConfig)


@dataclass
class BsdeConfig:
    x0: list = _c(_vec, [0.0])
    a0: Optional[list] = _c(_opt_vec, None)
    beta: float = _c(_pos, 0.5)
    n_list: list = _c(_nonneg_list, [0.0, 2.0, 10.0, 50.0])
    dt: float = _c(_pos, 0.02)
    target_tail: float = _c(_pos, 1e-3)
    T_trunc: Optional[float] = _c(_opt_pos, None)
    n_paths: int = _c(_pos_int, 10000)
    degree: int = _c(_pos_int, 3)
    family: str = _c(_str, "tensor-polynomial-times-regime-indicator")
    pde_h: Optional[float] = _c(_opt_pos, None)


@dataclass
class AsymptoticsConfig:
    T_list: list = _c(_pos_list, [10.0, 20.0, 50.0])
    dt: float = _c(_pos, 0.01)
    closed_loop_T: float = _c(_pos, 100.0)
    closed_loop_dt: float = _c(_pos, 0.01)
    closed_loop_paths: int = _c(_pos_int, 1000)
    probe_radius: float = _c(_pos, 3.0)


@dataclass
class Tolerances:
    """Asserted tolerances; a failed one makes the run exit with code 4."""

    lambda_routes: float = _c(_pos, 0.05)
    closed_loop: float = _c(_pos, 0.05)
    ergodic_residual: float = _c(_pos, 0.05)
    lipschitz_factor: float = _c(_pos, 1.1)
    lipschitz_h_mult: float = _c(_nonneg, 10.0)
    contraction_se: float = _c(_nonneg, 3.0)
    bsde_monotone_se: float = _c(_nonneg, 2.0)
    constant_policy_se: float = _c(_nonneg, 3.0)
    bsde_vs_discounted: Optional[float] = _c(_opt_pos, None)
    require_assumptions: bool = _c(_bool, True)


@dataclass
class RunConfig:
    problem: dict
    seed: int
    grid: GridConfig
    out_dir: str = "runs/latest"
    experiments: list = field(default_factory=lambda: list(STAGES))
    workers: int = 1
    pde: PdeConfig = field(default_factory=PdeConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    bsde: BsdeConfig = field(default_factory=BsdeConfig)
    asymptotics: AsymptoticsConfig = field(default_factory=AsymptoticsConfig)
    tolerances: Tolerances = field(default_factory=Tolerances)


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown key")
    kwargs = {}
    for name, f in names.items():
        sub = f"{path}.{name}"
        if name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(sub, "required")
            continue
        value = data[name]
        if dataclasses.is_dataclass(f.default_factory) if f.default_factory is not dataclasses.MISSING else False:
            kwargs[name] = _build(f.default_factory, value, sub)
        else:
            kwargs[name] = f.metadata["conv"](sub, value)
    return cls(**kwargs)


def parse_config(raw: dict) -> RunConfig:
    """Validate a config mapping; raises :class:`ConfigError` naming the field."""
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    if "seed" not in raw or raw["seed"] is None:
        raise ConfigError("seed", "required")
    seed = _int("seed", raw["seed"])
    if "problem" not in raw or not isinstance(raw["problem"], dict):
        raise ConfigError("problem", "required mapping (builtin name or family plus parameters)")
    problem = dict(raw["problem"])
    if "builtin" in problem and problem["builtin"] not in BUILTINS:
        raise ConfigError("problem.builtin", f"unknown builtin {problem['builtin']!r}")
    if "grid" not in raw:
        raise ConfigError("grid", "required")
    grid = _build(GridConfig, raw["grid"], "grid")
    if grid.boundary not in BOUNDARY_POLICIES:
        raise ConfigError("grid.boundary", f"expected one of {list(BOUNDARY_POLICIES)}")
    experiments = raw.get("experiments", list(STAGES))
    if isinstance(experiments, str):
        experiments = [s.strip() for s in experiments.split(",") if s.strip()]
    if not isinstance(experiments, list) or not experiments:
        raise ConfigError("experiments", "expected a nonempty list")
    for e in experiments:
        if e not in STAGES:
            raise ConfigError("experiments", f"unknown stage {e!r}; expected a subset of {list(STAGES)}")
    cfg = RunConfig(
        problem=problem,
        seed=seed,
        grid=grid,
        out_dir=_str("out_dir", raw.get("out_dir", "runs/latest")),
        experiments=[s for s in STAGES if s in experiments],
        workers=_pos_int("workers", raw.get("workers", 1)),
        pde=_build(PdeConfig, raw.get("pde"), "pde"),
        simulate=_build(SimulateConfig, raw.get("simulate"), "simulate"),
        bsde=_build(BsdeConfig, raw.get("bsde"), "bsde"),
        asymptotics=_build(AsymptoticsConfig, raw.get("asymptotics"), "asymptotics"),
        tolerances=_build(Tolerances, raw.get("tolerances"), "tolerances"),
    )
    sched = cfg.pde.beta_schedule
    if len(sched) < 3 or any(b >= a for a, b in zip(sched, sched[1:])):
        raise ConfigError("pde.beta_schedule", "must be strictly decreasing with at least 3 entries")
    if any(b <= a for a, b in zip(cfg.bsde.n_list, cfg.bsde.n_list[1:])):
        raise ConfigError("bsde.n_list", "must be strictly increasing")
    if cfg.pde.phi_mode not in ("extrapolate", "smallest"):
        raise ConfigError("pde.phi_mode", "expected 'extrapolate' or 'smallest'")
    return cfg


def build_problem(cfg: RunConfig) -> ControlProblem:
    try:
        return problem_from_spec(cfg.problem)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError("problem", str(exc)) from exc


def builtin_config(name: str) -> dict:
    """Default run configuration for a builtin instance."""
    if name not in BUILTINS:
        raise ConfigError("config", f"no such file or builtin: {name!r}")
    controls = BUILTINS[name].params["controls"]
    a0 = [float(controls[-1])]
    return {
        "problem": {"builtin": name},
        "seed": 20240601,
        "out_dir": f"runs/{name}",
        "experiments": list(STAGES),
        "grid": {"bounds": [[-6.0, 6.0]], "h": 0.01},
        "pde": {"beta_schedule": list(DEFAULT_BETA_SCHEDULE)},
        "simulate": {"x0": [0.0], "a0": a0, "dt": 0.01, "T": 10.0, "n_paths": 2000},
        "bsde": {"x0": [0.0], "a0": a0, "beta": 0.5, "n_list": [0.0, 2.0, 10.0, 50.0], "dt": 0.02, "n_paths": 10000},
        "asymptotics": {"T_list": [10.0, 20.0, 50.0], "dt": 0.01},
    }


def load_config(spec: str) -> dict:
    """Read a YAML/JSON config file, or return the defaults for a builtin name."""
    path = pathlib.Path(spec)
    if not path.exists():
        return builtin_config(spec)
    try:
        text = path.read_text()
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (OSError, ValueError, yaml.YAMLError) as exc:
        raise ConfigError("config", f"cannot parse {spec}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    return raw


# --- pipeline ----------------------------------------------------------------


@dataclass
class _Context:
    cfg: RunConfig
    problem: ControlProblem
    grid: Grid
    out: pathlib.Path
    meta: dict
    files: list = field(default_factory=list)
    pair: object = None
    pde_lambda: Optional[float] = None

    def csv(self, rel, header, rows, meta=None):
        p = art.write_table(self.out / rel, header, rows)
        s = art.write_sidecar(p, {**self.meta, **(meta or {})})
        self.files += [p, s]

    def field(self, rel, fld, meta=None):
        self.files += art.write_field(self.out / rel, fld, {**self.meta, **(meta or {})})

    def ergodic_pair(self):
        if self.pair is None:
            self.pair = solve_ergodic_vanishing_discount(
                self.problem, self.grid, self.cfg.pde.beta_schedule, tol=self.cfg.pde.tol, phi_mode=self.cfg.pde.phi_mode
            )
        return self.pair


def _check(value, limit, passed, asserted=True):
    return {"value": value, "limit": limit, "passed": bool(passed), "asserted": asserted}


def _a0(problem: ControlProblem, a0):
    return problem.controls[0].tolist() if a0 is None else a0


def _stage_validate(ctx: _Context) -> dict:
    rep = validate_problem(ctx.problem)
    checks = {
        f"assumption.{k}": _check(rep.margins[k], 0.0, ok, ctx.cfg.tolerances.require_assumptions) for k, ok in rep.passed.items()
    }
    return {"numbers": {"n_samples": rep.n_samples, "worst_dissipativity_quotient": rep.worst_dissipativity_quotient}, "checks": checks}


def _stage_simulate(ctx: _Context) -> dict:
    c, p, tol = ctx.cfg.simulate, ctx.problem, ctx.cfg.tolerances
    seed = ctx.cfg.seed
    ens = simulate_paths(p, c.x0, _a0(p, c.a0), c.dt, c.T, c.n_paths, seed=seed, workers=ctx.cfg.workers)
    times = ens.time_grid[:: max(1, int(round(1.0 / c.dt)))]
    moments = [(t, *estimate_second_moment(ens, t)) for t in times]
    ctx.csv("curves/second_moment.csv", ["t", "second_moment", "SE"], moments, {"x0": c.x0, "dt": c.dt})
    cc = c.contraction
    est = estimate_contraction(p, cc.x, cc.x_prime, _a0(p, c.a0), cc.dt, cc.ts, cc.n_paths, seed=seed + 1)
    d2 = float(np.sum((np.asarray(cc.x) - np.asarray(cc.x_prime)) ** 2))
    rows, ok = [], True
    for t, m, se in est:
        bound = d2 * np.exp(-2 * p.gamma * t)
        rel = se / m if m > 0 else 0.0
        ok &= m <= bound * (1 + tol.contraction_se * rel) + 1e-12 * d2
        rows.append((t, m, se, bound))
    ctx.csv("curves/contraction.csv", ["t", "coupled_second_moment", "SE", "bound"], rows, {"dt": cc.dt, "n_paths": cc.n_paths})
    ic = c.invariant
    meas = estimate_invariant_measure(p, ic.feedback, ic.burn_in, ic.n_samples, ic.dt, ic.thinning, seed=seed + 2, n_chains=ic.n_chains)
    numbers = {
        "second_moment_T": moments[-1][1],
        "second_moment_T_se": moments[-1][2],
        "invariant_mean": meas.mean.tolist(),
        "invariant_mean_se": None if meas.mean_se is None else meas.mean_se.tolist(),
        "invariant_covariance": meas.covariance.tolist(),
        "mean_jump_count": float(ens.jump_counts().mean()),
    }
    return {"numbers": numbers, "checks": {"contraction_bound": _check(max(r[1] - r[3] for r in rows), 0.0, ok)}}


def _stage_pde(ctx: _Context) -> dict:
    p, tol = ctx.problem, ctx.cfg.tolerances
    pair = ctx.ergodic_pair()
    ctx.pde_lambda = pair.lam
    ctx.field("fields/phi.csv", pair.phi, {"lambda": pair.lam, "ergodic_residual": pair.residual})
    pol = extract_feedback(p, ctx.grid, pair)
    ctx.csv("fields/policy.csv", [f"x_{i + 1}" for i in range(ctx.grid.dim)] + ["control_index"], (list(x) + [int(k)] for x, k in zip(ctx.grid.points, pol.indices)))
    ctx.csv("curves/lambda_beta.csv", ["beta", "lambda_beta"], zip(pair.beta_schedule, pair.lambda_betas))
    lips = [(f.params["beta"], f.lipschitz_constant(), f.meta["growth_C"]) for f in pair.discounted]
    ctx.csv("curves/discounted_lipschitz.csv", ["beta", "lipschitz", "growth_C"], lips)
    lip_limit = tol.lipschitz_factor * p.lip_f / p.gamma + tol.lipschitz_h_mult * ctx.grid.h
    worst_lip = max(l for _, l, _ in lips)
    return {
        "numbers": {"lambda": pair.lam, "ergodic_residual": pair.residual, "lambda_betas": list(pair.lambda_betas), "warnings": pair.warnings},
        "checks": {
            "ergodic_residual": _check(pair.residual, tol.ergodic_residual, pair.residual <= tol.ergodic_residual),
            "lipschitz_bound": _check(worst_lip, lip_limit, worst_lip <= lip_limit),
        },
    }


def _stage_bsde(ctx: _Context) -> dict:
    c, p, tol = ctx.cfg.bsde, ctx.problem, ctx.cfg.tolerances
    basis = RegressionBasis(family=c.family, degree=c.degree)
    T_trunc = c.T_trunc or truncation_horizon(c.beta, c.target_tail)
    rows, sols = penalization_sweep(
        p, c.x0, _a0(p, c.a0), c.beta, c.n_list, T_trunc, c.dt, c.n_paths, basis, seed=ctx.cfg.seed + 3,
        target_tail=c.target_tail, workers=ctx.cfg.workers, return_solutions=True,
    )
    gaps = [jump_constraint_gap(s) for s in sols]
    ctx.csv("curves/penalization.csv", ["n", "Y0", "SE", "jump_constraint_gap"], [(n, y, se, g) for (n, y, se), g in zip(rows, gaps)], {"beta": c.beta, "T_trunc": T_trunc, "dt": c.dt})
    last = sols[-1]
    ctx.csv(
        "curves/bsde_diagnostics.csv",
        ["t", "y_mean", "penalty_accumulator", "gap_density"],
        zip(last.time_grid, last.y_mean, last.penalty_accumulator, last.gap_density),
        {"n": c.n_list[-1]},
    )
    worst = 0.0
    for (_, y1, s1), (_, y2, s2) in zip(rows, rows[1:]):
        worst = max(worst, (y1 - y2) - tol.bsde_monotone_se * float(np.hypot(s1, s2)))
    grid = ctx.grid if c.pde_h is None else Grid(ctx.grid.bounds, c.pde_h, ctx.grid.boundary)
    v_ref = float(solve_discounted(p, grid, c.beta).at(np.asarray(c.x0))[0])
    rel = abs(rows[-1][1] - v_ref) / max(abs(v_ref), 1e-12)
    checks = {"monotone_in_n": _check(worst, 0.0, worst <= 0.0)}
    if tol.bsde_vs_discounted is not None:
        checks["bsde_vs_discounted"] = _check(rel, tol.bsde_vs_discounted, rel <= tol.bsde_vs_discounted)
    numbers = {
        "Y0": [r[1] for r in rows],
        "Y0_se": [r[2] for r in rows],
        "n_list": list(c.n_list),
        "jump_constraint_gap": gaps,
        "discounted_pde_value": v_ref,
        "relative_gap_to_discounted": rel,
        "max_condition_number": max(s.diagnostics["max_condition_number"] for s in sols),
    }
    return {"numbers": numbers, "checks": checks}


def _stage_asymptotics(ctx: _Context) -> dict:
    c, p, tol = ctx.cfg.asymptotics, ctx.problem, ctx.cfg.tolerances
    pair = ctx.ergodic_pair()
    lam = pair.lam
    curve = long_run_average(p, ctx.grid, c.T_list, lam, dt=c.dt)
    ctx.csv("curves/long_run_average.csv", ["T", "value", "aux", "SE"], curve.rows(), {"lambda_ref": lam})
    gap = renormalized_gap(p, ctx.grid, pair, c.T_list, fields=curve.meta["fields"], probe_radius=c.probe_radius)
    ctx.csv("curves/renormalized_gap.csv", ["T", "value", "aux", "SE"], gap.rows(), {"value": "sup|w|/(1+|x|)", "aux": "oscillation", "diagnostic": True})
    routes = {"vanishing_discount": lam, "long_run": float(curve.value[-1])}
    checks = {}
    numbers = {"lambda_vanishing_discount": lam, "lambda_long_run": routes["long_run"], "w_sup": list(gap.value), "w_oscillation": list(gap.aux)}
    if not cost_depends_on_y(p):
        pol = extract_feedback(p, ctx.grid, pair)
        avg, se = verify_lambda_via_control(p, pol, c.closed_loop_T, c.closed_loop_dt, c.closed_loop_paths, seed=ctx.cfg.seed + 4)
        routes["closed_loop"] = avg
        numbers.update(lambda_closed_loop=avg, lambda_closed_loop_se=se)
        lim = tol.closed_loop * (1 + abs(lam))
        checks["closed_loop"] = _check(abs(avg - lam), lim, abs(avg - lam) <= lim)
        const = []
        for k in range(p.n_controls):
            if p.n_controls > 1:
                a_k, s_k = verify_lambda_via_control(p, k, c.closed_loop_T, c.closed_loop_dt, c.closed_loop_paths, seed=ctx.cfg.seed + 5)
                const.append((k, a_k, s_k))
        if const:
            ctx.csv("curves/constant_policies.csv", ["control_index", "average", "SE"], const)
            worst = max(a_k - (lam + tol.constant_policy_se * s_k) for _, a_k, s_k in const)
            checks["constant_policies_suboptimal"] = _check(worst, 0.0, worst <= 0.0)
    taub = tauberian_consistency(routes, tol.lambda_routes)
    checks["lambda_routes"] = _check(taub["max_difference"], taub["tolerance"], taub["ok"])
    numbers["lambda_routes"] = routes
    return {"numbers": numbers, "checks": checks}


_STAGE_FNS = {"validate": _stage_validate, "simulate": _stage_simulate, "pde": _stage_pde, "bsde": _stage_bsde, "asymptotics": _stage_asymptotics}
_SOLVER_ERRORS = (ConvergenceError, MonotonicityError, BlowUpError, RegressionError, FloatingPointError, np.linalg.LinAlgError, RuntimeError)


def run_experiment(raw: dict, out_dir: Optional[str] = None, seed: Optional[int] = None, *, workers: Optional[int] = None, experiments=None) -> tuple:
    """Run the configured stages and write artifacts.

    Returns:
        ``(report, exit_code)``.
    """
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seed"] = seed
    if out_dir is not None:
        raw["out_dir"] = out_dir
    if workers is not None:
        raw["workers"] = workers
    if experiments is not None:
        raw["experiments"] = experiments
    cfg = parse_config(raw)
    problem = build_problem(cfg)
    try:
        grid = Grid(cfg.grid.bounds, cfg.grid.h, cfg.grid.boundary)
    except ValueError as exc:
        raise ConfigError("grid", str(exc)) from exc
    if grid.dim != problem.dim_x:
        raise ConfigError("grid.bounds", f"grid has {grid.dim} dimensions, problem has {problem.dim_x}")
    hashed = {k: v for k, v in raw.items() if k not in ("out_dir", "workers")}
    chash = art.config_hash(hashed)
    out = pathlib.Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg, problem, grid, out, {"config_hash": chash, "seed": cfg.seed, "problem": problem.name})
    report = {"config_hash": chash, "seed": cfg.seed, "problem": problem.name, "experiments": {}, "headline": {}}
    exit_code = EXIT_OK
    for stage in cfg.experiments:
        t0 = time.perf_counter()
        logger.info("stage %s", stage)
        try:
            res = _STAGE_FNS[stage](ctx)
        except _SOLVER_ERRORS as exc:
            report["experiments"][stage] = {"status": "solver_failure", "error": f"{type(exc).__name__}: {exc}", "wall_clock_s": time.perf_counter() - t0}
            exit_code = EXIT_SOLVER
            break
        except ValueError as exc:
            # solver preconditions violated by configured values
            raise ConfigError(stage, str(exc)) from exc
        failed = [k for k, ch in res["checks"].items() if ch["asserted"] and not ch["passed"]]
        res["status"] = "tolerance_failure" if failed else "ok"
        res["failed_checks"] = failed
        res["wall_clock_s"] = time.perf_counter() - t0
        report["experiments"][stage] = res
        if failed and exit_code == EXIT_OK:
            exit_code = EXIT_TOLERANCE
    for stage, key in (("pde", "lambda"), ("asymptotics", "lambda_long_run"), ("asymptotics", "lambda_closed_loop"), ("pde", "ergodic_residual")):
        val = report["experiments"].get(stage, {}).get("numbers", {}).get(key)
        if val is not None:
            report["headline"][f"{stage}.{key}"] = val
    report["exit_code"] = exit_code
    report["artifacts"] = sorted(str(p.relative_to(out)) for p in ctx.files) + ["run_report.json", "run_report.txt"]
    art.write_json(out / "run_report.json", report)
    art.write_key_values(out / "run_report.txt", {k: v for k, v in report.items() if k != "artifacts"})
    return report, exit_code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="ergodic-hjb", description="Solver laboratory for ergodic HJB equations.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the configured experiments")
    run.add_argument("--config", required=True, help="YAML/JSON config file, or a builtin instance name")
    run.add_argument("--out", help="output directory (overrides out_dir)")
    run.add_argument("--seed", type=int, help="seed override")
    run.add_argument("--workers", type=int, default=None, help="worker count (default: available CPUs)")
    run.add_argument("--experiments", help="comma-separated subset of " + ",".join(STAGES))
    sub.add_parser("list", help="print the builtin problem catalog")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "list":
        print(list_builtins())
        return EXIT_OK
    try:
        raw = load_config(args.config)
        report, code = run_experiment(
            raw, out_dir=args.out, seed=args.seed, workers=args.workers or os.cpu_count() or 1, experiments=args.experiments
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for stage, res in report["experiments"].items():
        print(f"{stage}: {res['status']}" + (f" ({', '.join(res.get('failed_checks', []))})" if res.get("failed_checks") else ""))
    for k, v in report["headline"].items():
        print(f"{k} = {art.fmt(v)}")
    return code


if __name__ == "__main__":
    sys.exit(main())
