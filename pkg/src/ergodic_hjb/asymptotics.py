"""Long-time experiments: long-run averages, the renormalized gap, closed-loop checks.

All local statements are made on a probe compact, by default the cube
``[-3, 3]^d``, since convergence is only locally uniform.
"""

from __future__ import annotations

import csv
import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core_model import ControlProblem, cost_depends_on_y
from .forward_sim import BLOWUP_RADIUS, simulate_closed_loop
from .grid import Grid
from .pde_solver import ErgodicPair, ValueField, solve_parabolic

logger = logging.getLogger(__name__)

PROBE_RADIUS = 3.0


@dataclass(frozen=True, eq=False)
class ConvergenceCurve:
    """Rows ``(T, value, aux)`` with an optional target constant.

    ``tail_deviation`` is ``|value[-1] - target|`` when a target is known and
    ``|value[-1] - value[-2]|`` otherwise.
    """

    T: np.ndarray
    value: np.ndarray
    aux: np.ndarray
    target: Optional[float] = None
    se: Optional[np.ndarray] = None
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = np.asarray(self.T, dtype=float)
        if T.size > 1 and np.any(np.diff(T) <= 0):
            raise ValueError("T must be strictly increasing")
        if not np.all(np.isfinite(self.value)):
            raise ValueError("curve values must be finite")

    @property
    def tail_deviation(self) -> float:
        if self.target is not None:
            return float(abs(self.value[-1] - self.target))
        if len(self.value) > 1:
            return float(abs(self.value[-1] - self.value[-2]))
        return float("nan")

    def rows(self) -> list:
        se = self.se if self.se is not None else np.full(len(self.T), np.nan)
        return list(zip(self.T, self.value, self.aux, se))


def kappa_warning(problem: ControlProblem) -> Optional[str]:
    """Warn when f depends on y but no strict-decay constant is given."""
    if cost_depends_on_y(problem) and problem.kappa is None:
        msg = f"{problem.name}: f depends on y but no strict-decay constant kappa is set; long-time results are diagnostic only"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return msg
    return None


def _probe_index(grid: Grid, radius: float) -> np.ndarray:
    return np.nonzero(np.all(np.abs(grid.points) <= radius + 1e-12, axis=1))[0]


def long_run_average(
    problem: ControlProblem,
    grid: Grid,
    T_list: Sequence[float],
    lambda_ref: Optional[float] = None,
    *,
    dt: float = 0.01,
    probe=None,
    mode: str = "implicit",
    data=None,
    tol: float = 0.05,
) -> ConvergenceCurve:
    """``v(T, probe) / T`` for each ``T`` in ``T_list`` from one parabolic march.

    ``meta`` holds the recorded fields, and ``within_tol`` when a reference
    value is supplied.
    """
    T_list = [float(t) for t in T_list]
    if any(b <= a for a, b in zip(T_list, T_list[1:])) or not T_list or T_list[0] <= 0:
        raise ValueError("T_list must be positive and strictly increasing")
    note = kappa_warning(problem)
    fields = solve_parabolic(problem, grid, T_list[-1], dt, T_list, mode=mode, data=data)
    probe = np.zeros(problem.dim_x) if probe is None else np.asarray(probe, dtype=float)
    vals = np.array([float(f.at(probe)[0]) for f in fields])
    T = np.array(T_list)
    meta = {"fields": fields, "probe": probe.tolist(), "dt": dt}
    if note:
        meta["warning"] = note
    curve = ConvergenceCurve(T=T, value=vals / T, aux=vals, target=lambda_ref, label="long_run_average", meta=meta)
    if lambda_ref is not None:
        meta["within_tol"] = bool(curve.tail_deviation <= tol)
    return curve


def renormalized_gap(
    problem: ControlProblem,
    grid: Grid,
    pair: ErgodicPair,
    T_list: Sequence[float],
    *,
    dt: float = 0.01,
    fields: Optional[Sequence[ValueField]] = None,
    data=None,
    probe_radius: float = PROBE_RADIUS,
) -> ConvergenceCurve:
    """``w(T, x) = v(T, x) - (lambda T + phi(x))`` on the probe compact.

    ``value`` is ``sup |w(T, x)| / (1 + |x|)`` and ``aux`` the oscillation
    ``max w - min w`` over the probe nodes. The oscillation is a diagnostic
    for convergence of ``w`` to a constant. ``meta["w_origin"]`` holds
    ``w(T, 0)``.
    """
    T_list = [float(t) for t in T_list]
    note = kappa_warning(problem)
    if fields is None:
        fields = solve_parabolic(problem, grid, T_list[-1], dt, T_list, data=data)
    if len(fields) != len(T_list):
        raise ValueError("one parabolic field per recorded T is required")
    idx = _probe_index(grid, probe_radius)
    pts = grid.points[idx]
    norm = 1.0 + np.linalg.norm(pts, axis=1)
    sup, osc, w0 = [], [], []
    phi = pair.phi.values
    for T, fld in zip(T_list, fields):
        w = fld.values - (pair.lam * T + phi)
        wp = w[idx]
        sup.append(float(np.max(np.abs(wp) / norm)))
        osc.append(float(wp.max() - wp.min()))
        w0.append(float(w[grid.anchor]))
    meta = {"w_origin": w0, "probe_radius": probe_radius, "diagnostic": True}
    if note:
        meta["warning"] = note
    return ConvergenceCurve(T=np.array(T_list), value=np.array(sup), aux=np.array(osc), label="renormalized_gap", meta=meta)


def verify_lambda_via_control(
    problem: ControlProblem,
    policy,
    T: float,
    dt: float,
    n_paths: int,
    seed: int = 0,
    *,
    x0=None,
    blowup_radius: float = BLOWUP_RADIUS,
) -> tuple:
    """Closed-loop long-run cost ``(1/T) E int_0^T f(X, a(X)) dt`` with its SE.

    ``policy`` maps states to control indices (for example a
    :class:`~ergodic_hjb.pde_solver.Policy`) or is a constant index.
    """
    if cost_depends_on_y(problem):
        raise ValueError("closed-loop verification needs a running cost independent of y")
    if not T > 0 or not dt > 0:
        raise ValueError("T and dt must be positive")
    x0 = np.zeros(problem.dim_x) if x0 is None else x0
    n_steps = int(round(T / dt))
    out = simulate_closed_loop(problem, policy, x0, dt, n_steps, n_paths, seed, running_cost=True, blowup_radius=blowup_radius)
    avg = out["cost_integral"] / (n_steps * dt)
    se = float(avg.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    return float(avg.mean()), se


def tauberian_consistency(estimates: dict, tol_factor: float = 0.05) -> dict:
    """Pairwise agreement of the lambda routes within ``tol_factor (1 + |lambda|)``.

    ``lambda`` in the scale is the mean of the route estimates.
    """
    names = sorted(estimates)
    lam = float(np.mean([estimates[k] for k in names]))
    tol = tol_factor * (1.0 + abs(lam))
    diffs = {f"{a}|{b}": abs(estimates[a] - estimates[b]) for a, b in itertools.combinations(names, 2)}
    worst = max(diffs.values(), default=0.0)
    return {"tolerance": tol, "pairwise": diffs, "max_difference": worst, "ok": bool(worst <= tol)}


def write_curve_csv(curve: ConvergenceCurve, path, *, fmt: str = "%.17g") -> None:
    """Columns: T, value, aux, SE (empty when unknown)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T", "value", "aux", "SE"])
        for T, v, a, s in curve.rows():
            w.writerow([fmt % T, fmt % v, fmt % a, "" if not np.isfinite(s) else fmt % s])
