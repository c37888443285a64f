"""Regression Monte Carlo for penalized BSDEs driven by the regime-switching system.

The backward scheme is the multistep (path-wise) variant of least-squares
Monte Carlo: along every path the driver is accumulated from the terminal
time down to ``t``, and the regression surface at ``t`` is only used to
evaluate the driver one step earlier. With ``Yhat_{t+dt}`` the surface from
the previous backward step,

    Ypath_t = (1 - beta dt) Ypath_{t+dt}
              + dt [f(X_t, I_t, y(Yhat_{t+dt})) + n sum_a' theta_a' (U_t(a'))_+],

where ``U_t(a') = Yhat_{t+dt}(X_t, a') - Yhat_{t+dt}(X_t, I_t)``. The jump
component is read off the regression surface across regimes rather than
regressed against jump increments, since jumps are rare per step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional, Sequence

import numpy as np

from .core_model import ControlProblem
from .forward_sim import PathEnsemble, TiltSpec, simulate_paths

logger = logging.getLogger(__name__)

BASIS_FAMILIES = ("tensor-polynomial-times-regime-indicator", "polynomial")
PATHS_PER_BASIS = 50


class RegressionError(np.linalg.LinAlgError):
    """The regression design matrix is too ill-conditioned to trust."""


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial regression basis.

    ``tensor-polynomial-times-regime-indicator`` fits one total-degree
    polynomial in x per regime; ``polynomial`` fits a single total-degree
    polynomial in the joint variable (x, a). States are clipped to
    ``clip_radius`` and standardized per time step before evaluation.
    """

    family: str = "tensor-polynomial-times-regime-indicator"
    degree: int = 3
    clip_radius: float = 10.0
    cond_max: float = 1e10

    def __post_init__(self):
        if self.family not in BASIS_FAMILIES:
            raise ValueError(f"unknown basis family {self.family!r}")
        if int(self.degree) < 1:
            raise ValueError("basis degree must be at least 1")
        if not self.clip_radius > 0:
            raise ValueError("clip radius must be positive")

    def exponents(self, n_vars: int) -> list:
        out = []
        for deg in range(self.degree + 1):
            for combo in combinations_with_replacement(range(n_vars), deg):
                e = [0] * n_vars
                for i in combo:
                    e[i] += 1
                out.append(tuple(e))
        return out

    def size(self, dim_x: int, n_controls: int, control_dim: int = 1) -> int:
        if self.family == "polynomial":
            return len(self.exponents(dim_x + control_dim))
        return len(self.exponents(dim_x)) * n_controls


@dataclass(frozen=True)
class _Scaler:
    mu: np.ndarray
    scale: np.ndarray
    degenerate: bool
    constant: np.ndarray

    @classmethod
    def fit(cls, z: np.ndarray) -> "_Scaler":
        mu = z.mean(axis=0)
        sd = z.std(axis=0)
        const = sd < 1e-12
        return cls(mu, np.where(const, 1.0, sd), bool(np.all(const)), const)


    def __call__(self, z):
        return (z - self.mu) / self.scale


def _design(z: np.ndarray, exps: list) -> np.ndarray:
    top = max(max(e) for e in exps)
    powers = [np.ones_like(z)]
    for _ in range(top):
        powers.append(powers[-1] * z)
    out = np.ones((len(z), len(exps)))
    for j, e in enumerate(exps):
        for i, p in enumerate(e):
            if p:
                out[:, j] *= powers[p][:, i]
    return out


class _Surface:
    """Regression surface ``(x, regime) -> value`` fitted at one time step."""

    def __init__(self, basis: RegressionBasis, problem: ControlProblem):
        self.basis = basis
        self.problem = problem
        self.m = problem.n_controls
        self.controls = problem.controls
        joint = basis.family == "polynomial"
        self.exps = basis.exponents(problem.dim_x + (self.controls.shape[1] if joint else 0))
        self.joint = joint
        self.coef = None
        self.scaler = None
        self.cond = 1.0
        self.pooled = 0

    def _inputs(self, x, reg):
        x = np.clip(x, -self.basis.clip_radius, self.basis.clip_radius)
        if self.joint:
            return np.hstack([x, self.controls[reg]])
        return x

    def _lstsq(self, A, y):
        s = np.linalg.svd(A, compute_uv=False)
        cond = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
        if cond > self.basis.cond_max:
            raise RegressionError(f"regression condition number {cond:.3e} exceeds {self.basis.cond_max:.1e}")
        self.cond = max(self.cond, cond)
        return np.linalg.lstsq(A, y, rcond=None)[0]

    def fit(self, x, reg, y):
        z = self._inputs(x, reg)
        self.scaler = _Scaler.fit(z)
        n_basis = len(self.exps)
        if self.scaler.degenerate:
            # every path sits at the same point: a constant per regime
            if self.joint:
                self.coef = np.zeros(n_basis)
                self.coef[0] = y.mean()
            else:
                self.coef = np.zeros((self.m, n_basis))
                self.coef[:, 0] = y.mean()
                for k in range(self.m):
                    sel = reg == k
                    if sel.any():
                        self.coef[k, 0] = y[sel].mean()
            return self
        if self.joint:
            # a control coordinate taking k distinct values supports powers below k only
            top = [len(np.unique(z[:, i])) - 1 if i >= self.problem.dim_x else np.inf for i in range(z.shape[1])]
            top = [0 if c else t for c, t in zip(self.scaler.constant, top)]
            live = np.array([all(p <= t for p, t in zip(e, top)) for e in self.exps])
            A = _design(self.scaler(z), self.exps)
            self.coef = np.zeros(n_basis)
            self.coef[live] = self._lstsq(A[:, live], y)
            return self
        A = _design(self.scaler(z), self.exps)
        self.coef = np.zeros((self.m, n_basis))
        pooled = None
        min_count = 10 * n_basis
        for k in range(self.m):
            sel = reg == k
            if sel.sum() >= min_count:
                self.coef[k] = self._lstsq(A[sel], y[sel])
            else:
                # too few paths in this regime: borrow the regime-blind fit
                if pooled is None:
                    pooled = self._lstsq(A, y)
                self.coef[k] = pooled
                self.pooled += 1
        return self

    def evaluate_all(self, x) -> np.ndarray:
        """Values at every regime, shape ``(m, n)``."""
        if not self.joint:
            A = _design(self.scaler(self._inputs(x, None)), self.exps)
            return self.coef @ A.T
        out = np.empty((self.m, len(x)))
        for k in range(self.m):
            A = _design(self.scaler(self._inputs(x, np.full(len(x), k))), self.exps)
            out[k] = A @ self.coef
        return out


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """Backward regression estimates of ``(Y, Z, U)`` and the penalty proxy.

    Attributes:
        time_grid: Time nodes.
        y0: Estimate of ``Y_0`` (a single number).
        y0_se: Its standard error over paths.
        z0: Estimate of ``Z_0`` (length d).
        y_mean: Path average of the path-wise ``Y_t`` per time node.
        u_plus_mean: Path average of ``(U_t(a'))_+`` per time node and control.
        penalty_accumulator: Path average of ``int_0^t n sum theta (U)_+ ds``,
            the proxy for the increasing process ``K``; nondecreasing in t.
        gap_density: Path average of ``sum theta (U)_+^2`` per time node.
        surfaces: Fitted regression surfaces per time node.
        diagnostics: Sample sizes, condition numbers, pooled fallbacks.
    """

    time_grid: np.ndarray
    y0: float
    y0_se: float
    z0: np.ndarray
    y_mean: np.ndarray
    u_plus_mean: np.ndarray
    penalty_accumulator: np.ndarray
    gap_density: np.ndarray
    surfaces: list = field(repr=False)
    params: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def y_surface(self, k: int, x, a_index: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.surfaces[k].evaluate_all(x)[a_index]


def _check_paths(problem: ControlProblem, basis: RegressionBasis, n_paths: int):
    size = basis.size(problem.dim_x, problem.n_controls, problem.controls.shape[1])
    if n_paths < PATHS_PER_BASIS * size:
        raise ValueError(f"n_paths={n_paths} is below {PATHS_PER_BASIS} x basis size {size}")


def _check_penalty_step(problem: ControlProblem, n: float, dt: float):
    if n < 0:
        raise ValueError("penalty n must be nonnegative")
    if n * problem.control_rate * dt > 1.0 + 1e-12:
        raise ValueError(f"n * theta_a * dt = {n * problem.control_rate * dt:.3g} > 1; the explicit penalty step would overshoot")


def _recover_dw(problem: ControlProblem, x0, x1, reg, dt) -> np.ndarray:
    """Brownian increments implied by the Euler step."""
    dw = np.empty_like(x0)
    for k in np.unique(reg):
        sel = reg == k
        inc = x1[sel] - x0[sel] - problem.b(x0[sel], k) * dt
        sig = problem.sigma(x0[sel], k)
        dw[sel] = np.einsum("nij,nj->ni", np.linalg.pinv(sig), inc)
    return dw


def _backward(
    problem: ControlProblem,
    ens: PathEnsemble,
    basis: RegressionBasis,
    *,
    terminal: np.ndarray,
    beta: float,
    n: float,
    y_arg: Callable[[np.ndarray, float], np.ndarray],
) -> BsdeSolution:
    dt = ens.dt
    K = len(ens.time_grid) - 1
    m = problem.n_controls
    rate = problem.control_rate
    ypath = terminal.astype(float).copy()
    surf = _Surface(basis, problem).fit(ens.X[K], ens.regime_index[K], ypath)
    surfaces = [None] * (K + 1)
    surfaces[K] = surf
    y_mean = np.zeros(K + 1)
    u_plus = np.zeros((K + 1, m))
    pen_mean = np.zeros(K + 1)
    gap = np.zeros(K + 1)
    y_mean[K] = ypath.mean()
    z0 = np.zeros(problem.dim_x)
    cond = surf.cond
    pooled = surf.pooled
    rows = np.arange(ens.n_paths)
    for k in range(K - 1, -1, -1):
        x = ens.X[k]
        reg = ens.regime_index[k].astype(np.int64)
        t = float(ens.time_grid[k])
        yall = surf.evaluate_all(x)
        ycur = yall[reg, rows]
        uplus = np.clip(yall - ycur[None, :], 0.0, None)
        if m == 1:
            uplus[:] = 0.0
        pen = n * rate * uplus.sum(axis=0)
        drv = np.empty(ens.n_paths)
        yy = y_arg(ycur, t)
        for a in np.unique(reg):
            sel = reg == a
            drv[sel] = problem.f(x[sel], a, yy[sel])
        if k == 0:
            dw = _recover_dw(problem, x, ens.X[1], reg, dt)
            z0 = (ypath[:, None] * dw).mean(axis=0) / dt
        ypath = (1.0 - beta * dt) * ypath + dt * (drv + pen)
        surf = _Surface(basis, problem).fit(x, reg, ypath)
        surfaces[k] = surf
        cond = max(cond, surf.cond)
        pooled += surf.pooled
        y_mean[k] = float(np.mean(ypath))
        u_plus[k] = uplus.mean(axis=1)
        pen_mean[k] = pen.mean()
        gap[k] = rate * float(np.mean(np.sum(uplus**2, axis=0)))
    acc = np.concatenate([[0.0], np.cumsum(pen_mean[:-1] * dt)])
    N = ens.n_paths
    return BsdeSolution(
        time_grid=ens.time_grid.copy(),
        y0=float(ypath.mean()),
        y0_se=float(ypath.std(ddof=1) / np.sqrt(N)) if N > 1 else 0.0,
        z0=z0,
        y_mean=y_mean,
        u_plus_mean=u_plus,
        penalty_accumulator=acc,
        gap_density=gap,
        surfaces=surfaces,
        params={"beta": beta, "n": n, "dt": dt, "n_paths": N},
        diagnostics={
            "n_paths": N,
            "basis_size": basis.size(problem.dim_x, m, problem.controls.shape[1]),
            "max_condition_number": cond,
            "pooled_fallbacks": pooled,
        },
    )


def truncation_horizon(beta: float, target_tail: float) -> float:
    """Smallest horizon with ``exp(-beta T) <= target_tail``."""
    return float(np.log(1.0 / target_tail) / beta)


def solve_penalized_bsde(
    problem: ControlProblem,
    x,
    a,
    beta: float,
    n: float,
    T_trunc: float,
    dt: float,
    n_paths: int,
    basis: Optional[RegressionBasis] = None,
    seed: int = 0,
    *,
    target_tail: float = 1e-3,
    ensemble: Optional[PathEnsemble] = None,
    workers: int = 1,
) -> BsdeSolution:
    """Penalized infinite-horizon BSDE, truncated at ``T_trunc`` with zero terminal value.

    Args:
        problem: The control problem.
        x: Initial state.
        a: Initial regime (a control point).
        beta: Discount rate.
        n: Penalty parameter.
        T_trunc: Truncation horizon; must reach ``log(1/target_tail)/beta``.
        dt: Time step; ``n * theta_a * dt <= 1`` is required.
        n_paths: Number of paths, at least 50 times the basis size.
        basis: Regression basis (default: degree-3 polynomials per regime).
        seed: Seed for the forward paths.
        ensemble: Reuse pre-simulated paths (common random numbers).

    Returns:
        BsdeSolution whose ``y0`` estimates ``v^{beta,n}(x, a)``.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    need = truncation_horizon(beta, target_tail)
    if T_trunc < need * (1 - 1e-9):
        raise ValueError(f"T_trunc={T_trunc} is below log(1/{target_tail})/beta = {need:.4g}")
    basis = basis or RegressionBasis()
    _check_paths(problem, basis, n_paths)
    _check_penalty_step(problem, n, dt)
    ens = ensemble or simulate_paths(problem, x, a, dt, T_trunc, n_paths, seed=seed, workers=workers)
    sol = _backward(problem, ens, basis, terminal=np.zeros(ens.n_paths), beta=beta, n=n, y_arg=lambda y, t: beta * y)
    sol.params.update({"T_trunc": T_trunc, "kind": "penalized", "seed": seed})
    logger.debug("penalized BSDE beta=%g n=%g: Y0=%.6g (se %.2g)", beta, n, sol.y0, sol.y0_se)
    return sol


def penalization_sweep(
    problem: ControlProblem,
    x,
    a,
    beta: float,
    n_list: Sequence[float],
    T_trunc: float,
    dt: float,
    n_paths: int,
    basis: Optional[RegressionBasis] = None,
    seed: int = 0,
    *,
    target_tail: float = 1e-3,
    workers: int = 1,
    return_solutions: bool = False,
):
    """``Y_0`` for each penalty in ``n_list`` on one shared path ensemble.

    Sharing paths across ``n`` (common random numbers) makes differences in
    ``n`` far less noisy than independent runs.

    Returns:
        List of ``(n, Y_0, SE)``; with ``return_solutions`` also the solutions.
    """
    n_list = [float(v) for v in n_list]
    if any(b <= a_ for a_, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly increasing")
    basis = basis or RegressionBasis()
    _check_paths(problem, basis, n_paths)
    _check_penalty_step(problem, max(n_list), dt)
    ens = simulate_paths(problem, x, a, dt, T_trunc, n_paths, seed=seed, workers=workers)
    sols = [
        solve_penalized_bsde(problem, x, a, beta, n, T_trunc, dt, n_paths, basis, seed, target_tail=target_tail, ensemble=ens)
        for n in n_list
    ]
    rows = [(n, s.y0, s.y0_se) for n, s in zip(n_list, sols)]
    return (rows, sols) if return_solutions else rows


def jump_constraint_gap(solution: BsdeSolution) -> float:
    """Time integral of the path average of ``sum_a' theta_a' (U(a'))_+^2``."""
    dt = float(solution.params.get("dt", solution.time_grid[1] - solution.time_grid[0]))
    return float(np.sum(solution.gap_density[:-1]) * dt)


def solve_finite_horizon_bsde(
    problem: ControlProblem,
    x,
    a,
    T: float,
    n: float,
    dt: float,
    n_paths: int,
    basis: Optional[RegressionBasis] = None,
    seed: int = 0,
    *,
    data: Optional[Callable] = None,
    ensemble: Optional[PathEnsemble] = None,
    workers: int = 1,
) -> BsdeSolution:
    """Penalized BSDE on ``[0, T]`` with terminal value ``h(X_T)``.

    The driver is ``f(X, I, Y / (T - s + 1))`` plus the penalty, so at large
    ``n`` the estimate ``y0`` approximates the parabolic value ``v(T, x)``.
    ``data`` overrides the problem's ``h``.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    basis = basis or RegressionBasis()
    _check_paths(problem, basis, n_paths)
    _check_penalty_step(problem, n, dt)
    ens = ensemble or simulate_paths(problem, x, a, dt, T, n_paths, seed=seed, workers=workers)
    h = data or problem.h
    term = np.asarray(h(ens.X[-1]), dtype=float).reshape(ens.n_paths)
    sol = _backward(problem, ens, basis, terminal=term, beta=0.0, n=n, y_arg=lambda y, t: y / (T - t + 1.0))
    sol.params.update({"T": T, "kind": "finite-horizon", "seed": seed})
    return sol


@dataclass(frozen=True)
class DualPayoff:
    """Payoff entering the tilted lower bound.

    The path payoff is ``e^{R_T} g(X_T) + int_0^T rho_s e^{R_s} (phi(X_s) - lam) ds``
    with ``R_s = int_0^s rho``. ``rho`` takes ``(s, X_s, regime index)``.
    """

    terminal: Callable[[np.ndarray], np.ndarray]
    phi: Callable[[np.ndarray], np.ndarray]
    lam: float = 0.0
    rho: Optional[Callable[[float, np.ndarray, np.ndarray], np.ndarray]] = None


@dataclass(frozen=True)
class DualBound:
    """Max over the tilt family of the tilted payoff mean."""

    value: float
    se: float
    per_tilt: list
    best_index: int

    def __float__(self) -> float:
        return self.value


def _dual_payoff(ens: PathEnsemble, payoff: DualPayoff) -> np.ndarray:
    dt = ens.dt
    N = ens.n_paths
    R = np.zeros(N)
    integral = np.zeros(N)
    if payoff.rho is not None:
        for k in range(len(ens.time_grid) - 1):
            x = ens.X[k]
            rho = np.broadcast_to(np.asarray(payoff.rho(float(ens.time_grid[k]), x, ens.regime_index[k]), dtype=float), (N,))
            integral += rho * np.exp(R) * (np.asarray(payoff.phi(x), dtype=float) - payoff.lam) * dt
            R = R + rho * dt
    return np.exp(R) * np.asarray(payoff.terminal(ens.X[-1]), dtype=float) + integral


def dual_bound_estimate(
    problem: ControlProblem,
    x,
    a,
    tilt_family: Sequence[Optional[TiltSpec]],
    payoff: DualPayoff,
    T: float,
    dt: float,
    n_paths: int,
    seed: int = 0,
) -> DualBound:
    """Tilted Monte Carlo lower bound on the sup over intensity tilts.

    Each family member is simulated under its own tilted law (``None`` means
    untilted) with the same seed, so a member's estimate does not depend on
    the rest of the family and enlarging the family can only raise the max.
    """
    if not tilt_family:
        raise ValueError("tilt family must be nonempty")
    per = []
    for tilt in tilt_family:
        ens = simulate_paths(problem, x, a, dt, T, n_paths, tilt=tilt, seed=seed)
        vals = _dual_payoff(ens, payoff)
        per.append((float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0))
    best = int(np.argmax([v for v, _ in per]))
    return DualBound(value=per[best][0], se=per[best][1], per_tilt=per, best_index=best)


def write_bsde_csv(solution: BsdeSolution, path, *, fmt: str = "%.17g") -> None:
    """Columns: t, y_mean, u_plus_<k> per control, penalty_accumulator, gap_density."""
    m = solution.u_plus_mean.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "y_mean"] + [f"u_plus_{k}" for k in range(m)] + ["penalty_accumulator", "gap_density"])
        for i, t in enumerate(solution.time_grid):
            w.writerow(
                [fmt % t, fmt % solution.y_mean[i]]
                + [fmt % v for v in solution.u_plus_mean[i]]
                + [fmt % solution.penalty_accumulator[i], fmt % solution.gap_density[i]]
            )
