"""Monotone finite-difference solvers for the discounted, parabolic and ergodic HJB equations.

All solvers work on a truncated :class:`~ergodic_hjb.grid.Grid` with the
generators from :func:`~ergodic_hjb.grid.assemble_generator`. The discounted
equation

    beta v - max_a [L^a v + f(x, a, beta v)] = 0

is solved by Howard policy iteration with the y-argument of ``f`` frozen at
the previous iterate. The parabolic equation marches forward in the horizon
variable; the ergodic pair comes from vanishing discount.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .core_model import ControlProblem, cost_depends_on_y
from .grid import Grid, MonotonicityError, assemble_generator, check_monotone

logger = logging.getLogger(__name__)

DEFAULT_BETA_SCHEDULE = (0.4, 0.2, 0.1, 0.05, 0.02, 0.01)


class ConvergenceError(RuntimeError):
    """Policy iteration did not reach the residual tolerance."""


class CFLError(ValueError):
    """Explicit time step too large for a monotone scheme."""


@dataclass
class ValueField:
    """Grid function with provenance.

    ``kind`` is one of ``"parabolic"``, ``"discounted"``, ``"penalized"`` or
    ``"ergodic"``; ``params`` holds T, beta and/or n accordingly.
    """

    grid: Grid
    values: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)
    iterations: int = 0
    residual: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError(f"non-finite values in {self.kind} field")

    def at(self, x) -> np.ndarray:
        """Values at the nodes nearest to ``x``."""
        return self.values[..., self.grid.nearest(x)]

    def lipschitz_constant(self) -> float:
        """Largest adjacent-node difference quotient."""
        vals = self.values.reshape(self.values.shape[:-1] + self.grid.shape)
        worst = 0.0
        for i in range(self.grid.dim):
            axis = vals.ndim - self.grid.dim + i
            worst = max(worst, float(np.max(np.abs(np.diff(vals, axis=axis)))) / self.grid.h)
        return worst

    def growth_constant(self, scale: float = 1.0) -> float:
        """max over nodes of |scale * v(x)| / (1 + |x|)."""
        r = np.linalg.norm(self.grid.points, axis=1)
        return float(np.max(np.abs(scale * self.values) / (1.0 + r)))


@dataclass
class ErgodicPair:
    lam: float
    phi: ValueField
    residual: float
    beta_schedule: tuple
    lambda_betas: tuple
    warnings: list = field(default_factory=list)
    discounted: list = field(default_factory=list, repr=False)


@dataclass
class Policy:
    """Control index per grid node, used as a nearest-node feedback."""

    grid: Grid
    indices: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        if np.any(self.indices < 0) or np.any(self.indices >= len(self.controls)):
            raise ValueError("policy indices out of range")

    def __call__(self, x) -> np.ndarray:
        return self.indices[self.grid.nearest(x)]


class _Operators:
    """Per-control generator matrices and node data for one (problem, grid) pair."""

    def __init__(self, problem: ControlProblem, grid: Grid):
        self.problem = problem
        self.grid = grid
        self.L = [assemble_generator(problem, grid, k) for k in range(problem.n_controls)]
        for Lk in self.L:
            if not check_monotone(Lk):
                raise MonotonicityError("negative off-diagonal coefficient in the discrete generator")
        self.pts = grid.points
        self.active = grid.interior_mask if grid.boundary == "dirichlet-from-growth" else np.ones(grid.size, bool)
        self.y_dep = cost_depends_on_y(problem)
        if not self.y_dep:
            self._f0 = np.stack([problem.f(self.pts, k, 0.0) for k in range(problem.n_controls)])
        self.norm_inf = max(float(np.max(np.abs(Lk).sum(axis=1))) for Lk in self.L)

    def costs(self, y) -> np.ndarray:
        if not self.y_dep:
            return self._f0
        return np.stack([self.problem.f(self.pts, k, y) for k in range(self.problem.n_controls)])

    def objective(self, v, y) -> np.ndarray:
        return np.stack([Lk @ v for Lk in self.L]) + self.costs(y)

    def policy_matrix(self, pol) -> sparse.csr_matrix:
        if len(self.L) == 1:
            return self.L[0]
        out = None
        for k, Lk in enumerate(self.L):
            mask = pol == k
            if not np.any(mask):
                continue
            term = sparse.diags(mask.astype(float)) @ Lk
            out = term if out is None else out + term
        return out.tocsr()


def _argmax_lowest(obj: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. the lowest control index on ties
    return np.argmax(obj, axis=0)


def discrete_generator_apply(problem: ControlProblem, grid: Grid, field_values, a_index: int, node: int) -> float:
    """Value of the discrete operator ``L^a_h v`` at one node.

    Raises if the node is outside the grid, or if it is a boundary node under
    the Dirichlet policy (where the stencil would leave the grid).
    """
    if not 0 <= node < grid.size:
        raise IndexError("node outside the grid")
    if grid.boundary == "dirichlet-from-growth" and grid.boundary_mask[node]:
        raise ValueError("stencil leaves the grid at a Dirichlet boundary node")
    L = assemble_generator(problem, grid, a_index)
    v = np.asarray(field_values, dtype=float)
    return float(L.getrow(node) @ v)


def solve_discounted(
    problem: ControlProblem,
    grid: Grid,
    beta: float,
    tol: float = 1e-8,
    max_iter: int = 200,
    *,
    initial: Optional[np.ndarray] = None,
    ops: Optional[_Operators] = None,
) -> ValueField:
    """Howard policy iteration for ``beta v - max_a[L^a v + f(x,a,beta v)] = 0``.

    Each sweep improves the policy (argmax, lowest index on ties) and then
    solves ``(beta I - L^pi) v = f(x, pi, beta v_prev)`` with a sparse LU.
    Stops once the max-norm residual is at most ``tol``, or at most the
    roundoff floor ``64 eps |L|_inf |v|_inf`` when that is larger (fine grids
    with large values cannot resolve a smaller residual in double precision).
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    ops = ops or _Operators(problem, grid)
    N = grid.size
    v = np.zeros(N) if initial is None else np.array(initial, dtype=float)
    bc = ~ops.active
    history = []
    pol = None
    eye = sparse.identity(N, format="csr")
    l_norm = ops.norm_inf
    tol_eff = tol
    for it in range(1, max_iter + 1):
        obj = ops.objective(v, beta * v)
        res_nodes = np.abs(beta * v - obj.max(axis=0))
        res = float(np.max(res_nodes[ops.active]))
        if bc.any():
            res = max(res, float(np.max(np.abs(v[bc]))))
        history.append(res)
        tol_eff = max(tol, 64 * np.finfo(float).eps * (l_norm + beta) * float(np.max(np.abs(v))))
        if res <= tol_eff and pol is not None:
            break
        new_pol = _argmax_lowest(obj)
        if pol is not None:
            # keep the incumbent control where it is still optimal
            keep = obj[pol, np.arange(N)] >= obj[new_pol, np.arange(N)]
            new_pol = np.where(keep, pol, new_pol)
        pol = new_pol
        rhs = ops.costs(beta * v)[pol, np.arange(N)]
        A = (beta * eye - ops.policy_matrix(pol)).tocsr()
        if bc.any():
            A = _dirichlet_rows(A, bc)
            rhs = np.where(bc, 0.0, rhs)
        v = splu(sparse.csc_matrix(A)).solve(rhs)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("policy evaluation produced non-finite values")
    else:
        raise ConvergenceError(f"policy iteration stalled at residual {history[-1]:.3e} after {max_iter} sweeps")
    out = ValueField(
        grid=grid,
        values=v,
        kind="discounted",
        params={"beta": float(beta)},
        iterations=len(history),
        residual=history[-1],
        meta={"residual_history": history, "policy": pol, "tol_effective": tol_eff},
    )
    out.meta["growth_C"] = out.growth_constant(beta)
    return out


def _dirichlet_rows(A: sparse.csr_matrix, bc: np.ndarray) -> sparse.csr_matrix:
    keep = sparse.diags((~bc).astype(float))
    return (keep @ A + sparse.diags(bc.astype(float))).tocsr()


def solve_penalized(
    problem: ControlProblem,
    grid: Grid,
    beta: float,
    n: float,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> ValueField:
    """Regime-indexed system ``beta v_a - L^a v_a - M^a v - f_a - n sum (v_a' - v_a)_+ theta_a' = 0``.

    ``M^a`` is the regime-jump generator with uniform intensity. The positive
    parts are handled by policy iteration on the set of active penalties.
    Values have shape ``(n_controls, grid.size)``.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    ops = _Operators(problem, grid)
    m, N = problem.n_controls, grid.size
    rate = problem.control_rate
    eye = sparse.identity(N, format="csr")
    v = np.zeros((m, N))
    history = []
    for it in range(1, max_iter + 1):
        y = beta * v
        fs = np.stack([problem.f(grid.points, k, y[k]) for k in range(m)])
        Lv = np.stack([ops.L[k] @ v[k] for k in range(m)])
        jump = rate * (v.sum(axis=0)[None, :] - m * v)
        gaps = v[None, :, :] - v[:, None, :]  # gaps[k, j] = v_j - v_k
        pen = n * rate * np.clip(gaps, 0, None).sum(axis=1)
        res_nodes = np.abs(beta * v - Lv - jump - fs - pen)
        res = float(np.max(res_nodes[:, ops.active]))
        history.append(res)
        if res <= tol and it > 1:
            break
        active = gaps > 0
        blocks = [[None] * m for _ in range(m)]
        for k in range(m):
            n_act = active[k].sum(axis=0)
            diag = (beta + rate * (m - 1) + n * rate * n_act) * np.ones(N)
            blocks[k][k] = sparse.diags(diag) - ops.L[k]
            for j in range(m):
                if j == k:
                    continue
                coef = rate + n * rate * active[k, j]
                blocks[k][j] = sparse.diags(-coef)
        A = sparse.bmat(blocks, format="csc")
        rhs = fs.reshape(-1)
        v = splu(A).solve(rhs).reshape(m, N)
    else:
        raise ConvergenceError(f"penalized iteration stalled at residual {history[-1]:.3e}")
    return ValueField(
        grid=grid,
        values=v,
        kind="penalized",
        params={"beta": float(beta), "n": float(n)},
        iterations=len(history),
        residual=history[-1],
        meta={"residual_history": history},
    )


def cfl_bound(problem: ControlProblem, grid: Grid) -> float:
    """Largest explicit step keeping the scheme monotone: h^2 / (d max||sigma sigma^T|| + h max|b|)."""
    pts = grid.points
    amax, bmax = 0.0, 0.0
    for k in range(problem.n_controls):
        s = problem.sigma(pts, k)
        amax = max(amax, float(np.max(np.linalg.norm(np.einsum("nij,nkj->nik", s, s), ord=2, axis=(1, 2)))))
        bmax = max(bmax, float(np.max(np.abs(problem.b(pts, k)))))
    return grid.h**2 / (grid.dim * amax + grid.h * bmax)


def solve_parabolic(
    problem: ControlProblem,
    grid: Grid,
    T_max: float,
    dt: float,
    record_times: Sequence[float] = (),
    *,
    mode: str = "implicit",
    data=None,
    max_policy_iter: int = 50,
) -> list:
    """March ``dv/dT = max_a[L^a v + f(x, a, v/(T+1))]`` from ``v(0) = h``.

    ``mode="implicit"`` uses backward Euler with a policy iteration per step
    (factorizations cached per policy); ``mode="explicit"`` is forward Euler and
    requires ``dt <= cfl_bound``. The y-argument always uses the previous level.
    ``data`` overrides the initial datum (array on the grid). Returns one
    :class:`ValueField` per entry of ``record_times`` (default: ``T_max``).
    """
    if T_max < 0:
        raise ValueError("T_max must be nonnegative")
    if mode not in ("implicit", "explicit"):
        raise ValueError("mode must be 'implicit' or 'explicit'")
    record = sorted(float(t) for t in (record_times or [T_max]))
    if record and record[-1] > T_max + 1e-12:
        raise ValueError("record time beyond T_max")
    steps = {}
    if T_max > 0:
        if not dt > 0:
            raise ValueError("dt must be positive")
        for t in record:
            k = int(round(t / dt))
            if abs(k * dt - t) > 1e-9 * max(1.0, t):
                raise ValueError(f"record time {t} is not a multiple of dt={dt}")
            steps[k] = t
    else:
        steps = {0: 0.0}
    ops = _Operators(problem, grid)
    if mode == "explicit" and T_max > 0:
        bound = cfl_bound(problem, grid)
        if dt > bound * (1 + 1e-12):
            raise CFLError(f"dt={dt} exceeds the monotone CFL bound {bound:.3e}")

    v = problem.h(grid.points) if data is None else np.array(data, dtype=float).reshape(grid.size)
    bc = ~ops.active
    v_bc = v[bc].copy()
    N = grid.size
    n_steps = max(steps) if steps else 0
    out = []
    if 0 in steps:
        out.append(ValueField(grid, v.copy(), "parabolic", {"T": 0.0}))
    eye = sparse.identity(N, format="csr")
    cache: dict = {}
    pol = np.zeros(N, dtype=np.int64)
    total_policy_iters = 0
    for k in range(1, n_steps + 1):
        T_prev = (k - 1) * dt
        y = v / (T_prev + 1.0)
        fs = ops.costs(y)
        if mode == "explicit":
            v = v + dt * (np.stack([Lk @ v for Lk in ops.L]) + fs).max(axis=0)
        else:
            v_old = v
            for _ in range(max_policy_iter):
                key = pol.tobytes() if problem.n_controls > 1 else b"single"
                lu = cache.get(key)
                if lu is None:
                    A = eye - dt * ops.policy_matrix(pol)
                    if bc.any():
                        A = _dirichlet_rows(A.tocsr(), bc)
                    lu = splu(sparse.csc_matrix(A))
                    if len(cache) > 16:
                        cache.clear()
                    cache[key] = lu
                rhs = v_old + dt * fs[pol, np.arange(N)]
                if bc.any():
                    rhs = np.where(bc, 0.0, rhs)
                    rhs[bc] = v_bc
                v = lu.solve(rhs)
                total_policy_iters += 1
                if problem.n_controls == 1:
                    break
                obj = np.stack([Lk @ v for Lk in ops.L]) + fs
                cand = _argmax_lowest(obj)
                better = obj[cand, np.arange(N)] > obj[pol, np.arange(N)] + 1e-12 * (1 + np.abs(obj).max())
                if not better.any():
                    break
                pol = np.where(better, cand, pol)
        if bc.any():
            v[bc] = v_bc
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite values at T={k * dt}")
        if k in steps:
            out.append(ValueField(grid, v.copy(), "parabolic", {"T": steps[k]}, iterations=total_policy_iters))
    return out


def _linear_extrapolate(betas: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Intercept at beta=0 of a least-squares line through (beta_k, values_k)."""
    design = np.stack([np.ones_like(betas), betas], axis=1)
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    return coef[0]


def ergodic_residual(problem: ControlProblem, grid: Grid, pair: ErgodicPair, ops: Optional[_Operators] = None) -> float:
    """max over interior nodes of |lambda - max_a[L^a_h phi + f(x,a,lambda)]|."""
    ops = ops or _Operators(problem, grid)
    phi = pair.phi.values
    obj = ops.objective(phi, np.full(grid.size, pair.lam))
    res = np.abs(pair.lam - obj.max(axis=0))
    return float(np.max(res[grid.interior_mask]))


def solve_ergodic_vanishing_discount(
    problem: ControlProblem,
    grid: Grid,
    beta_schedule: Sequence[float] = DEFAULT_BETA_SCHEDULE,
    tol: float = 1e-8,
    *,
    phi_mode: str = "extrapolate",
    n_fit: int = 3,
    max_iter: int = 200,
) -> ErgodicPair:
    """Ergodic pair (lambda, phi) by vanishing discount.

    ``lambda_beta = beta v^beta(anchor)``, ``phi^beta = v^beta - v^beta(anchor)``;
    lambda is the beta -> 0 intercept of a linear fit over the last ``n_fit``
    schedule points. ``phi_mode="extrapolate"`` applies the same fit nodewise,
    ``"smallest"`` keeps phi^beta at the smallest beta.
    """
    betas = np.asarray(beta_schedule, dtype=float)
    if betas.size < 3 or np.any(betas <= 0) or np.any(np.diff(betas) >= 0):
        raise ValueError("beta_schedule must be strictly decreasing, positive, length >= 3")
    if phi_mode not in ("extrapolate", "smallest"):
        raise ValueError("phi_mode must be 'extrapolate' or 'smallest'")
    ops = _Operators(problem, grid)
    anchor = grid.anchor
    lams, phis, fields = [], [], []
    v = None
    for beta in betas:
        # warm start from the previous beta, rescaled to the new discount
        init = None if v is None else v.values * (prev_beta / beta)
        v = solve_discounted(problem, grid, beta, tol=tol * max(1.0, 1.0 / beta), max_iter=max_iter, initial=init, ops=ops)
        prev_beta = beta
        fields.append(v)
        lams.append(beta * v.values[anchor])
        phis.append(v.values - v.values[anchor])
    lams_arr = np.array(lams)
    tail = slice(len(betas) - n_fit, None)
    lam = float(_linear_extrapolate(betas[tail], lams_arr[tail]))
    if phi_mode == "extrapolate":
        phi = _linear_extrapolate(betas[tail], np.stack(phis)[tail])
        phi = phi - phi[anchor]
    else:
        phi = phis[-1]
    notes = []
    steps = np.abs(np.diff(lams_arr))
    if np.any(np.diff(steps) > 1e-9 * (1 + np.abs(lams_arr).max())):
        msg = "lambda_beta increments are not shrinking along the schedule"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    phi_field = ValueField(grid, phi, "ergodic", {"beta_min": float(betas[-1])})
    pair = ErgodicPair(
        lam=lam,
        phi=phi_field,
        residual=float("nan"),
        beta_schedule=tuple(float(b) for b in betas),
        lambda_betas=tuple(float(x) for x in lams_arr),
        warnings=notes,
        discounted=fields,
    )
    pair.residual = ergodic_residual(problem, grid, pair, ops=ops)
    return pair


def extract_feedback(problem: ControlProblem, grid: Grid, pair: ErgodicPair) -> Policy:
    """Nodewise argmax of ``L^a_h phi + f(x, a, lambda)``, lowest index on ties."""
    ops = _Operators(problem, grid)
    obj = ops.objective(pair.phi.values, np.full(grid.size, pair.lam))
    return Policy(grid=grid, indices=_argmax_lowest(obj), controls=problem.controls)
