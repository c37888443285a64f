"""Simulation of the regime-switching forward system and its ergodic estimators.

The state ``X`` follows an Euler-Maruyama discretization of
``dX = b(X, I) dt + sigma(X, I) dW``. The regime ``I`` jumps at the atoms of a
Poisson random measure with uniform intensity on the control list; under a
tilt ``nu`` the intensity of control ``a`` becomes ``nu(t, a)`` times its
untilted rate. At most one atom is drawn per step.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core_model import ControlProblem

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096
BLOWUP_RADIUS = 1e6


class BlowUpError(FloatingPointError):
    """A simulated state left the blow-up radius."""


@dataclass(frozen=True)
class TiltSpec:
    """Intensity tilt with values in ``[1, n + 1]``.

    Attributes:
        nu: Callable ``(t, a) -> float`` where ``a`` is a control point.
        n: Positive integer bound.
    """

    nu: Callable[[float, np.ndarray], float]
    n: int

    def __post_init__(self):
        if int(self.n) < 1:
            raise ValueError("tilt bound n must be a positive integer")

    def values(self, t: float, controls: np.ndarray) -> np.ndarray:
        vals = np.array([float(self.nu(t, a)) for a in controls])
        if np.any(vals < 1.0) or np.any(vals > self.n + 1.0) or not np.all(np.isfinite(vals)):
            raise ValueError(f"tilt nu={vals.tolist()} at t={t} leaves [1, {self.n + 1}]")
        return vals

    @classmethod
    def constant(cls, c: float, n: int) -> "TiltSpec":
        return cls(nu=lambda t, a, _c=float(c): _c, n=n)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Simulated trajectories of ``(X, I)``.

    Arrays are time-major: ``X`` has shape ``(n_times, n_paths, d)``,
    ``regime_index`` and ``tilt_weight`` have shape ``(n_times, n_paths)``.
    ``tilt_weight`` is the likelihood ratio of the untilted law against the
    simulated (tilted) law, so weighted averages estimate untilted expectations
    and the plain path average of the weight is 1 up to Monte Carlo error.
    The jump log stores every Poisson atom, including those whose mark equals
    the current regime.
    """

    problem: ControlProblem
    time_grid: np.ndarray
    X: np.ndarray
    regime_index: np.ndarray
    tilt_weight: np.ndarray
    jump_path: np.ndarray
    jump_time: np.ndarray
    jump_to: np.ndarray
    seed: int
    tilted: bool = False

    @property
    def n_paths(self) -> int:
        return self.X.shape[1]

    @property
    def dt(self) -> float:
        return float(self.time_grid[1] - self.time_grid[0]) if len(self.time_grid) > 1 else 0.0

    @property
    def regimes(self) -> np.ndarray:
        """Control points along each path, shape ``(n_times, n_paths, q)``."""
        return self.problem.controls[self.regime_index]

    def time_index(self, t: float) -> int:
        k = int(np.rint(t / self.dt)) if self.dt > 0 else 0
        if k < 0 or k >= len(self.time_grid) or abs(self.time_grid[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not on the time grid")
        return k

    def jump_log(self, path: int) -> list:
        """``[(jump time, new control point), ...]`` for one path."""
        sel = self.jump_path == path
        return [(float(t), self.problem.controls[k].copy()) for t, k in zip(self.jump_time[sel], self.jump_to[sel])]

    def jump_counts(self) -> np.ndarray:
        return np.bincount(self.jump_path, minlength=self.n_paths)


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted sample of points in R^d.

    ``mean_se`` and ``second_moment_se`` are batch-means standard errors
    (one batch per chain) when the sample came from parallel chains.
    """

    points: np.ndarray
    weights: np.ndarray
    mean: np.ndarray
    second_moment: float
    mean_se: Optional[np.ndarray] = None
    second_moment_se: Optional[float] = None

    def __post_init__(self):
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("weights must be nonnegative and sum to 1")

    @property
    def covariance(self) -> np.ndarray:
        c = self.points - self.mean
        return np.einsum("n,ni,nj->ij", self.weights, c, c)

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(self.weights @ np.asarray(fn(self.points), dtype=float))


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(block)]))


def _blocks(n_paths: int, block_size: int) -> list:
    return [(s, min(s + block_size, n_paths)) for s in range(0, n_paths, block_size)]


def _euler_step(problem: ControlProblem, x: np.ndarray, reg: np.ndarray, dt: float, dw: np.ndarray) -> np.ndarray:
    out = x.copy()
    for k in np.unique(reg):
        sel = reg == k
        xs = x[sel]
        out[sel] = xs + problem.b(xs, k) * dt + np.einsum("nij,nj->ni", problem.sigma(xs, k), dw[sel])
    return out


def _check_blowup(x: np.ndarray, radius: float, t: float):
    if not np.all(np.isfinite(x)) or np.max(np.abs(x), initial=0.0) > radius:
        raise BlowUpError(f"state left the blow-up radius {radius:g} at t={t:g}")


def _run_block(problem, x0, a0, dt, n_steps, n, tilt, rng, blowup_radius):
    d, m = problem.dim_x, problem.n_controls
    X = np.empty((n_steps + 1, n, d))
    R = np.empty((n_steps + 1, n), dtype=np.int16)
    Wt = np.ones((n_steps + 1, n)) if tilt is not None else None
    X[0] = x0
    R[0] = a0
    lam = problem.intensity_total
    q = np.full(m, 1.0 / m)
    p = -np.expm1(-lam * dt)
    jp, jt, jk = [], [], []
    for s in range(n_steps):
        t = s * dt
        if tilt is None:
            lam_nu, q_nu, p_nu = lam, q, p
        else:
            nu = tilt.values(t, problem.controls)
            lam_nu = float(np.sum(nu) * problem.control_rate)
            q_nu = nu / nu.sum()
            p_nu = -np.expm1(-lam_nu * dt)
        dw = rng.standard_normal((n, d)) * np.sqrt(dt)
        u = rng.random(n)
        mark = rng.choice(m, size=n, p=q_nu) if m > 1 else np.zeros(n, dtype=np.int64)
        jump = u < p_nu
        X[s + 1] = _euler_step(problem, X[s], R[s], dt, dw)
        R[s + 1] = np.where(jump, mark, R[s])
        if tilt is not None:
            ratio = np.where(jump, (p * q[mark]) / (p_nu * q_nu[mark]), np.exp((lam_nu - lam) * dt))
            Wt[s + 1] = Wt[s] * ratio
        idx = np.nonzero(jump)[0]
        if idx.size:
            jp.append(idx)
            jt.append(np.full(idx.size, (s + 1) * dt))
            jk.append(mark[idx])
        _check_blowup(X[s + 1], blowup_radius, (s + 1) * dt)
    cat = lambda parts, dtype: np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)
    return X, R, Wt, cat(jp, np.int64), cat(jt, float), cat(jk, np.int64)


def simulate_paths(
    problem: ControlProblem,
    x0,
    a0,
    dt: float,
    T: float,
    n_paths: int,
    tilt: Optional[TiltSpec] = None,
    seed: int = 0,
    *,
    workers: int = 1,
    block_size: int = BLOCK_SIZE,
    blowup_radius: float = BLOWUP_RADIUS,
) -> PathEnsemble:
    """Simulate ``n_paths`` trajectories of ``(X, I)`` from ``(x0, a0)``.

    Paths are generated in fixed blocks, block ``j`` seeded by
    ``SeedSequence([seed, j])``, so output does not depend on ``workers``.

    Args:
        problem: The control problem.
        x0: Initial state, length ``dim_x``.
        a0: Initial regime, a control point from ``problem.controls``.
        dt: Time step.
        T: Horizon; the grid has ``round(T/dt)`` steps.
        n_paths: Number of paths.
        tilt: Optional intensity tilt; paths are then simulated under the
            tilted law and carry likelihood-ratio weights.
        seed: Base seed.

    Returns:
        PathEnsemble
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not T >= dt * (1 - 1e-12):
        raise ValueError("horizon T must be at least dt")
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    a_idx = problem.control_index(a0)
    x0 = np.asarray(x0, dtype=float).reshape(problem.dim_x)
    n_steps = int(round(T / dt))
    if tilt is not None:
        # reject bad tilts up front, on the whole time grid
        for s in range(n_steps):
            tilt.values(s * dt, problem.controls)
    blocks = _blocks(n_paths, block_size)

    def job(j):
        lo, hi = blocks[j]
        return _run_block(problem, x0, a_idx, dt, n_steps, hi - lo, tilt, _block_rng(seed, j), blowup_radius)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(len(blocks))))
    else:
        parts = [job(j) for j in range(len(blocks))]
    offsets = [lo for lo, _ in blocks]
    if tilt is None:
        # untilted weights are identically one; share a read-only view
        weights = np.broadcast_to(np.ones(1), (n_steps + 1, n_paths))
    else:
        weights = np.concatenate([p[2] for p in parts], axis=1)
    return PathEnsemble(
        problem=problem,
        time_grid=dt * np.arange(n_steps + 1),
        X=np.concatenate([p[0] for p in parts], axis=1),
        regime_index=np.concatenate([p[1] for p in parts], axis=1),
        tilt_weight=weights,
        jump_path=np.concatenate([p[3] + off for p, off in zip(parts, offsets)]),
        jump_time=np.concatenate([p[4] for p in parts]),
        jump_to=np.concatenate([p[5] for p in parts]),
        seed=int(seed),
        tilted=tilt is not None,
    )


def estimate_second_moment(ensemble: PathEnsemble, t: float) -> tuple:
    """Weighted mean of ``|X_t|^2`` with its standard error."""
    k = ensemble.time_index(t)
    vals = ensemble.tilt_weight[k] * np.sum(ensemble.X[k] ** 2, axis=1)
    n = len(vals)
    se = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(vals.mean()), se


def fit_moment_bound(ensemble: PathEnsemble) -> float:
    """Smallest ``C`` with ``E|X_t|^2 <= C (1 + |x0|^2)`` over the time grid."""
    x0 = ensemble.X[0, 0]
    m2 = np.mean(ensemble.tilt_weight * np.sum(ensemble.X**2, axis=2), axis=1)
    return float(np.max(m2) / (1.0 + float(x0 @ x0)))


def estimate_contraction(
    problem: ControlProblem,
    x,
    x_prime,
    a,
    dt: float,
    ts: Sequence[float],
    n_paths: int,
    seed: int = 0,
    *,
    block_size: int = BLOCK_SIZE,
) -> list:
    """Synchronously coupled ``E|X_t^x - X_t^{x'}|^2`` at the times ``ts``.

    Both copies share Brownian increments and regime jumps.

    Returns:
        List of ``(t, mean squared distance, standard error)``.
    """
    x = np.asarray(x, dtype=float).reshape(problem.dim_x)
    xp = np.asarray(x_prime, dtype=float).reshape(problem.dim_x)
    if np.allclose(x, xp, rtol=0, atol=0):
        raise ValueError("x and x_prime must differ")
    a_idx = problem.control_index(a)
    ts = np.asarray(ts, dtype=float)
    steps = np.rint(ts / dt).astype(int)
    if np.any(steps < 0):
        raise ValueError("times must be nonnegative")
    n_steps = int(steps.max(initial=0))
    m = problem.n_controls
    p = -np.expm1(-problem.intensity_total * dt)
    sums = np.zeros((len(ts), n_paths))
    for j, (lo, hi) in enumerate(_blocks(n_paths, block_size)):
        rng = _block_rng(seed, j)
        n = hi - lo
        X1 = np.tile(x, (n, 1))
        X2 = np.tile(xp, (n, 1))
        R = np.full(n, a_idx)
        for s in range(n_steps + 1):
            hit = np.nonzero(steps == s)[0]
            if hit.size:
                dist = np.sum((X1 - X2) ** 2, axis=1)
                sums[hit, lo:hi] = dist
            if s == n_steps:
                break
            dw = rng.standard_normal((n, problem.dim_x)) * np.sqrt(dt)
            jump = rng.random(n) < p
            mark = rng.integers(0, m, size=n)
            X1 = _euler_step(problem, X1, R, dt, dw)
            X2 = _euler_step(problem, X2, R, dt, dw)
            R = np.where(jump, mark, R)
    out = []
    for i, t in enumerate(ts):
        v = sums[i]
        se = float(v.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
        out.append((float(t), float(v.mean()), se))
    return out


def fit_decay_slope(estimates: Sequence[tuple]) -> float:
    """Least-squares slope of ``log E|dX_t|^2`` against ``t``."""
    t = np.array([e[0] for e in estimates])
    v = np.array([e[1] for e in estimates])
    keep = v > 0
    if keep.sum() < 2:
        raise ValueError("need at least two positive estimates to fit a slope")
    return float(np.polyfit(t[keep], np.log(v[keep]), 1)[0])


def _as_feedback(problem: ControlProblem, feedback) -> Callable[[np.ndarray], np.ndarray]:
    if feedback is None:
        return lambda x: np.zeros(len(x), dtype=np.int64)
    if isinstance(feedback, (int, np.integer)):
        k = int(feedback)
        if not 0 <= k < problem.n_controls:
            raise ValueError("constant feedback index out of range")
        return lambda x: np.full(len(x), k, dtype=np.int64)

    def fb(x):
        idx = np.asarray(feedback(x), dtype=np.int64).reshape(-1)
        if idx.size == 1 and len(x) > 1:
            idx = np.full(len(x), int(idx[0]))
        if np.any(idx < 0) or np.any(idx >= problem.n_controls):
            raise ValueError("feedback returned an invalid control index")
        return idx

    return fb


def simulate_closed_loop(
    problem: ControlProblem,
    feedback,
    x0,
    dt: float,
    n_steps: int,
    n_paths: int,
    seed: int = 0,
    *,
    record_every: int = 0,
    record_from: int = 0,
    running_cost: bool = False,
    block_size: int = BLOCK_SIZE,
    blowup_radius: float = BLOWUP_RADIUS,
) -> dict:
    """Euler scheme for the closed loop ``dX = b(X, a(X)) dt + sigma(X, a(X)) dW``.

    ``feedback`` maps states to control indices (a :class:`Policy` works), or
    is a constant index. Optionally records states every ``record_every``
    steps from step ``record_from`` on, and accumulates the left-point
    integral of ``f(X, a(X), 0)``.

    Returns:
        Dict with ``final`` states, ``samples`` of shape (n_records, n_paths, d)
        and ``cost_integral`` per path.
    """
    fb = _as_feedback(problem, feedback)
    x0 = np.asarray(x0, dtype=float).reshape(problem.dim_x)
    finals, records, costs = [], [], []
    for j, (lo, hi) in enumerate(_blocks(n_paths, block_size)):
        rng = _block_rng(seed, j)
        n = hi - lo
        X = np.tile(x0, (n, 1))
        acc = np.zeros(n)
        rec = []
        for s in range(n_steps):
            reg = fb(X)
            if running_cost:
                for k in np.unique(reg):
                    sel = reg == k
                    acc[sel] += problem.f(X[sel], k, 0.0) * dt
            dw = rng.standard_normal((n, problem.dim_x)) * np.sqrt(dt)
            X = _euler_step(problem, X, reg, dt, dw)
            _check_blowup(X, blowup_radius, (s + 1) * dt)
            if record_every and s + 1 >= record_from and (s + 1 - record_from) % record_every == 0:
                rec.append(X.copy())
        finals.append(X)
        costs.append(acc)
        if record_every:
            records.append(np.stack(rec) if rec else np.zeros((0, n, problem.dim_x)))
    return {
        "final": np.concatenate(finals),
        "samples": np.concatenate(records, axis=1) if record_every else None,
        "cost_integral": np.concatenate(costs),
    }


def estimate_invariant_measure(
    problem: ControlProblem,
    feedback,
    burn_in: float,
    n_samples: int,
    dt: float,
    thinning: int,
    seed: int = 0,
    *,
    n_chains: int = 1000,
    x0=None,
    blowup_radius: float = BLOWUP_RADIUS,
) -> EmpiricalMeasure:
    """Long-run samples of the closed-loop diffusion from parallel chains.

    Each chain runs ``burn_in`` time units, then records its state every
    ``thinning`` steps until ``n_samples`` points are collected overall.
    Standard errors use one batch per chain.
    """
    if n_samples < 1 or thinning < 1:
        raise ValueError("n_samples and thinning must be positive")
    if burn_in < 5.0 / problem.gamma:
        logger.warning("burn-in %.3g is shorter than 5/gamma = %.3g", burn_in, 5.0 / problem.gamma)
    n_chains = int(min(n_chains, n_samples))
    per_chain = int(np.ceil(n_samples / n_chains))
    burn_steps = int(round(burn_in / dt))
    x0 = np.zeros(problem.dim_x) if x0 is None else x0
    out = simulate_closed_loop(
        problem,
        feedback,
        x0,
        dt,
        burn_steps + per_chain * thinning,
        n_chains,
        seed,
        record_every=thinning,
        record_from=burn_steps + thinning,
        blowup_radius=blowup_radius,
    )
    samples = out["samples"]  # (per_chain, n_chains, d)
    pts = samples.reshape(-1, problem.dim_x)
    w = np.full(len(pts), 1.0 / len(pts))
    sq = np.sum(samples**2, axis=2)
    chain_means = samples.mean(axis=0)
    chain_sq = sq.mean(axis=0)
    k = samples.shape[1]
    mean_se = chain_means.std(axis=0, ddof=1) / np.sqrt(k) if k > 1 else None
    sq_se = float(chain_sq.std(ddof=1) / np.sqrt(k)) if k > 1 else None
    return EmpiricalMeasure(
        points=pts,
        weights=w,
        mean=pts.mean(axis=0),
        second_moment=float(np.mean(np.sum(pts**2, axis=1))),
        mean_se=mean_se,
        second_moment_se=sq_se,
    )


def write_paths_csv(ensemble: PathEnsemble, path, *, fmt: str = "%.17g") -> None:
    """Columns: path, t, x_1..x_d, regime, tilt_weight."""
    d = ensemble.X.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "t"] + [f"x_{i + 1}" for i in range(d)] + ["regime", "tilt_weight"])
        for p in range(ensemble.n_paths):
            for k, t in enumerate(ensemble.time_grid):
                w.writerow([p, fmt % t] + [fmt % v for v in ensemble.X[k, p]] + [int(ensemble.regime_index[k, p]), fmt % ensemble.tilt_weight[k, p]])


def write_jumps_csv(ensemble: PathEnsemble, path, *, fmt: str = "%.17g") -> None:
    """Columns: path, t, regime (index of the new control)."""
    order = np.lexsort((ensemble.jump_time, ensemble.jump_path))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "t", "regime"])
        for i in order:
            w.writerow([int(ensemble.jump_path[i]), fmt % ensemble.jump_time[i], int(ensemble.jump_to[i])])
