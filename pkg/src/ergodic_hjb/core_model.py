"""Control problems for regime-switching diffusions and sampled assumption checks.

A :class:`ControlProblem` bundles the coefficients of

    dX_t = b(X_t, I_t) dt + sigma(X_t, I_t) dW_t

together with a running gain ``f(x, a, y)``, an initial datum ``h(x)`` for the
parabolic equation and the constants the solvers rely on (dissipativity rate,
Lipschitz constants, jump intensity).

Coefficient functions are vectorized over the leading axis of ``x``:

    drift(x, a)            x: (N, d), a: (q,)  ->  (N, d)
    diffusion(x, a)        x: (N, d), a: (q,)  ->  (N, d, d)
    running_cost(x, a, y)  x: (N, d), a: (q,), y: (N,)  ->  (N,)
    data_h(x)              x: (N, d)  ->  (N,)

They must be pure functions; problems are shared read-only between workers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

logger = logging.getLogger(__name__)

DriftFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
CostFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

DEFAULT_BOX_RADIUS = 10.0
DEFAULT_N_SAMPLES = 10_000
_CHECK_TOL = 1e-9


def _as_controls(controls) -> np.ndarray:
    arr = np.asarray(controls, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("controls must be a nonempty list of points")
    if len(np.unique(arr, axis=0)) != len(arr):
        raise ValueError("controls must be duplicate-free")
    return arr


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Coefficients and constants of a controlled regime-switching diffusion.

    The control set is a finite list of points (rows of ``controls``); the jump
    intensity measure puts mass ``intensity_total / len(controls)`` on each.
    ``kappa`` is the strict decay rate of the y-dependent part of the gain, or
    ``None`` when the gain does not depend on y.
    """

    dim_x: int
    controls: np.ndarray
    drift: DriftFn
    diffusion: DriftFn
    running_cost: CostFn
    data_h: Callable[[np.ndarray], np.ndarray]
    gamma: float
    lip_b_sigma: float
    lip_f: float
    kappa: Optional[float] = None
    intensity_total: float = 1.0
    name: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.dim_x) < 1:
            raise ValueError("dim_x must be a positive integer")
        object.__setattr__(self, "controls", _as_controls(self.controls))
        self.controls.setflags(write=False)
        for attr in ("gamma", "lip_b_sigma", "lip_f", "intensity_total"):
            if not float(getattr(self, attr)) > 0:
                raise ValueError(f"{attr} must be positive")
        if self.kappa is not None and self.kappa < 0:
            raise ValueError("kappa must be nonnegative")

    @property
    def n_controls(self) -> int:
        return self.controls.shape[0]

    @property
    def control_rate(self) -> float:
        """Jump intensity carried by each individual control point."""
        return self.intensity_total / self.n_controls

    def control_index(self, a) -> int:
        """Index of the control point ``a`` in the control list."""
        a = np.asarray(a, dtype=float).reshape(-1)
        if a.size != self.controls.shape[1]:
            raise ValueError(f"control {a.tolist()} has the wrong length")
        hits = np.nonzero(np.all(np.isclose(self.controls, a[None, :], rtol=0.0, atol=1e-12), axis=1))[0]
        if hits.size == 0:
            raise ValueError(f"control {a.tolist()} is not in the control list")
        return int(hits[0])

    def b(self, x, a_index: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self.drift(x, self.controls[a_index]), dtype=float).reshape(len(x), self.dim_x)

    def sigma(self, x, a_index: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        s = np.asarray(self.diffusion(x, self.controls[a_index]), dtype=float)
        return np.broadcast_to(s, (len(x), self.dim_x, self.dim_x))

    def f(self, x, a_index: int, y) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.broadcast_to(np.asarray(y, dtype=float), (len(x),))
        out = self.running_cost(x, self.controls[a_index], y)
        return np.broadcast_to(np.asarray(out, dtype=float), (len(x),)).copy()

    def h(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.broadcast_to(np.asarray(self.data_h(x), dtype=float), (len(x),)).copy()


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of :func:`validate_problem`.

    ``margins`` holds the worst sampled slack per assumption; a slack >= 0 (up
    to ``tolerance``) means the assumption held on every sample.
    """

    passed: dict
    margins: dict
    n_samples: int
    worst_dissipativity_quotient: float
    tolerance: float = _CHECK_TOL

    @property
    def ok(self) -> bool:
        return all(self.passed.values())


ASSUMPTIONS = (
    "H1_lipschitz_b_sigma",
    "H1_dissipativity",
    "H2_lipschitz_f",
    "H2_monotone_y",
    "H3_strict_decay",
)


def dissipativity_margin(problem: ControlProblem, x, x_prime, a_index: int = 0) -> float:
    """Normalized dissipativity quotient at one pair of points.

    Returns ``[(x-x').(b(x,a)-b(x',a)) + 0.5*||sigma(x,a)-sigma(x',a)||^2] / |x-x'|^2``,
    which must not exceed ``-gamma`` for a dissipative problem.
    """
    x = np.asarray(x, dtype=float).reshape(1, problem.dim_x)
    xp = np.asarray(x_prime, dtype=float).reshape(1, problem.dim_x)
    dx = x - xp
    dist2 = float(np.sum(dx * dx))
    if dist2 == 0.0:
        raise ValueError("dissipativity margin needs x != x_prime")
    db = problem.b(x, a_index) - problem.b(xp, a_index)
    ds = problem.sigma(x, a_index) - problem.sigma(xp, a_index)
    num = float(np.sum(dx * db)) + 0.5 * float(np.sum(ds * ds))
    return num / dist2


def _pair_quotients(problem: ControlProblem, x, xp, ai, api, y, yp):
    """Sampled quotients for every assumption, vectorized over samples."""
    n = len(x)
    m = problem.n_controls
    diss = np.empty(n)
    lip_bs = np.empty(n)
    lip_f = np.empty(n)
    mono = np.empty(n)
    decay = np.empty(n)
    for k in range(m):
        sel = ai == k
        if not np.any(sel):
            continue
        xs, xps = x[sel], xp[sel]
        dx = xs - xps
        dist2 = np.sum(dx * dx, axis=1)
        b1 = problem.b(xs, k)
        s1 = problem.sigma(xs, k)
        db = b1 - problem.b(xps, k)
        ds = s1 - problem.sigma(xps, k)
        diss[sel] = (np.sum(dx * db, axis=1) + 0.5 * np.sum(ds * ds, axis=(1, 2))) / dist2
        for kp in range(m):
            sel2 = sel & (api == kp)
            if not np.any(sel2):
                continue
            sub = sel2[sel]
            da = np.linalg.norm(problem.controls[k] - problem.controls[kp])
            dist = np.sqrt(dist2[sub])
            b2 = problem.b(xps[sub], kp)
            s2 = problem.sigma(xps[sub], kp)
            num = np.linalg.norm(b1[sub] - b2, axis=1) + np.sqrt(np.sum((s1[sub] - s2) ** 2, axis=(1, 2)))
            lip_bs[sel2] = num / (dist + da)
            f1 = problem.f(xs[sub], k, y[sel2])
            f2 = problem.f(xps[sub], kp, yp[sel2])
            lip_f[sel2] = np.abs(f1 - f2) / (dist + da + np.abs(y[sel2] - yp[sel2]))
        # monotonicity and strict decay in y at fixed (x, a)
        lo = np.minimum(y[sel], yp[sel])
        hi = np.maximum(y[sel], yp[sel])
        f_lo = problem.f(xs, k, lo)
        f_hi = problem.f(xs, k, hi)
        mono[sel] = f_hi - f_lo
        decay[sel] = (f_hi - f_lo) / (hi - lo)
    return diss, lip_bs, lip_f, mono, decay


def validate_problem(
    problem: ControlProblem,
    n_samples: int = DEFAULT_N_SAMPLES,
    box_radius: float = DEFAULT_BOX_RADIUS,
    seed: int = 0,
    tolerance: float = _CHECK_TOL,
) -> ValidationReport:
    """Check the standing assumptions on quasi-random samples in a box.

    Points ``x, x'`` and values ``y, y'`` come from a scrambled Sobol sequence on
    ``[-box_radius, box_radius]``; control pairs are drawn from the control list.
    Failures are reported, never raised.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not box_radius > 0:
        raise ValueError("box_radius must be positive")
    d = problem.dim_x
    sampler = qmc.Sobol(d=2 * d + 2, scramble=True, seed=seed)
    # draw a full power-of-two block (keeps Sobol balance), keep the first n
    u = sampler.random_base2(int(np.ceil(np.log2(max(n_samples, 2)))))[:n_samples]
    pts = box_radius * (2.0 * u - 1.0)
    x, xp = pts[:, :d], pts[:, d : 2 * d]
    y, yp = pts[:, 2 * d], pts[:, 2 * d + 1]
    # avoid coincident samples, which make every quotient undefined
    same = np.all(x == xp, axis=1)
    xp[same] += box_radius * 1e-3
    yp = np.where(y == yp, yp + box_radius * 1e-3, yp)
    rng = np.random.default_rng(seed)
    m = problem.n_controls
    ai = rng.integers(m, size=n_samples)
    api = rng.integers(m, size=n_samples)

    diss, lip_bs, lip_f, mono, decay = _pair_quotients(problem, x, xp, ai, api, y, yp)
    kappa = problem.kappa
    if kappa is None:
        # (H3) with f1 == 0: the gain must not move with y at all
        h3_slack = -np.abs(mono)
    else:
        h3_slack = -kappa - decay

    margins = {
        "H1_lipschitz_b_sigma": float(np.min(problem.lip_b_sigma - lip_bs)),
        "H1_dissipativity": float(np.min(-problem.gamma - diss)),
        "H2_lipschitz_f": float(np.min(problem.lip_f - lip_f)),
        "H2_monotone_y": float(np.min(-mono)),
        "H3_strict_decay": float(np.min(h3_slack)),
    }
    scale = {
        "H1_lipschitz_b_sigma": max(1.0, problem.lip_b_sigma),
        "H1_dissipativity": max(1.0, problem.gamma),
        "H2_lipschitz_f": max(1.0, problem.lip_f),
        "H2_monotone_y": 1.0 + float(np.max(np.abs(mono))),
        "H3_strict_decay": 1.0 + float(np.max(np.abs(mono))),
    }
    passed = {k: bool(v >= -tolerance * scale[k]) for k, v in margins.items()}
    for k, ok in passed.items():
        if not ok:
            logger.info("assumption %s violated on samples (worst slack %.3e)", k, margins[k])
    return ValidationReport(
        passed=passed,
        margins=margins,
        n_samples=n_samples,
        worst_dissipativity_quotient=float(np.max(diss)),
        tolerance=tolerance,
    )


def cost_depends_on_y(problem: ControlProblem, n_samples: int = 256, radius: float = 5.0, seed: int = 0) -> bool:
    """True when sampled gains change with the y-argument."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-radius, radius, size=(n_samples, problem.dim_x))
    y1 = rng.uniform(-radius, radius, size=n_samples)
    y2 = rng.uniform(-radius, radius, size=n_samples)
    for k in range(problem.n_controls):
        if np.any(problem.f(x, k, y1) != problem.f(x, k, y2)):
            return True
    return False


def _matrix_fn(value, d: int) -> Callable[[np.ndarray], np.ndarray]:
    if callable(value):
        return lambda a: np.asarray(value(a), dtype=float).reshape(d, d)
    arr = np.asarray(value, dtype=float).reshape(d, d)
    return lambda a: arr


def _vector_fn(value, d: int) -> Callable[[np.ndarray], np.ndarray]:
    if callable(value):
        return lambda a: np.asarray(value(a), dtype=float).reshape(d)
    arr = np.asarray(value, dtype=float).reshape(d)
    return lambda a: arr


def make_ou_problem(
    B,
    D,
    Sigma,
    controls: Sequence,
    gamma: float,
    cost: CostFn,
    data_h: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    *,
    dim_x: int = 1,
    lip_f: float = 1.0,
    lip_b_sigma: Optional[float] = None,
    kappa: Optional[float] = None,
    intensity_total: float = 1.0,
    n_check: int = 2_000,
    seed: int = 0,
    name: str = "ou",
) -> ControlProblem:
    """Controlled Ornstein-Uhlenbeck problem ``b(x,a) = B(a)x + D(a)``, ``sigma(x,a) = Sigma(a)``.

    ``B``, ``D`` and ``Sigma`` are either constants or functions of the control
    point. ``B(a)`` must be uniformly stable, ``x.B(a)x <= -gamma |x|^2``; this is
    checked on ``n_check`` random directions per control and a ``ValueError`` is
    raised on violation.
    """
    d = int(dim_x)
    ctrl = _as_controls(controls)
    Bf, Df, Sf = _matrix_fn(B, d), _vector_fn(D, d), _matrix_fn(Sigma, d)

    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_check, d))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    worst = -np.inf
    for a in ctrl:
        q = np.einsum("ni,ij,nj->n", z, Bf(a), z)
        worst = max(worst, float(np.max(q)))
        # the symmetric part fixes the exact stability rate
        worst = max(worst, float(np.max(np.linalg.eigvalsh(0.5 * (Bf(a) + Bf(a).T)))))
    if worst > -gamma + _CHECK_TOL * max(1.0, gamma):
        raise ValueError(f"B is not uniformly stable at rate gamma={gamma}: max x.B(a)x/|x|^2 = {worst:.6g}")

    lip_b = max(float(np.linalg.norm(Bf(a), 2)) for a in ctrl)
    # Lipschitz in a is estimated by finite differences between listed controls
    lip_a = 0.0
    for i in range(len(ctrl)):
        for j in range(i + 1, len(ctrl)):
            da = np.linalg.norm(ctrl[i] - ctrl[j])
            jump = np.linalg.norm(Df(ctrl[i]) - Df(ctrl[j])) + np.linalg.norm(Sf(ctrl[i]) - Sf(ctrl[j]))
            lip_a = max(lip_a, float(jump / da))

    def drift(x, a):
        return x @ Bf(a).T + Df(a)

    def diffusion(x, a):
        return np.broadcast_to(Sf(a), (len(x), d, d))

    if data_h is None:
        data_h = _zero_h

    return ControlProblem(
        dim_x=d,
        controls=ctrl,
        drift=drift,
        diffusion=diffusion,
        running_cost=cost,
        data_h=data_h,
        gamma=float(gamma),
        lip_b_sigma=float(lip_b_sigma) if lip_b_sigma is not None else max(lip_b, lip_a),
        lip_f=float(lip_f),
        kappa=kappa,
        intensity_total=float(intensity_total),
        name=name,
        meta={"family": "ou"},
    )


def _zero_h(x):
    return np.zeros(len(x))
