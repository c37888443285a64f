"""Tensor grids and the monotone finite-difference generator."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from .core_model import ControlProblem

BOUNDARY_POLICIES = ("one-sided-extrapolation", "dirichlet-from-growth")
DRIFT_SCHEMES = ("hybrid", "upwind")


class MonotonicityError(RuntimeError):
    """The wide-stencil split lost diagonal dominance; the scheme would not be monotone."""


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on a box, at most two dimensions.

    ``drift_scheme="hybrid"`` centers the drift difference wherever the
    diffusion coefficient keeps the stencil monotone and upwinds elsewhere;
    ``"upwind"`` always upwinds.
    """

    bounds: tuple
    h: float
    boundary: str = "one-sided-extrapolation"
    drift_scheme: str = "hybrid"

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in np.atleast_2d(np.asarray(self.bounds, dtype=float)))
        object.__setattr__(self, "bounds", bounds)
        if not self.h > 0:
            raise ValueError("grid spacing h must be positive")
        if len(bounds) not in (1, 2):
            raise ValueError("only 1-d and 2-d grids are supported")
        if self.boundary not in BOUNDARY_POLICIES:
            raise ValueError(f"unknown boundary policy {self.boundary!r}")
        if self.drift_scheme not in DRIFT_SCHEMES:
            raise ValueError(f"unknown drift scheme {self.drift_scheme!r}")
        for lo, hi in bounds:
            if not hi > lo:
                raise ValueError("grid bounds must be ordered")
            cells = (hi - lo) / self.h
            if abs(cells - round(cells)) > 1e-9 * max(1.0, cells):
                raise ValueError(f"(x_max - x_min)/h = {cells} is not an integer")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @cached_property
    def shape(self) -> tuple:
        return tuple(int(round((hi - lo) / self.h)) + 1 for lo, hi in self.bounds)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def axes(self) -> list:
        return [lo + self.h * np.arange(n) for (lo, _), n in zip(self.bounds, self.shape)]

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape (size, dim), C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(self.dim, -1)
        mask = np.zeros(self.size, dtype=bool)
        for i, n in enumerate(self.shape):
            mask |= (idx[i] == 0) | (idx[i] == n - 1)
        return mask

    @property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    @cached_property
    def anchor(self) -> int:
        """Node nearest the origin (lowest index on ties)."""
        return int(np.argmin(np.sum(self.points**2, axis=1)))

    def nearest(self, x) -> np.ndarray:
        """Flat index of the nearest node for each row of ``x`` (clipped to the box)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        multi = []
        for i, ((lo, _), n) in enumerate(zip(self.bounds, self.shape)):
            k = np.rint((x[:, i] - lo) / self.h).astype(np.int64)
            multi.append(np.clip(k, 0, n - 1))
        return np.ravel_multi_index(tuple(multi), self.shape)

    def describe(self) -> dict:
        return {"bounds": [list(b) for b in self.bounds], "h": self.h, "shape": list(self.shape), "boundary": self.boundary, "drift_scheme": self.drift_scheme}


def assemble_generator(problem: ControlProblem, grid: Grid, a_index: int) -> sparse.csr_matrix:
    """Sparse matrix of the discrete operator ``L^a`` on every node.

    Drift terms are upwinded (or centered where monotone, see
    :class:`Grid`), second derivatives centered; for d=2 the cross
    derivative uses the wide-stencil split along the diagonal matching the sign
    of the off-diagonal diffusion entry. Boundary rows follow the grid policy:
    under one-sided extrapolation the ghost node is ``2 v_0 - v_1`` (which kills
    the normal second difference) and outward drift is dropped; under the
    Dirichlet policy boundary rows are zero.
    """
    if problem.dim_x != grid.dim:
        raise ValueError("grid dimension does not match the problem")
    pts = grid.points
    N, d, hh = grid.size, grid.dim, grid.h
    b = problem.b(pts, a_index)
    sig = problem.sigma(pts, a_index)
    A = np.einsum("nij,nkj->nik", sig, sig)

    idx = np.indices(grid.shape).reshape(d, -1)
    flat = np.arange(N)
    rows, cols, vals = [], [], []

    def add(mask, offsets, coef):
        if not np.any(mask):
            return
        multi = [idx[i][mask] + offsets[i] for i in range(d)]
        nb = np.ravel_multi_index(tuple(multi), grid.shape)
        rows.append(flat[mask])
        cols.append(nb)
        vals.append(coef[mask])
        rows.append(flat[mask])
        cols.append(flat[mask])
        vals.append(-coef[mask])

    if d == 2:
        a12 = A[:, 0, 1]
        cross_ok = np.ones(N, dtype=bool)
        for i in range(d):
            cross_ok &= (idx[i] > 0) & (idx[i] < grid.shape[i] - 1)
    else:
        a12 = np.zeros(N)
        cross_ok = np.zeros(N, dtype=bool)
    a12_eff = np.where(cross_ok, a12, 0.0)

    for i in range(d):
        lower = idx[i] == 0
        upper = idx[i] == grid.shape[i] - 1
        # second order: 0.5 * (a_ii - |a_ij|) / h^2 on each axial neighbor
        diff = 0.5 * (A[:, i, i] - np.abs(a12_eff)) / hh**2
        if np.any(diff < -1e-12 * np.maximum(1.0, np.abs(A[:, i, i]) / hh**2)):
            raise MonotonicityError("diffusion matrix is not diagonally dominant on the grid")
        diff = np.maximum(diff, 0.0)
        interior_i = ~lower & ~upper
        e = [0] * d
        e[i] = 1
        em = [0] * d
        em[i] = -1
        add(interior_i, e, diff)
        add(interior_i, em, diff)
        # drift: forward difference when b_i >= 0, backward otherwise
        fwd = np.where(b[:, i] >= 0, b[:, i], 0.0) / hh
        bwd = np.where(b[:, i] < 0, -b[:, i], 0.0) / hh
        if grid.drift_scheme == "hybrid":
            central = interior_i & (np.abs(b[:, i]) / (2 * hh) <= diff)
            fwd = np.where(central, 0.5 * b[:, i] / hh, fwd)
            bwd = np.where(central, -0.5 * b[:, i] / hh, bwd)
        add(~upper, e, fwd)
        add(~lower, em, bwd)

    if d == 2:
        pos = cross_ok & (a12 > 0)
        neg = cross_ok & (a12 < 0)
        c = 0.5 * np.abs(a12) / hh**2
        add(pos, [1, 1], c)
        add(pos, [-1, -1], c)
        add(neg, [1, -1], c)
        add(neg, [-1, 1], c)

    L = sparse.coo_matrix(
        (np.concatenate(vals) if vals else np.zeros(0),
         (np.concatenate(rows) if rows else np.zeros(0, int), np.concatenate(cols) if cols else np.zeros(0, int))),
        shape=(N, N),
    ).tocsr()
    L.sum_duplicates()
    if grid.boundary == "dirichlet-from-growth":
        keep = sparse.diags(grid.interior_mask.astype(float))
        L = (keep @ L).tocsr()
    return L


def check_monotone(L: sparse.csr_matrix) -> bool:
    """True when every off-diagonal entry is nonnegative."""
    off = L - sparse.diags(L.diagonal())
    ok_sign = off.data.size == 0 or float(off.data.min()) >= -1e-12 * max(1.0, float(np.abs(L.data).max()))
    return bool(ok_sign)
