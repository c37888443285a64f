"""Regenerate the pinned reference values used by the test suite.

Writes ``tests/golden/two_control.json``: the fine-grid ergodic constant of
the two-control OU instance (policy iteration at h=5e-4, beta=1e-3 on
[-10, 10]) next to an independent quadrature value for the sign feedback.
"""

import argparse
import json
import pathlib
import time

import numpy as np
from scipy import integrate

from ergodic_hjb.builtins import BUILTINS
from ergodic_hjb.grid import Grid
from ergodic_hjb.pde_solver import solve_discounted


def quadrature_lambda() -> float:
    # stationary density of dX = (-X + sign X) dt + dW is proportional to exp(-(|x|-1)^2)
    dens = lambda x: np.exp(-((abs(x) - 1.0) ** 2))
    gain = lambda x: (-x * x + 2.0 * abs(x)) * dens(x)
    z = integrate.quad(dens, -np.inf, np.inf, epsabs=1e-13)[0]
    return integrate.quad(gain, -np.inf, np.inf, epsabs=1e-13)[0] / z


def fine_grid_lambda(h: float, beta: float, radius: float) -> dict:
    problem = BUILTINS["ou_two_control"].problem()
    grid = Grid([(-radius, radius)], h)
    t0 = time.perf_counter()
    field = solve_discounted(problem, grid, beta, tol=1e-8, max_iter=500)
    return {
        "lambda": float(beta * field.values[grid.anchor]),
        "h": h,
        "beta": beta,
        "bounds": [-radius, radius],
        "iterations": field.iterations,
        "residual": field.residual,
        "seconds": round(time.perf_counter() - t0, 3),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parents[1] / "tests" / "golden" / "two_control.json"))
    args = ap.parse_args()
    record = {"instance": "ou_two_control", "fine_grid": fine_grid_lambda(5e-4, 1e-3, 10.0), "quadrature_lambda": quadrature_lambda()}
    pathlib.Path(args.out).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(json.dumps(record, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
