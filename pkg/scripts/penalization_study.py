"""How fast the penalized value approaches the discounted one as n grows.

Solves the penalized PDE on the two-control instance for a range of n and
prints ``gap = v^beta(0) - v^{beta,n}(0, a)`` together with ``n * gap``.
A settling ``n * gap`` is the 1/n rate. With ``--bsde`` the regression
Monte Carlo values are printed alongside.
"""

import argparse

from ergodic_hjb.bsde_solver import penalization_sweep, truncation_horizon
from ergodic_hjb.builtins import BUILTINS
from ergodic_hjb.grid import Grid
from ergodic_hjb.pde_solver import solve_discounted, solve_penalized


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="penalization rate study")
    ap.add_argument("--beta", type=float, default=0.5)
    ap.add_argument("--h", type=float, default=0.01)
    ap.add_argument("--n", type=float, nargs="+", default=[2.0, 10.0, 50.0, 200.0, 1000.0])
    ap.add_argument("--bsde", action="store_true", help="also run the penalized BSDE sweep")
    ap.add_argument("--paths", type=int, default=20000)
    args = ap.parse_args(argv)

    problem = BUILTINS["ou_two_control"].problem()
    grid = Grid([(-6.0, 6.0)], args.h)
    v = float(solve_discounted(problem, grid, args.beta).at([0.0])[0])
    print(f"discounted v^beta(0) = {v:.10f}")
    bsde = {}
    if args.bsde:
        rows = penalization_sweep(problem, [0.0], [1.0], args.beta, args.n, truncation_horizon(args.beta, 1e-3), 0.02, args.paths, seed=7)
        bsde = {n: (y, se) for n, y, se in rows}
    print(f"{'n':>8} {'v_n(0,1)':>14} {'gap':>12} {'n*gap':>10} {'rel gap':>9}" + ("  bsde Y0 (SE)" if bsde else ""))
    for n in args.n:
        pen = solve_penalized(problem, grid, args.beta, n)
        vn = float(pen.values[1, grid.anchor])
        gap = v - vn
        line = f"{n:8g} {vn:14.10f} {gap:12.6f} {n * gap:10.4f} {gap / abs(v):9.4f}"
        if n in bsde:
            line += f"  {bsde[n][0]:.4f} ({bsde[n][1]:.4f})"
        print(line)


if __name__ == "__main__":
    main()
