"""Builtin problem families and the catalog of reference instances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core_model import ControlProblem, make_ou_problem

_COST_KEYS = ("const", "x", "x2", "a", "ax", "y")


@dataclass(frozen=True)
class PolynomialCost:
    """``f(x,a,y) = const + x*sum(x) + x2*|x|^2 + a*sum(a) + ax*(a.x) + y*y``.

    A nonpositive ``y`` coefficient keeps the gain nonincreasing in y.
    """

    const: float = 0.0
    x: float = 0.0
    x2: float = 0.0
    a: float = 0.0
    ax: float = 0.0
    y: float = 0.0

    @classmethod
    def from_dict(cls, spec: Optional[dict]) -> "PolynomialCost":
        spec = dict(spec or {})
        unknown = set(spec) - set(_COST_KEYS)
        if unknown:
            raise ValueError(f"unknown cost coefficients: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in spec.items()})

    def __call__(self, x, a, y):
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float).reshape(-1)
        d = x.shape[1]
        ad = np.resize(a, d)
        out = self.const + self.x * x.sum(axis=1) + self.x2 * np.sum(x * x, axis=1)
        out = out + self.a * a.sum() + self.ax * (x @ ad)
        if self.y:
            out = out + self.y * np.asarray(y, dtype=float)
        return out

    def h(self, x):
        return self(x, np.zeros(1), np.zeros(len(x)))

    def lipschitz_on(self, radius: float, control_radius: float) -> float:
        """Lipschitz constant in (x, a, y) on the box of the given radius."""
        return float(
            max(abs(self.x) + 2 * abs(self.x2) * radius + abs(self.ax) * control_radius, abs(self.a) + abs(self.ax) * radius, abs(self.y))
        )

    @property
    def kappa(self) -> Optional[float]:
        return -self.y if self.y < 0 else None


def _square(value, d: int) -> np.ndarray:
    """Scalar -> multiple of the identity, length-d vector -> diagonal, else a d x d matrix."""
    arr = np.asarray(value, dtype=float)
    if arr.size == 1:
        return float(arr.reshape(-1)[0]) * np.eye(d)
    if arr.ndim == 1 and arr.size == d:
        return np.diag(arr)
    if arr.size != d * d:
        raise ValueError(f"expected a scalar, {d} diagonal entries or a {d}x{d} matrix")
    return arr.reshape(d, d)


def ou_from_params(params: dict, *, lip_radius: float = 6.0) -> ControlProblem:
    """Build an OU-family problem from plain parameters (as found in a config)."""
    controls = np.asarray(params.get("controls", [0.0]), dtype=float)
    d = int(params.get("dim_x", 1))
    ctrl2 = controls.reshape(len(controls), -1)
    B = _square(params.get("B", -1.0), d)
    sigma = _square(params.get("Sigma", 1.0), d)
    D0 = np.asarray(params.get("D", 0.0), dtype=float)
    D_a = float(params.get("D_control", 0.0))

    def D(a):
        return np.resize(D0, d) + D_a * np.resize(np.asarray(a, dtype=float), d)

    cost = PolynomialCost.from_dict(params.get("cost", {"x2": 1.0}))
    h_spec = PolynomialCost.from_dict(params.get("data_h", {}))
    gamma = float(params.get("gamma", -np.max(np.linalg.eigvalsh(0.5 * (B + B.T)))))
    lip_f = params.get("lip_f")
    if lip_f is None:
        lip_f = cost.lipschitz_on(lip_radius, float(np.max(np.abs(ctrl2))))
    return make_ou_problem(
        B=B,
        D=D,
        Sigma=sigma,
        controls=ctrl2,
        gamma=gamma,
        cost=cost,
        data_h=h_spec.h,
        dim_x=d,
        lip_f=max(float(lip_f), 1e-12),
        kappa=cost.kappa,
        intensity_total=float(params.get("intensity_total", 1.0)),
        name=str(params.get("name", "ou")),
    )


def polynomial_from_params(params: dict, *, lip_radius: float = 6.0) -> ControlProblem:
    """1-d problem with polynomial drift ``b(x,a) = sum_k c_k x^k + drift_control * a``."""
    coeffs = np.asarray(params.get("drift_coeffs", [0.0, -1.0]), dtype=float)
    drift_a = float(params.get("drift_control", 0.0))
    sigma = float(params.get("sigma", 1.0))
    controls = np.asarray(params.get("controls", [0.0]), dtype=float).reshape(-1, 1)
    cost = PolynomialCost.from_dict(params.get("cost", {"x2": 1.0}))
    h_spec = PolynomialCost.from_dict(params.get("data_h", {}))
    poly = np.polynomial.Polynomial(coeffs)
    dpoly = poly.deriv()

    def drift(x, a):
        return poly(x) + drift_a * float(a[0])

    def diffusion(x, a):
        return np.full((len(x), 1, 1), sigma)

    r = lip_radius
    grid = np.linspace(-r, r, 2001)
    lip_b = float(np.max(np.abs(dpoly(grid)))) + abs(drift_a)
    gamma = params.get("gamma")
    if gamma is None:
        # sup of b' bounds the one-sided Lipschitz constant in 1-d
        gamma = -float(np.max(dpoly(np.linspace(-10 * r, 10 * r, 20001))))
    lip_f = params.get("lip_f")
    if lip_f is None:
        lip_f = cost.lipschitz_on(r, float(np.max(np.abs(controls))))
    return ControlProblem(
        dim_x=1,
        controls=controls,
        drift=drift,
        diffusion=diffusion,
        running_cost=cost,
        data_h=h_spec.h,
        gamma=float(gamma),
        lip_b_sigma=max(lip_b, 1e-12),
        lip_f=max(float(lip_f), 1e-12),
        kappa=cost.kappa,
        intensity_total=float(params.get("intensity_total", 1.0)),
        name=str(params.get("name", "custom-polynomial")),
        meta={"family": "custom-polynomial"},
    )


FAMILIES = {"ou": ou_from_params, "custom-polynomial": polynomial_from_params}


def problem_from_spec(spec: dict) -> ControlProblem:
    spec = dict(spec)
    if "builtin" in spec:
        return BUILTINS[spec["builtin"]].problem()
    family = spec.pop("family", None)
    if family not in FAMILIES:
        raise ValueError(f"unknown problem family {family!r}; expected one of {sorted(FAMILIES)}")
    radius = float(spec.pop("lip_radius", 6.0))
    return FAMILIES[family](spec, lip_radius=radius)


@dataclass(frozen=True)
class BuiltinInstance:
    name: str
    provenance: str
    reference_lambda: float
    params: dict

    def problem(self) -> ControlProblem:
        return ou_from_params(dict(self.params, name=self.name))

    def catalog_line(self) -> str:
        return f"{self.name} (λ={self.reference_lambda:g} {self.provenance})"


# Two-control reference value: the same policy-iteration solver at h=5e-4,
# beta=1e-3 on [-10, 10]; regenerate with scripts/compute_golden.py.
TWO_CONTROL_LAMBDA = 0.6127650593099484

BUILTINS = {
    "ou_singleton_quadratic": BuiltinInstance(
        name="ou_singleton_quadratic",
        provenance="closed form",
        reference_lambda=1.0,
        params={
            "controls": [0.0],
            "B": -1.0,
            "D": 0.0,
            "Sigma": float(np.sqrt(2.0)),
            "gamma": 1.0,
            "cost": {"x2": 1.0},
            "lip_f": 20.0,
            "intensity_total": 1.0,
        },
    ),
    "ou_two_control": BuiltinInstance(
        name="ou_two_control",
        provenance="fine-grid oracle",
        reference_lambda=TWO_CONTROL_LAMBDA,
        params={
            "controls": [-1.0, 1.0],
            "B": -1.0,
            "D": 0.0,
            "D_control": 1.0,
            "Sigma": 1.0,
            "gamma": 1.0,
            "cost": {"x2": -1.0, "ax": 2.0},
            "lip_f": 22.0,
            "intensity_total": 2.0,
        },
    ),
}


def list_builtins() -> str:
    """Catalog text, one instance per line, in stable (sorted) order."""
    return "\n".join(BUILTINS[k].catalog_line() for k in sorted(BUILTINS))
