"""Auxiliary parameter vector and the constants derived from it.

The vector ``(eta, alpha, L, beta, beta_prime, xi, n0)`` controls the growth,
modulus and envelope exponents used by the separation events.  Validation
reports every violated constraint with both sides of the inequality so that
a bad configuration can be fixed without re-deriving anything by hand.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "ParamVector",
    "DerivedConstants",
    "ParameterError",
    "InfeasibleError",
    "Violation",
    "DEFAULT_PARAMS",
    "validate_params",
    "derive_constants",
    "kappas",
    "default_wp",
    "delta_of_r",
    "eps0_of_r",
]

R0_GRID_BITS = 20


class ParameterError(ValueError):
    """Raised for parameter values outside their admissible ranges."""


class InfeasibleError(ParameterError):
    """Raised when no separation radius makes Delta(r) positive."""


@dataclass(frozen=True)
class ParamVector:
    eta: float
    alpha: float
    L: float
    beta: float
    beta_prime: float
    xi: float
    n0: int

    @classmethod
    def from_mapping(cls, data: Mapping[str, object]) -> "ParamVector":
        missing = [k for k in ("eta", "alpha", "L", "beta", "beta_prime", "xi", "n0") if k not in data]
        if missing:
            raise ParameterError(f"missing parameter(s): {', '.join(missing)}")
        n0 = data["n0"]
        if isinstance(n0, str):
            n0 = float(n0)
        if float(n0) != int(float(n0)):
            raise ParameterError(f"n0 must be an integer, got {n0!r}")
        return cls(
            eta=float(data["eta"]),
            alpha=float(data["alpha"]),
            L=float(data["L"]),
            beta=float(data["beta"]),
            beta_prime=float(data["beta_prime"]),
            xi=float(data["xi"]),
            n0=int(float(n0)),
        )

    def as_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ParamVector":
        d = self.as_dict()
        d.update(changes)
        return ParamVector(**d)


DEFAULT_PARAMS = ParamVector(eta=1.01, alpha=0.49, L=1.0, beta=0.49, beta_prime=0.45, xi=0.9, n0=3)


@dataclass(frozen=True)
class Violation:
    constraint: str
    description: str
    lhs: float
    rhs: float

    def __str__(self) -> str:
        return f"({self.constraint}) {self.description}: lhs={self.lhs:.6g}, rhs={self.rhs:.6g}"


def _check_ranges(p: ParamVector) -> None:
    for name in ("eta", "alpha", "L", "beta", "beta_prime", "xi"):
        v = getattr(p, name)
        if not math.isfinite(v):
            raise ParameterError(f"{name} is not finite: {v!r}")
    problems = []
    if not p.eta > 1:
        problems.append(f"eta={p.eta} not in (1, inf)")
    if not 0 < p.alpha < 0.5:
        problems.append(f"alpha={p.alpha} not in (0, 1/2)")
    if not p.L > 0:
        problems.append(f"L={p.L} not in (0, inf)")
    if not 1 / 3 <= p.beta < 0.5:
        problems.append(f"beta={p.beta} not in [1/3, 1/2)")
    if not 1 / 3 <= p.beta_prime < 0.5:
        problems.append(f"beta_prime={p.beta_prime} not in [1/3, 1/2)")
    if not 0 < p.xi < 1:
        problems.append(f"xi={p.xi} not in (0, 1)")
    if p.n0 < 1:
        problems.append(f"n0={p.n0} is not a positive integer")
    if problems:
        raise ParameterError("; ".join(problems))


def _partial_sum(a: float, n: int) -> float:
    return float(sum(a**j for j in range(1, n + 1)))


def validate_params(p: ParamVector) -> list[Violation]:
    """Check constraints (a)-(d); an empty list means the vector is admissible.

    Raises:
        ParameterError: if a field is non-finite or outside its declared range.
    """
    _check_ranges(p)
    out: list[Violation] = []
    lo = _partial_sum(p.alpha, p.n0)
    hi = _partial_sum(p.alpha, p.n0 + 1)
    if not lo <= p.xi:
        out.append(Violation("a", "sum_{j<=n0} alpha^j <= xi", lo, p.xi))
    if not p.xi < hi:
        out.append(Violation("a", "xi < sum_{j<=n0+1} alpha^j", p.xi, hi))
    ratio = p.beta_prime / p.beta
    if not p.alpha < ratio:
        out.append(Violation("b", "alpha < beta'/beta", p.alpha, ratio))
    if not ratio < 1:
        out.append(Violation("b", "beta'/beta < 1", ratio, 1.0))
    c = p.beta_prime - p.eta / 2 + 1.5 * p.alpha
    if not c > 0:
        out.append(Violation("c", "beta' - eta/2 + 3 alpha/2 > 0", c, 0.0))
    d = min(p.beta_prime + 1, p.beta_prime - p.eta / 2 + 1.5 * p.xi)
    if not d > p.eta:
        out.append(Violation("d", "min(beta'+1, beta'-eta/2+3 xi/2) > eta", d, p.eta))
    return out


def kappas(p: ParamVector) -> tuple[float, float, float]:
    k1 = min(p.beta_prime + 1, p.beta_prime - p.eta / 2 + 1.5 * p.xi)
    k2 = p.alpha**p.n0 / 4
    k3 = p.beta_prime - p.eta / 2 + 1.5 * p.alpha
    return k1, k2, k3


def default_wp(p: ParamVector) -> float:
    k1, _, k3 = kappas(p)
    return 0.05 * min(k1 - p.eta, k3)


def _delta_numerator(r, eta: float, k_star: float, k1: float, wp: float):
    return r**eta / 4 - 2 * k_star * r ** (k1 - wp)


def delta_of_r(r, p: ParamVector, k_star: float, wp: float):
    """Separation threshold for the rap-norm at radius ``r`` (vectorised)."""
    k1, _, _ = kappas(p)
    r = np.asarray(r, dtype=float)
    num = _delta_numerator(r, p.eta, k_star, k1, wp)
    val = 0.5 * np.minimum(num / (2 + 2 * r**p.beta), 1.0)
    return float(val) if val.ndim == 0 else val


def eps0_of_r(r: float, p: ParamVector, psi_mass: float = 1.0) -> float:
    """Largest admissible approximation parameter for radius ``r``."""
    k1, k2, k3 = kappas(p)
    cap = min(r, 1 / (8 * psi_mass), 1.0)
    return float(min(cap, r ** ((k1 - k3) / k2)))


@dataclass(frozen=True)
class DerivedConstants:
    kappa1: float
    kappa2: float
    kappa3: float
    wp: float
    k_star: float
    r0: float
    params: ParamVector = field(repr=False)

    def delta(self, r):
        return delta_of_r(r, self.params, self.k_star, self.wp)

    def eps0(self, r: float, psi_mass: float = 1.0) -> float:
        return eps0_of_r(r, self.params, psi_mass)

    @property
    def delta_fn(self) -> Callable:
        return self.delta

    def as_dict(self) -> dict:
        return {
            "kappa1": self.kappa1,
            "kappa2": self.kappa2,
            "kappa3": self.kappa3,
            "wp": self.wp,
            "k_star": self.k_star,
            "r0": self.r0,
            "delta_r0": self.delta(self.r0),
            "eps0_r0": self.eps0(self.r0),
        }


def derive_constants(p: ParamVector, k_star: float = 1.0, wp: float | None = None) -> DerivedConstants:
    """Compute the kappas, the margin ``wp`` and the largest admissible radius r0.

    r0 is searched on the dyadic grid ``k 2^-20`` in (0, 1]; it is the last grid
    point before the numerator of Delta(r) first becomes non-positive.

    Raises:
        ParameterError: if ``p`` is invalid, ``k_star <= 0`` or ``wp`` is out of range.
        InfeasibleError: if Delta is not positive even at the first grid point.
    """
    bad = validate_params(p)
    if bad:
        raise ParameterError("invalid parameter vector: " + "; ".join(map(str, bad)))
    if not (math.isfinite(k_star) and k_star > 0):
        raise ParameterError(f"K* must be positive, got {k_star}")
    k1, k2, k3 = kappas(p)
    if wp is None:
        wp = default_wp(p)
    if not (0 < wp < min(k1, k3)) or not (k1 - wp > p.eta):
        raise ParameterError(
            f"wp={wp} must lie in (0, {min(k1, k3):.6g}) with kappa1 - wp > eta (kappa1={k1:.6g}, eta={p.eta})"
        )
    grid = np.arange(1, 2**R0_GRID_BITS + 1, dtype=float) / 2**R0_GRID_BITS
    ok = _delta_numerator(grid, p.eta, k_star, k1, wp) > 0
    if not ok[0]:
        raise InfeasibleError(f"K*={k_star} too large: Delta(r) <= 0 already at r=2^-{R0_GRID_BITS}")
    bad_idx = np.flatnonzero(~ok)
    r0 = float(grid[-1] if bad_idx.size == 0 else grid[bad_idx[0] - 1])
    return DerivedConstants(kappa1=k1, kappa2=k2, kappa3=k3, wp=float(wp), k_star=float(k_star), r0=r0, params=p)
