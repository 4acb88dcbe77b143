"""Deterministic closed-form kernels used by the separation analysis.

Everything here is pure and reentrant.  Root finding is plain bisection run
to floating-point resolution: every target function is monotone on its
bracket, so bisection always converges and is bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from scipy import integrate, special

__all__ = [
    "KernelError",
    "Parabola",
    "IndexClassification",
    "imc_pick_N",
    "imc_bound",
    "integral_I",
    "IntegralResult",
    "allocate_exponents",
    "contact_time",
    "A_of_r",
    "t_star",
    "parabolas_disjoint",
    "classify_indices",
]

BISECT_TOL = 1e-12
HORIZON = 1e6


class KernelError(ValueError):
    """Raised when a kernel's hypotheses are violated or no solution exists."""


def _bisect(f, lo: float, hi: float, tol: float = BISECT_TOL) -> float:
    """Root of an increasing ``f`` on ``[lo, hi]`` with ``f(lo) <= 0 <= f(hi)``.

    Iterates until the bracket is below ``tol`` and no longer shrinks in
    floating point, so the result is as tight as double precision allows.
    """
    flo = f(lo)
    if flo == 0:
        return lo
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if f(mid) <= 0:
            lo = mid
        else:
            hi = mid
    # bracket is at float resolution here; tol is checked for the record
    assert hi - lo <= max(tol, 4 * math.ulp(hi))
    return lo if abs(f(lo)) <= abs(f(hi)) else hi


@dataclass(frozen=True)
class Parabola:
    center: float
    birth: float
    eps_half: float
    exponent: float

    def __post_init__(self):
        if not self.eps_half > 0:
            raise KernelError(f"shoulder must be positive, got {self.eps_half}")
        if not 0 < self.exponent < 0.5:
            raise KernelError(f"exponent must lie in (0, 1/2), got {self.exponent}")

    def width(self, t: float) -> float:
        """Half-width of the section at time ``t`` (``t >= birth``)."""
        return self.eps_half + max(t - self.birth, 0.0) ** self.exponent

    def section(self, t: float) -> tuple[float, float]:
        w = self.width(t)
        return self.center - w, self.center + w


@dataclass(frozen=True)
class IndexClassification:
    critical: frozenset
    lateral: frozenset
    all: frozenset


def imc_pick_N(a: float, xi_prime: float) -> int:
    """Smallest N' whose partial sums of ``a^j`` bracket ``xi_prime``."""
    if not 0 < a < 0.5:
        raise KernelError(f"a must lie in (0, 1/2), got {a}")
    if xi_prime < a:
        raise KernelError(f"xi'={xi_prime} is below the first partial sum a={a}")
    if xi_prime >= a / (1 - a):
        raise KernelError(f"xi'={xi_prime} is at or above the geometric cap a/(1-a)={a / (1 - a):.6g}")
    s, n = a, 1
    while True:
        nxt = s + a ** (n + 1)
        if xi_prime < nxt:
            return n
        s, n = nxt, n + 1


def imc_bound(f0: float, b: float, c: float, a: float, xi_prime: float, N_prime: int, t: float) -> float:
    """Improved-modulus ceiling on ``|f(t) - f(0)|`` for the integral inequality
    ``|f(t)-f(0)| <= b t + c (int_0^t |f|)^a``.
    """
    if not 0 < a < 0.5:
        raise KernelError(f"a must lie in (0, 1/2), got {a}")
    if b < 0 or c < 0:
        raise KernelError(f"b and c must be nonnegative, got b={b}, c={c}")
    if not 0 <= t <= 1:
        raise KernelError(f"t must lie in [0, 1], got {t}")
    if not 0 < xi_prime < 1 or N_prime < 1:
        raise KernelError(f"need xi' in (0,1) and N' >= 1, got {xi_prime}, {N_prime}")
    cc = c ** (1 / (1 - a)) + 1
    powers = [a**j for j in range(1, N_prime + 1)]
    first = cc * sum(abs(f0) ** p for p in powers)
    second = b + cc * sum((b / 2) ** p for p in powers) + cc
    return first * t**a + second * t**xi_prime


@dataclass(frozen=True)
class IntegralResult:
    finite: bool
    value: float


def _beta_integral(a: float, c: float) -> float:
    val = math.exp(special.betaln(a + 1, c + 1))
    if math.isfinite(val) and val > 0:
        return val
    # integrable endpoint singularities handled by the algebraic weight
    return integrate.quad(lambda r: 1.0, 0.0, 1.0, weight="alg", wvar=(a, c))[0]


def integral_I(a: float, b: float, c: float, T: float) -> IntegralResult:
    """``int_0^T r^a int_r^T s^b (s-r)^c ds dr``; reports divergence by flag."""
    if not (math.isfinite(T) and T > 0):
        raise KernelError(f"T must be positive and finite, got {T}")
    if not (a > -1 and c > -1 and a + b + c > -2):
        return IntegralResult(False, math.inf)
    e = a + b + c + 2
    return IntegralResult(True, _beta_integral(a, c) * T**e / e)


def allocate_exponents(a: float, b: float, c: float) -> tuple[float, float]:
    """Split ``b < 0`` into ``b1 + b2`` with ``b1, b2 < 0``, ``a+b1 > -1``, ``b2+c > -1``.

    ``b1`` is the midpoint of its feasible open interval
    ``(max(b, -1-a), min(0, b+1+c))``, so both strict inequalities keep half
    the slack as margin.
    """
    if not (a > -1 and c > -1 and b < 0):
        raise KernelError(f"need a, c > -1 and b < 0, got a={a}, b={b}, c={c}")
    if not a + b + c > -2:
        raise KernelError(f"need a+b+c > -2, got {a + b + c}")
    lo = max(b, -1 - a)
    hi = min(0.0, b + 1 + c)
    b1 = 0.5 * (lo + hi)
    return b1, b - b1


def _contact_root(gap: float, w0: float, birth_p: float, birth_q: float, exp_p: float, exp_q: float, start: float) -> float:
    def lhs(t):
        return w0 + (t - birth_p) ** exp_p + (t - birth_q) ** exp_q - gap

    if lhs(start) >= 0:
        return start
    span = 1.0
    while lhs(start + span) < 0:
        span *= 2
        if start + span > HORIZON:
            raise KernelError(f"contact time beyond horizon {HORIZON:g}")
    return _bisect(lhs, start, start + span)


def contact_time(x_i: float, s_i: float, y: float, t_j: float, eps: float, beta: float) -> float:
    """First time after ``t_j`` at which the two envelope parabolas meet."""
    if not t_j > s_i:
        raise KernelError(f"need t_j > s_i, got t_j={t_j}, s_i={s_i}")
    if not eps > 0:
        raise KernelError(f"eps must be positive, got {eps}")
    h = math.sqrt(eps)
    return _contact_root(abs(y - x_i), 2 * h, s_i, t_j, beta, beta, t_j)


def A_of_r(r: float, beta: float, beta_prime: float) -> float:
    """Root ``A > q`` of ``A^beta + (A - q)^beta = 2`` with ``q = r^(1-beta'/beta)``."""
    if not 0 < r <= 1:
        raise KernelError(f"r must lie in (0, 1], got {r}")
    if not 1 / 3 <= beta_prime < beta < 0.5:
        raise KernelError(f"need 1/3 <= beta' < beta < 1/2, got beta={beta}, beta'={beta_prime}")
    q = r ** (1 - beta_prime / beta)

    def g(A):
        return A**beta + (A - q) ** beta - 2

    # g(1) <= 0 <= g(1+q) by the two one-sided comparisons with 2A^beta
    return _bisect(g, max(1.0, q), 1.0 + q)


def t_star(s_i: float, t_j: float, beta: float, beta_prime: float) -> float:
    """Worst-case contact time over all lateral landing positions."""
    d = t_j - s_i
    if not 0 < d <= 1:
        raise KernelError(f"need 0 < t_j - s_i <= 1, got {d}")
    return s_i + A_of_r(d, beta, beta_prime) * d ** (beta_prime / beta)


def parabolas_disjoint(p: Parabola, q: Parabola, t: float) -> bool:
    """True iff the closed sections of ``p`` and ``q`` are disjoint on ``[max births, t]``."""
    start = max(p.birth, q.birth)
    if t < start:
        raise KernelError(f"t={t} precedes the later birth {start}")
    gap = abs(p.center - q.center)
    w0 = p.eps_half + q.eps_half
    # combined width is nondecreasing in time, so one contact time decides it
    if p.width(start) + q.width(start) >= gap:
        return False
    tc = _contact_root(gap, w0, p.birth, q.birth, p.exponent, q.exponent, start)
    return tc > t


def classify_indices(
    x_i: float,
    s_i: float,
    landing: Sequence[tuple[float, float]],
    t: float,
    t_prime: float,
    eps: float,
    beta_prime: float,
) -> IndexClassification:
    """Split landing indices near ``x_i`` into critical and lateral sets."""
    if not t >= t_prime > s_i:
        raise KernelError(f"need t >= t' > s_i, got t={t}, t'={t_prime}, s_i={s_i}")
    h = math.sqrt(eps)
    reach = 2 * (h + (t - s_i) ** beta_prime)
    all_, crit = set(), set()
    for j, (y, tj) in enumerate(landing):
        if not s_i < tj <= t_prime:
            continue
        d = abs(y - x_i)
        if d > reach:
            continue
        all_.add(j)
        if d < 2 * (h + (tj - s_i) ** beta_prime):
            crit.add(j)
    return IndexClassification(frozenset(crit), frozenset(all_ - crit), frozenset(all_))
