import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import integrate

from sbmsep.mathkernel import (
    A_of_r,
    KernelError,
    Parabola,
    allocate_exponents,
    classify_indices,
    contact_time,
    imc_bound,
    imc_pick_N,
    integral_I,
    parabolas_disjoint,
    t_star,
)


@pytest.mark.parametrize("a, xi, expected", [(0.4, 0.6, 2), (0.49, 0.9, 3), (0.3, 0.3, 1)])
def test_imc_pick_N(a, xi, expected):
    n = imc_pick_N(a, xi)
    assert n == expected
    sums = np.cumsum(a ** np.arange(1, n + 2))
    assert sums[n - 1] <= xi < sums[n]


@pytest.mark.parametrize("a, xi", [(0.4, 0.3), (0.4, 0.67), (0.4, 0.9)])
def test_imc_pick_N_no_solution(a, xi):
    with pytest.raises(KernelError):
        imc_pick_N(a, xi)


def test_imc_bound_examples():
    assert imc_bound(0.3, 0.2, 1.0, 0.4, 0.6, 2, 0.0) == 0.0
    assert imc_bound(0.0, 0.0, 1.0, 0.4, 0.6, 2, 1.0) == pytest.approx(2.0)


def brute_I(a, b, c, T):
    # Fubini order: outer s, inner r in [0, s]; endpoint singularities carried by algebraic weights
    def inner(s):
        if s <= 0:
            return 0.0
        return integrate.quad(lambda r: 1.0, 0, s, weight="alg", wvar=(a, c), epsabs=0, epsrel=1e-12)[0]

    return integrate.quad(inner, 0, T, weight="alg", wvar=(b, 0), epsabs=0, epsrel=1e-11, limit=400)[0]


@pytest.mark.parametrize(
    "a, b, c, T, expected",
    [(0, 0, 0, 2.0, 2.0), (0, 0, 0, 0.5, 0.125), (1, 0, 0, 1.0, 1 / 6)],
)
def test_integral_I_examples(a, b, c, T, expected):
    res = integral_I(a, b, c, T)
    assert res.finite
    assert res.value == pytest.approx(expected, rel=1e-12)


def test_integral_I_one_sixth_by_quadrature():
    assert integrate.quad(lambda r: r * (1 - r), 0, 1)[0] == pytest.approx(integral_I(1, 0, 0, 1).value)


@pytest.mark.parametrize("a, b, c", [(-1, 0, 0), (0, 0, -1), (-0.5, -1.0, -0.5), (-0.9, -1.2, 0.0), (-2, 3, 3)])
def test_integral_I_divergent(a, b, c):
    res = integral_I(a, b, c, 1.0)
    assert not res.finite and res.value == math.inf


def random_triples(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        a, c = rng.uniform(-0.9, 2.0, 2)
        b = rng.uniform(-1.5, 2.0)
        if a + b + c > -1.8:
            out.append((a, b, c, rng.uniform(0.2, 2.0)))
    return out


@pytest.mark.parametrize("a, b, c, T", random_triples(20, 1))
def test_integral_I_matches_quadrature(a, b, c, T):
    assert integral_I(a, b, c, T).value == pytest.approx(brute_I(a, b, c, T), rel=1e-6)


def test_allocate_example():
    assert allocate_exponents(0, -0.5, 0) == pytest.approx((-0.25, -0.25))


def test_allocate_feasible_example():
    b1, b2 = allocate_exponents(-0.9, -0.2, 0.5)
    assert b1 < 0 and b2 < 0 and b1 + b2 == pytest.approx(-0.2)
    assert -0.9 + b1 > -1 and b2 + 0.5 > -1
    splits = np.linspace(-0.2, 0, 1002)[1:-1]
    assert np.any((-0.9 + splits > -1) & (-0.2 - splits + 0.5 > -1))


@pytest.mark.parametrize("a, b, c", [(0, -2, 0), (-0.5, -1.0, -0.5), (-1, -0.1, 0), (0, 0.1, 0)])
def test_allocate_rejects(a, b, c):
    with pytest.raises(KernelError):
        allocate_exponents(a, b, c)


@settings(max_examples=300, deadline=None)
@given(st.floats(-0.999, 3), st.floats(-5, -1e-6), st.floats(-0.999, 3))
def test_allocate_property(a, b, c):
    feasible = a + b + c > -2
    grid = np.linspace(b, 0, 1002)[1:-1]
    grid_ok = np.any((a + grid > -1) & (b - grid + c > -1))
    if not feasible:
        with pytest.raises(KernelError):
            allocate_exponents(a, b, c)
        return
    assume(a + b + c > -2 + 1e-9)
    b1, b2 = allocate_exponents(a, b, c)
    assert b1 < 0 and b2 < 0
    assert a + b1 > -1 and b2 + c > -1
    assert b1 + b2 == pytest.approx(b)
    if a + b + c > -2 + 0.01:
        assert grid_ok


def test_contact_immediate():
    eps = 0.01
    assert contact_time(0.0, 0.0, 2 * math.sqrt(eps), 0.3, eps, 0.45) == 0.3


def test_contact_residual_and_monotone():
    eps, beta = 0.01, 0.45
    t = contact_time(0.0, 0.0, 1.0, 0.1, eps, beta)
    assert t > 0.1
    assert abs(2 * math.sqrt(eps) + t**beta + (t - 0.1) ** beta - 1.0) < 1e-10
    assert contact_time(0.0, 0.0, 2.0, 0.1, eps, beta) > t
    assert contact_time(0.0, 0.0, -1.0, 0.1, eps, beta) == t


def test_contact_horizon():
    with pytest.raises(KernelError):
        contact_time(0.0, 0.0, 1e9, 0.1, 0.01, 0.45)


def test_A_limits_and_bounds():
    assert A_of_r(1e-30, 0.49, 0.34) == pytest.approx(1.0, abs=1e-8)
    q = 0.5 ** (1 - 0.45 / 0.49)
    A = A_of_r(0.5, 0.49, 0.45)
    assert 1 <= A <= 1 + q
    assert abs(A**0.49 + (A - q) ** 0.49 - 2) < 1e-12


@pytest.mark.parametrize("beta, bp", [(0.49, 0.45), (0.45, 0.34), (0.4, 0.35)])
def test_A_residual_grid(beta, bp):
    for r in np.linspace(1e-4, 1, 200):
        A = A_of_r(r, beta, bp)
        q = r ** (1 - bp / beta)
        assert abs(A**beta + (A - q) ** beta - 2) < 1e-12
        assert 1 <= A <= 1 + q


def test_t_star_unit_gap():
    A1 = A_of_r(1.0, 0.49, 0.45)
    assert abs(A1**0.49 + (A1 - 1) ** 0.49 - 2) < 1e-12
    assert t_star(0.2, 1.2, 0.49, 0.45) == pytest.approx(0.2 + A1)


def test_t_star_after_t_j_and_monotone():
    tj = np.linspace(1e-3, 1, 1000)
    ts = np.array([t_star(0.0, x, 0.49, 0.45) for x in tj])
    assert np.all(ts > tj)
    assert np.all(np.diff(ts) >= -1e-12)


def test_t_star_matches_boundary_contact():
    eps, beta, bp, s_i, tj = 0.01, 0.49, 0.45, 0.0, 0.3
    y = 2 * (math.sqrt(eps) + (tj - s_i) ** bp)
    assert contact_time(0.0, s_i, y, tj, eps, beta) == pytest.approx(t_star(s_i, tj, beta, bp), abs=1e-9)


def test_t_star_range():
    with pytest.raises(KernelError):
        t_star(0.0, 1.5, 0.49, 0.45)
    with pytest.raises(KernelError):
        t_star(0.5, 0.5, 0.49, 0.45)


def test_parabolas_identical_not_disjoint():
    p = Parabola(0.0, 0.0, 0.1, 0.45)
    assert not parabolas_disjoint(p, p, 1.0)


@pytest.mark.parametrize("r", [0.01, 0.1, 0.5, 1.0])
@pytest.mark.parametrize("frac", [0.01, 0.5, 1.0])
def test_parabolas_far_landing_disjoint(r, frac):
    eps, beta, s_i = 0.01, 0.45, 0.3
    h = math.sqrt(eps)
    tj = s_i + frac * r
    y = 2 * (h + r**beta) * 1.0001
    assert parabolas_disjoint(Parabola(0.0, s_i, h, beta), Parabola(y, tj, h, beta), s_i + r)


def test_parabolas_disjoint_vs_contact():
    p, q = Parabola(0.0, 0.0, 0.1, 0.45), Parabola(1.0, 0.1, 0.1, 0.45)
    tc = contact_time(0.0, 0.0, 1.0, 0.1, 0.01, 0.45)
    assert parabolas_disjoint(p, q, tc - 1e-6)
    assert not parabolas_disjoint(p, q, tc + 1e-6)


def brute_disjoint(p, q, t, n=10_000):
    start = max(p.birth, q.birth)
    s = np.linspace(start, t, n)
    wp = p.eps_half + (s - p.birth) ** p.exponent
    wq = q.eps_half + (s - q.birth) ** q.exponent
    return bool(np.all(wp + wq < abs(p.center - q.center)))


def test_parabolas_vs_dense_sampling():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        p = Parabola(rng.uniform(-1, 1), rng.uniform(0, 0.5), rng.uniform(0.01, 0.2), rng.uniform(0.3, 0.49))
        q = Parabola(rng.uniform(-1, 1), rng.uniform(0, 0.5), rng.uniform(0.01, 0.2), rng.uniform(0.3, 0.49))
        t = max(p.birth, q.birth) + rng.uniform(0, 1)
        if parabolas_disjoint(p, q, t) != brute_disjoint(p, q, t):
            mismatches += 1
    assert mismatches == 0


def test_classify_examples():
    empty = classify_indices(0.0, 0.0, [], 1.0, 0.5, 0.01, 0.45)
    assert not empty.all and not empty.critical and not empty.lateral
    res = classify_indices(0.3, 0.0, [(0.3, 0.2)], 1.0, 0.5, 0.01, 0.45)
    assert res.critical == {0}
    eps, bp, tj = 0.01, 0.45, 0.25
    edge = 2 * (math.sqrt(eps) + tj**bp)
    res = classify_indices(0.0, 0.0, [(edge, tj)], 1.0, 0.5, eps, bp)
    assert res.lateral == {0} and not res.critical


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.floats(-3, 3), st.floats(0, 2)), max_size=30),
    st.floats(0.05, 1.0),
    st.floats(0.0, 1.0),
)
def test_classify_partition(landing, t, frac):
    s_i = 0.0
    t_prime = s_i + max(frac * t, 1e-6)
    res = classify_indices(0.0, s_i, landing, t, t_prime, 0.01, 0.45)
    assert res.critical | res.lateral == res.all
    assert not res.critical & res.lateral
    for j in res.all:
        assert s_i < landing[j][1] <= t_prime


def constructed_function(rng, ts):
    a = rng.uniform(0.05, 0.49)
    f0 = rng.uniform(-0.5, 0.5)
    b = rng.uniform(0, 0.5)
    c = rng.uniform(0, 2)
    u = np.sin(rng.uniform(1, 30) * ts + rng.uniform(0, 6))
    base = f0 + b * ts * u
    theta = rng.uniform(0, 1)
    w = np.cos(rng.uniform(1, 20) * ts)
    cum = integrate.cumulative_trapezoid(np.abs(base), ts, initial=0.0)
    f = base + theta * c * 0.5 * cum**a * w
    f = np.clip(f, -1, 1)
    # certify the integral inequality on the grid and shrink the perturbation if needed
    for _ in range(30):
        cum_f = integrate.cumulative_trapezoid(np.abs(f), ts, initial=0.0)
        if np.all(np.abs(f - f[0]) <= b * ts + c * cum_f**a + 1e-12):
            return f, a, b, c
        theta *= 0.5
        f = np.clip(base + theta * c * 0.5 * cum**a * w, -1, 1)
    return np.clip(base, -1, 1), a, b, c


def test_imc_bound_dominates_constructed_functions():
    rng = np.random.default_rng(11)
    ts = np.linspace(0, 1, 2001)
    idx = np.linspace(0, 2000, 100).astype(int)
    for _ in range(200):
        f, a, b, c = constructed_function(rng, ts)
        sums = np.cumsum(a ** np.arange(1, 60))
        xi = rng.uniform(a, min(sums[-1], 0.999) - 1e-9)
        n = imc_pick_N(a, xi)
        for k in idx:
            assert abs(f[k] - f[0]) <= imc_bound(f[0], b, c, a, xi, n, ts[k]) + 1e-12
