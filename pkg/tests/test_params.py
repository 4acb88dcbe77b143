import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbmsep.params import (
    DEFAULT_PARAMS,
    InfeasibleError,
    ParameterError,
    ParamVector,
    default_wp,
    derive_constants,
    kappas,
    validate_params,
)


def test_default_vector_is_valid():
    assert validate_params(DEFAULT_PARAMS) == []


def test_partial_sums_bracket_xi():
    sums = np.cumsum(0.49 ** np.arange(1, 5))
    np.testing.assert_allclose(sums, [0.49, 0.7301, 0.847749, 0.90539701], rtol=1e-6)
    assert sums[2] <= 0.9 < sums[3]


def test_small_xi_violates_a_and_d():
    report = validate_params(DEFAULT_PARAMS.replace(xi=0.5))
    assert {v.constraint for v in report} == {"a", "d"}
    d = next(v for v in report if v.constraint == "d")
    assert d.lhs == pytest.approx(0.695)
    assert d.rhs == pytest.approx(1.01)


def test_equal_betas_violate_b():
    report = validate_params(DEFAULT_PARAMS.replace(beta=0.45, beta_prime=0.45))
    assert [v.constraint for v in report] == ["b"]
    assert report[0].lhs == pytest.approx(1.0)


@pytest.mark.parametrize("field", ["eta", "alpha", "L", "beta", "beta_prime", "xi"])
@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_non_finite_rejected(field, bad):
    with pytest.raises(ParameterError):
        validate_params(DEFAULT_PARAMS.replace(**{field: bad}))


@pytest.mark.parametrize(
    "change",
    [{"eta": 1.0}, {"alpha": 0.5}, {"L": 0.0}, {"beta": 0.3}, {"beta_prime": 0.5}, {"xi": 1.0}, {"n0": 0}],
)
def test_out_of_range_rejected(change):
    with pytest.raises(ParameterError):
        validate_params(DEFAULT_PARAMS.replace(**change))


def test_kappas_example():
    k1, k2, k3 = kappas(DEFAULT_PARAMS)
    assert k1 == pytest.approx(1.295)
    assert k2 == pytest.approx(0.49**3 / 4)
    assert k2 == pytest.approx(0.029412, abs=1e-6)
    assert k3 == pytest.approx(0.68)


def test_default_wp_respects_margin():
    p = DEFAULT_PARAMS
    k1, _, k3 = kappas(p)
    wp = default_wp(p)
    assert 0 < wp < min(k1, k3)
    assert k1 - wp > p.eta


def test_r0_is_last_positive_grid_point():
    dc = derive_constants(DEFAULT_PARAMS, k_star=1.0)
    h = 2.0**-20
    k1 = dc.kappa1

    def num(r):
        return r**DEFAULT_PARAMS.eta / 4 - 2 * dc.k_star * r ** (k1 - dc.wp)

    assert num(dc.r0) > 0
    assert num(dc.r0 + h) <= 0
    # closed-form crossing of the two power laws
    root = (1 / 8) ** (1 / (k1 - dc.wp - DEFAULT_PARAMS.eta))
    assert abs(dc.r0 - root) <= h


def test_r0_saturates_for_small_kstar():
    assert derive_constants(DEFAULT_PARAMS, k_star=0.01).r0 == 1.0


def test_infeasible_kstar_named():
    with pytest.raises(InfeasibleError, match="K\\*=1e\\+300"):
        derive_constants(DEFAULT_PARAMS, k_star=1e300)


@pytest.mark.parametrize("wp", [0.0, -0.1, 0.3, 1.0])
def test_wp_out_of_range(wp):
    with pytest.raises(ParameterError):
        derive_constants(DEFAULT_PARAMS, wp=wp)


def test_eps0_constraints():
    dc = derive_constants(DEFAULT_PARAMS, k_star=0.05)
    for r in [0.01, 0.1, 0.5, 1.0]:
        e = dc.eps0(r)
        assert 0 < e <= min(r, 1 / 8, 1)
        assert e**dc.kappa2 <= r ** (dc.kappa1 - dc.kappa3) * (1 + 1e-12)


def test_from_mapping_roundtrip():
    d = {k: str(v) for k, v in DEFAULT_PARAMS.as_dict().items()}
    assert ParamVector.from_mapping(d) == DEFAULT_PARAMS
    with pytest.raises(ParameterError):
        ParamVector.from_mapping({**d, "n0": "2.5"})
    with pytest.raises(ParameterError, match="xi"):
        ParamVector.from_mapping({k: v for k, v in d.items() if k != "xi"})


@st.composite
def valid_vectors(draw):
    alpha = draw(st.floats(0.2, 0.49))
    n0 = draw(st.integers(1, 4))
    lo = sum(alpha**j for j in range(1, n0 + 1))
    hi = lo + alpha ** (n0 + 1)
    xi = draw(st.floats(lo, hi, exclude_max=True))
    beta = draw(st.floats(0.34, 0.499))
    beta_prime = draw(st.floats(max(1 / 3, alpha * beta * 1.001), beta * 0.999))
    eta = draw(st.floats(1.0001, 1.2))
    p = ParamVector(eta, alpha, 1.0, beta, beta_prime, xi, n0)
    return p


@settings(max_examples=200, deadline=None)
@given(valid_vectors())
def test_valid_vectors_have_positive_kappas(p):
    report = validate_params(p)
    assert report == validate_params(p)
    if report:
        return
    k1, k2, k3 = kappas(p)
    assert k1 > p.eta and k2 > 0 and k3 > 0


@settings(max_examples=60, deadline=None)
@given(valid_vectors(), st.floats(1e-3, 10.0))
def test_delta_positive_below_r0_and_capped(p, k_star):
    if validate_params(p):
        return
    try:
        dc = derive_constants(p, k_star=k_star)
    except InfeasibleError:
        return
    grid = np.linspace(dc.r0 / 1000, dc.r0, 1000)
    vals = dc.delta(grid)
    assert np.all(vals > 0)
    assert np.all(vals <= 0.5)
