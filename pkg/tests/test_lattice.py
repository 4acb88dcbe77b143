import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbmsep.lattice import (
    ConfigurationError,
    Grid,
    LatticeField,
    NoiseStream,
    ResolutionError,
    crap_norm,
    heat_half_step,
    mollifier_field,
    read_field_csv,
    read_frame,
    triangle_J,
    white_noise_increment,
    write_field_csv,
    write_frame,
)


@pytest.fixture
def grid():
    return Grid(-2.0, 2.0, 512)


def test_grid_geometry(grid):
    assert grid.dx == pytest.approx(4 / 512)
    assert grid.x[0] == pytest.approx(-2 + grid.dx / 2)
    g = Grid.with_spacing(-1.0, 1.3, 0.1)
    assert g.dx == pytest.approx(0.1) and g.x_max >= 1.3
    with pytest.raises(ConfigurationError):
        Grid(1.0, 0.0, 10)


def test_heat_zero(grid):
    out = heat_half_step(LatticeField.zeros(grid), grid.dx**2 / 4)
    assert np.all(out.values == 0)


def test_heat_conserves_interior_mass(grid):
    f = LatticeField(grid, np.exp(-grid.x**2 / (2 * 0.05**2)))
    m0 = f.mass()
    for _ in range(200):
        f = heat_half_step(f, grid.dx**2 / 4)
    assert f.mass() == pytest.approx(m0, rel=1e-12)


def test_heat_stability_enforced(grid):
    with pytest.raises(ConfigurationError, match="dx"):
        heat_half_step(LatticeField.zeros(grid), grid.dx**2)


def test_heat_vs_kernel():
    g = Grid(-1.0, 1.0, 512)
    dx = g.dx
    f = np.zeros(g.n_cells)
    f[g.n_cells // 2] = 1 / dx
    field = LatticeField(g, f)
    dt = dx * dx / 4
    n = int(round(0.01 / dt))
    for _ in range(n):
        field = heat_half_step(field, dt)
    t = n * dt
    x0 = g.x[g.n_cells // 2]
    exact = np.exp(-((g.x - x0) ** 2) / (2 * t)) / math.sqrt(2 * math.pi * t)
    core = exact > 0.05 * exact.max()
    rel = np.abs(field.values[core] - exact[core]) / exact[core]
    assert rel.max() < 0.02


def test_noise_determinism(grid):
    s = NoiseStream(42, 0)
    a = white_noise_increment(grid, 1e-4, s, 17)
    b = white_noise_increment(grid, 1e-4, s, 17)
    assert np.array_equal(a.gaussians, b.gaussians)
    c = white_noise_increment(grid, 1e-4, s, 18)
    assert not np.array_equal(a.gaussians, c.gaussians)
    d = white_noise_increment(grid, 1e-4, NoiseStream(42, 1), 17)
    assert not np.array_equal(a.gaussians, d.gaussians)


def test_noise_pairing_variance():
    g = Grid(0.0, 1.0, 32)
    dt = 1e-3
    phi = np.sin(np.pi * g.x)
    psi = np.cos(np.pi * g.x)  # orthogonal to phi on the grid
    s = NoiseStream(7, 0)
    n = 100_000
    a = np.empty(n)
    b = np.empty(n)
    for k in range(n):
        inc = white_noise_increment(g, dt, s, k).increment()
        a[k] = g.dx * np.sum(phi * inc)
        b[k] = g.dx * np.sum(psi * inc)
    target = dt * g.dx * np.sum(phi**2)
    se = target * math.sqrt(2 / n)
    assert abs(a.var() - target) <= 3 * se
    cov_se = math.sqrt(target * dt * g.dx * np.sum(psi**2) / n)
    assert abs(np.mean(a * b)) <= 3 * cov_se


def test_crap_norm_zero(grid):
    assert crap_norm(LatticeField.zeros(grid)).value == 0


def test_crap_norm_tent():
    g = Grid(-3.0, 3.0, 6000)
    f = LatticeField(g, triangle_J(g.x))
    res = crap_norm(f, 20)
    assert res.tail == 2.0**-20
    assert abs(res.value - 1.0) <= res.tail + 10 * g.dx


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=8, max_size=8), st.integers(1, 40))
def test_crap_norm_monotone_and_tail(vals, lam):
    g = Grid(-1.0, 1.0, 8)
    f = LatticeField(g, np.array(vals))
    a = crap_norm(f, lam)
    assert crap_norm(LatticeField(g, 2 * f.values), lam).value >= a.value
    b = crap_norm(f, lam + 10)
    assert abs(b.value - a.value) <= a.tail


def test_mollifier_mass_peak_symmetry():
    g = Grid(-1.0, 1.0, 2048)
    eps, x0 = 0.01, g.x[1024] - g.dx / 2  # cell boundary so the grid is mirror symmetric
    f = mollifier_field(g, x0, eps)
    assert f.mass() / eps == pytest.approx(1.0, abs=1e-3)
    f2 = mollifier_field(g, g.x[1024], eps)
    assert f2.values.max() == pytest.approx(math.sqrt(eps) * 1.0)
    assert np.allclose(f.values, f.values[::-1], atol=1e-15, rtol=0)


def test_mollifier_resolution():
    with pytest.raises(ResolutionError):
        mollifier_field(Grid(-1, 1, 20), 0.0, 0.01)


def test_csv_roundtrip(tmp_path, grid):
    f = LatticeField(grid, np.abs(np.sin(grid.x)))
    p = tmp_path / "f.csv"
    write_field_csv(p, f, {"seed": 3, "config_digest": "abc"})
    x, v, header = read_field_csv(p)
    assert header == {"seed": "3", "config_digest": "abc"}
    assert np.array_equal(v, f.values) and np.array_equal(x, grid.x)


def test_frame_roundtrip(grid):
    buf = io.BytesIO()
    f = LatticeField(grid, np.linspace(0, 1, grid.n_cells))
    write_frame(buf, f, 5, 0.25, seed=9, digest=123)
    write_frame(buf, f, 6, 0.5)
    buf.seek(0)
    assert buf.read(4) == b"SBMF"
    buf.seek(0)
    g, meta = read_frame(buf)
    assert meta == {"step": 5, "time": 0.25, "seed": 9, "digest": 123}
    assert np.array_equal(g.values, f.values) and g.grid == grid
    assert read_frame(buf)[1]["step"] == 6
    assert read_frame(buf) is None
