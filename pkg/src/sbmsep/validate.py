"""Validator suite behind ``sbmsep validate`` and the acceptance run.

Each validator returns one :class:`Check`.  Hard checks are deterministic
and must pass exactly; statistical checks carry a z-score and fail the suite
only beyond ``z_fail`` standard errors.  ``size`` scales every Monte Carlo
sample and grid, so the CLI default is quick and the acceptance run uses
``size=1``.
"""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from . import diffusion1d as d1
from . import lattice as lat
from . import mathkernel as mk
from .params import DEFAULT_PARAMS, ParamVector, derive_constants, kappas, validate_params

__all__ = ["Check", "VALIDATORS", "MODULES", "run_validators"]

MODULES = ("params", "mathkernel", "diffusion1d", "lattice", "spde", "experiments")


@dataclass
class Check:
    name: str
    module: str
    kind: str  # "hard" or "stat"
    passed: bool
    detail: str = ""
    z: float | None = None
    runtime_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def line(self) -> str:
        z = f" z={self.z:+.2f}" if self.z is not None else ""
        return f"{'PASS' if self.passed else 'FAIL'} [{self.module}/{self.kind}] {self.name}{z} {self.detail} ({self.runtime_s:.1f}s)"


def _stat(name, module, est, target, se, z_fail, detail="") -> Check:
    z = (est - target) / se if se > 0 else (0.0 if est == target else math.inf)
    return Check(name, module, "stat", abs(z) <= z_fail, f"est={est:.6g} target={target:.6g} se={se:.3g} {detail}".strip(), z)


# --------------------------------------------------------------------------- params


def v_params_default(size: float, rng: np.random.Generator, z_fail: float, params: ParamVector) -> Check:
    bad = validate_params(params)
    return Check("parameter vector admissible", "params", "hard", not bad, "; ".join(map(str, bad)) or "constraints (a)-(d) hold")


def v_params_r0(size: float, rng, z_fail, params: ParamVector) -> Check:
    c = derive_constants(params, 1.0)
    k1, _, _ = kappas(params)
    closed = (1 / 8) ** (1 / (k1 - c.wp - params.eta))
    ok = c.r0 <= closed < c.r0 + 2.0**-20 + 1e-15
    return Check("r0 matches closed form at K*=1", "params", "hard", ok, f"r0={c.r0:.8g} closed={closed:.8g}")


# --------------------------------------------------------------------------- mathkernel


def v_A_grid(size, rng, z_fail, params) -> Check:
    n = max(int(10_000 * size), 100)
    rs = np.linspace(1.0 / n, 1.0, n)
    b, bp = params.beta, params.beta_prime
    worst, bound_ok = 0.0, True
    for r in rs:
        A = mk.A_of_r(float(r), b, bp)
        q = r ** (1 - bp / b)
        worst = max(worst, abs(A**b + (A - q) ** b - 2))
        bound_ok &= 1.0 <= A <= 1.0 + q
    return Check("A(r) residual and bounds 1 <= A <= 1+q", "mathkernel", "hard", worst < 1e-12 and bound_ok, f"n={n} max_residual={worst:.2e}")


def _brute_I(a, b, c, T):
    def inner(s):
        if s <= 0:
            return 0.0
        return integrate.quad(lambda r: 1.0, 0, s, weight="alg", wvar=(a, c), epsabs=0, epsrel=1e-12)[0]

    return integrate.quad(inner, 0, T, weight="alg", wvar=(b, 0), epsabs=0, epsrel=1e-11, limit=400)[0]


def v_integral_I(size, rng, z_fail, params) -> Check:
    n = max(int(100 * size), 5)
    worst = 0.0
    for _ in range(n):
        a, c = rng.uniform(-0.9, 2.0, 2)
        b = rng.uniform(max(-1.9 - a - c, -0.9), 1.5)
        T = rng.uniform(0.1, 2.0)
        res = mk.integral_I(a, b, c, T)
        ref = _brute_I(a, b, c, T)
        worst = max(worst, abs(res.value - ref) / abs(ref))
    return Check("integral_I closed form vs quadrature", "mathkernel", "hard", worst < 1e-6, f"n={n} max_rel_err={worst:.2e}")


def v_allocate(size, rng, z_fail, params) -> Check:
    n = max(int(1000 * size), 20)
    bad = 0
    for _ in range(n):
        a, c = rng.uniform(-0.99, 1.0, 2)
        b = -rng.uniform(1e-3, min(1.99 + a + c, 3.0) - 1e-3) if 1.99 + a + c > 2e-3 else -1e-3
        if not a + b + c > -2:
            continue
        b1, b2 = mk.allocate_exponents(a, b, c)
        ok = b1 < 0 and b2 < 0 and a + b1 > -1 and b2 + c > -1 and abs(b1 + b2 - b) < 1e-12
        bad += not ok
    return Check("allocate_exponents constraints", "mathkernel", "hard", bad == 0, f"n={n} violations={bad}")


def _constructed_function(rng, ts):
    a = rng.uniform(0.05, 0.49)
    f0 = rng.uniform(-0.5, 0.5)
    b = rng.uniform(0, 0.5)
    c = rng.uniform(0, 2)
    base = f0 + b * ts * np.sin(rng.uniform(1, 30) * ts + rng.uniform(0, 6))
    w = np.cos(rng.uniform(1, 20) * ts)
    cum = integrate.cumulative_trapezoid(np.abs(base), ts, initial=0.0)
    theta = rng.uniform(0, 1)
    for _ in range(30):
        f = np.clip(base + theta * c * 0.5 * cum**a * w, -1, 1)
        cum_f = integrate.cumulative_trapezoid(np.abs(f), ts, initial=0.0)
        if np.all(np.abs(f - f[0]) <= b * ts + c * cum_f**a + 1e-12):
            return f, a, b, c
        theta *= 0.5
    return np.clip(base, -1, 1), a, b, c


def v_imc(size, rng, z_fail, params) -> Check:
    n = max(int(1000 * size), 20)
    ts = np.linspace(0, 1, 1001)
    idx = np.linspace(0, 1000, 50).astype(int)
    bad = 0
    for _ in range(n):
        f, a, b, c = _constructed_function(rng, ts)
        sums = np.cumsum(a ** np.arange(1, 60))
        xi = rng.uniform(a, min(sums[-1], 0.999) - 1e-9)
        N = mk.imc_pick_N(a, xi)
        bad += int(any(abs(f[k] - f[0]) > mk.imc_bound(f[0], b, c, a, xi, N, ts[k]) + 1e-12 for k in idx))
    return Check("imc_bound dominates constructed functions", "mathkernel", "hard", bad == 0, f"n={n} violations={bad}")


def v_contact(size, rng, z_fail, params) -> Check:
    n = max(int(1000 * size), 20)
    worst = 0.0
    for _ in range(n):
        eps = rng.uniform(1e-4, 0.05)
        s_i = rng.uniform(0, 0.5)
        t_j = s_i + rng.uniform(1e-3, 0.5)
        gap = 2 * math.sqrt(eps) + rng.uniform(0.01, 1.0)
        t = mk.contact_time(0.0, s_i, gap, t_j, eps, params.beta)
        res = 2 * math.sqrt(eps) + (t - s_i) ** params.beta + (t - t_j) ** params.beta - gap
        # contact at t_j itself means the envelopes already overlap there
        worst = max(worst, abs(res) if t > t_j else max(-res, 0.0))
    return Check("contact_time residual", "mathkernel", "hard", worst < 1e-10, f"n={n} max_residual={worst:.2e}")


# --------------------------------------------------------------------------- diffusion1d


def v_survival(size, rng, z_fail, params) -> list[Check]:
    n = max(int(100_000 * size), 2000)
    out = []
    for z, t in ((0.1, 1.0), (0.5, 1.0), (0.2, 0.5)):
        zeros = np.mean(d1.feller_transition(np.full(n, z), t, rng) == 0)
        p = math.exp(-2 * z / t)
        out.append(_stat(f"survival zero-fraction z={z} t={t}", "diffusion1d", zeros, p, math.sqrt(p * (1 - p) / n), z_fail, f"n={n}"))
    return out


def v_laplace(size, rng, z_fail, params) -> list[Check]:
    n = max(int(100_000 * size), 2000)
    out = []
    for _ in range(10):
        lam, z, t = rng.uniform(0.1, 5), rng.uniform(0.01, 1), rng.uniform(0.05, 2)
        v = np.exp(-lam * d1.feller_transition(np.full(n, z), t, rng))
        out.append(_stat(f"Laplace lam={lam:.3f} z={z:.3f} t={t:.3f}", "diffusion1d", v.mean(), float(d1.feller_laplace(lam, z, t)), v.std() / math.sqrt(n), z_fail, f"n={n}"))
    return out


def v_hit(size, rng, z_fail, params) -> Check:
    n = max(int(200_000 * size), 2000)
    z = 0.05
    hits, unresolved = d1.hit_one_before_zero_mc(z, n, 1e-4, rng)
    c = _stat("P(T1 < T0) from z=0.05", "diffusion1d", hits / n, z, math.sqrt(z * (1 - z) / n), z_fail, f"n={n} unresolved={unresolved}")
    c.extra = {"hits": hits, "n": n, "unresolved": unresolved}
    return c


# --------------------------------------------------------------------------- lattice


def v_lattice(size, rng, z_fail, params) -> Check:
    g = lat.Grid(-2.0, 2.0, 400)
    f = lat.mollifier_field(g, 0.1, 0.05)
    h = lat.heat_half_step(f, 0.25 * g.dx**2)
    buf = io.BytesIO()
    lat.write_frame(buf, h, 7, 0.5, seed=3, digest=11)
    buf.seek(0)
    back, meta = lat.read_frame(buf)
    ok = abs(h.mass() - f.mass()) < 1e-14 and np.array_equal(back.values, h.values) and meta["step"] == 7
    norm = lat.crap_norm(h).value
    ok &= 0 <= norm <= 1
    return Check("heat step mass, frame round trip, rap-norm range", "lattice", "hard", bool(ok), f"mass={h.mass():.12g} norm={norm:.4g}")


# --------------------------------------------------------------------------- spde


def v_allocation(size, rng, z_fail, params) -> Check:
    from .spde import allocation_matrix

    n = max(int(1000 * size), 50)
    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(1, 20))
        m = rng.exponential(size=k) * (rng.random(k) > 0.2)
        M = allocation_matrix(m)
        worst = max(worst, float(np.max(np.abs(M @ M.T - np.eye(k)))))
    return Check("allocate_noise M M^T = I", "spde", "hard", worst < 1e-12, f"n={n} max_dev={worst:.2e}")


def v_zero_noise(size, rng, z_fail, params) -> Check:
    from .spde import CoupledSimulation, LatticeConfig

    sim = CoupledSimulation(LatticeConfig(eps=0.05, horizon=0.15, noise=0.0), 1)
    sim.advance()
    rec = sim.record()
    dep = np.array([rec.mass_x[b, j] for j, b in enumerate(rec.birth_step_x)])
    k = rec.steps_done
    rel = abs(rec.mass_x[k].sum() - dep.sum()) / dep.sum()
    return Check("zero-noise mass equals deposits", "spde", "hard", rel < 1e-6 and abs(dep.mean() / 0.05 - 1) < 2e-4, f"rel_dev={rel:.2e}")


def v_decomposition(size, rng, z_fail, params) -> Check:
    from .spde import CoupledSimulation, LatticeConfig, step_coupled

    n_steps = max(int(10_000 * size), 200)
    sim = CoupledSimulation(LatticeConfig(eps=0.05, horizon=n_steps * LatticeConfig(eps=0.05, horizon=1).time_step * 1.0000001), 2)
    worst, neg = 0.0, False
    for _ in range(n_steps):
        st = step_coupled(sim)
        worst = max(worst, st.X.decomposition_error(), st.Y.decomposition_error())
        neg |= bool((st.X.fields < 0).any() or (st.Y.fields < 0).any())
    resid = float(sim.record().resid.max())
    ok = worst <= 1e-10 and resid < 1e-12 and not neg
    return Check("decomposition identity per step", "spde", "hard", ok, f"steps={n_steps} sum_dev={worst:.1e} alloc_resid={resid:.1e} negative={neg}")


# --------------------------------------------------------------------------- experiments


def v_tau1(size, rng, z_fail, params) -> Check:
    from .experiments import stopping_times

    eps = 0.01
    times = np.linspace(0, 1, 100_001)
    st = stopping_times(times, np.full(times.size, eps), 0.0, params, 1.0, eps)
    expect = (4 * eps) ** (1 / params.eta)
    return Check("tau1 closed form on constant mass", "experiments", "hard", abs(st.tau1 - expect) <= 2e-5, f"tau1={st.tau1:.6g} expect={expect:.6g}")


def v_acceptance(size, rng, z_fail, params) -> Check:
    from .spde import run_single_cluster_batch

    n = max(int(10_000 * size), 300)
    out = run_single_cluster_batch(0.1, 0.02, n, int(rng.integers(2**31)))
    u = rng.random(n)
    m = np.minimum(out["mass"], 1.0)
    acc = (out["level"] == 1) | ((out["level"] == -1) & (u < m))
    p = 0.1
    return _stat("rejection acceptance rate, eps=0.1", "experiments", acc.mean(), p, math.sqrt(p * (1 - p) / n), z_fail, f"n={n}")


VALIDATORS: dict[str, list[Callable]] = {
    "params": [v_params_default, v_params_r0],
    "mathkernel": [v_A_grid, v_integral_I, v_allocate, v_imc, v_contact],
    "diffusion1d": [v_survival, v_laplace, v_hit],
    "lattice": [v_lattice],
    "spde": [v_allocation, v_zero_noise, v_decomposition],
    "experiments": [v_tau1, v_acceptance],
}


def run_validators(only: str | None = None, size: float = 0.05, seed: int = 0, z_fail: float = 4.0, params: ParamVector = DEFAULT_PARAMS) -> list[Check]:
    """Run every validator (or one module's); the parameter check runs first."""
    if only is not None and only not in VALIDATORS:
        raise KeyError(only)
    rng = np.random.default_rng(seed)
    mods = [only] if only else list(VALIDATORS)
    out: list[Check] = []
    for mod in mods:
        for fn in VALIDATORS[mod]:
            t0 = time.time()
            res = fn(size, rng, z_fail, params)
            res = res if isinstance(res, list) else [res]
            dt = (time.time() - t0) / len(res)
            for c in res:
                c.runtime_s = dt
            out.extend(res)
    return out
