"""Exact laws and samplers for one-dimensional total-mass processes.

Kinds:
    feller              dZ = sqrt(Z) dB, absorbed at 0 (quarter BESQ of dimension 0)
    besq4_quarter       dZ = dt + sqrt(Z) dB (quarter BESQ of dimension 4)
    conditioned_feller  Feller conditioned to survive past T (h-transform drift)

Samplers take an explicit ``numpy.random.Generator``; nothing here touches
global RNG state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import ParamVector

__all__ = [
    "DiffusionSpec",
    "DiffusionPath",
    "feller_transition",
    "feller_transition_sample",
    "feller_laplace",
    "survival_prob",
    "hit_prob_one_before_zero",
    "besq4_quarter_step",
    "besq4_quarter",
    "F_drift",
    "conditioned_feller_path",
    "feller_path",
    "euler_path",
    "first_crossing",
    "hit_one_before_zero_mc",
    "fractional_moment_bound",
]

KINDS = ("feller", "besq4_quarter", "conditioned_feller")


@dataclass(frozen=True)
class DiffusionSpec:
    kind: str
    z0: float
    dt: float
    horizon: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not (self.z0 >= 0 and math.isfinite(self.z0)):
            raise ValueError(f"z0 must be finite and >= 0, got {self.z0}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.kind == "conditioned_feller" and self.horizon is None:
            raise ValueError("conditioned_feller requires a horizon")
        if self.horizon is not None and self.dt > self.horizon / 10:
            raise ValueError(f"dt={self.dt} exceeds horizon/10={self.horizon / 10}")


@dataclass
class DiffusionPath:
    times: np.ndarray
    values: np.ndarray
    hit_markers: dict = field(default_factory=dict)
    hit_times: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values must have equal length")
        if not self.hit_markers:
            self.mark_hits()

    def mark_hits(self, levels=(0.0, 1.0)) -> None:
        for lvl in levels:
            idx, tm = first_crossing(self.times, self.values, lvl)
            self.hit_markers[lvl] = idx
            self.hit_times[lvl] = tm


def first_crossing(times: np.ndarray, values: np.ndarray, level: float) -> tuple[int | None, float | None]:
    """First index where ``values`` reaches ``level`` from the starting side.

    Level 0 is hit exactly (absorbing state).  For a positive level the time
    is linearly interpolated between the bracketing samples.
    """
    v = np.asarray(values)
    if level <= 0:
        hits = np.flatnonzero(v <= 0)
        if hits.size == 0:
            return None, None
        k = int(hits[0])
        return k, float(times[k])
    above = v[0] >= level
    hits = np.flatnonzero(v < level) if above else np.flatnonzero(v >= level)
    if hits.size == 0:
        return None, None
    k = int(hits[0])
    if k == 0:
        return 0, float(times[0])
    v0, v1 = v[k - 1], v[k]
    w = (level - v0) / (v1 - v0)
    return k, float(times[k - 1] + w * (times[k] - times[k - 1]))


def survival_prob(z, t):
    """P(Feller from z is alive at t) = 1 - exp(-2z/t)."""
    z = np.asarray(z, dtype=float)
    out = -np.expm1(-2 * z / t)
    return float(out) if out.ndim == 0 else out


def feller_laplace(lam, z, t):
    """E_z exp(-lam Z_t) for the Feller diffusion."""
    return np.exp(-2 * lam * np.asarray(z) / (2 + lam * t))


def hit_prob_one_before_zero(z: float) -> float:
    """P_z(T_1 < T_0) for the driftless Feller diffusion (linear scale function)."""
    if not 0 <= z <= 1:
        raise ValueError(f"z must lie in [0, 1], got {z}")
    return float(z)


def feller_transition(z, t: float, rng: np.random.Generator) -> np.ndarray:
    """Exact Feller transition over ``t`` for an array of starting masses.

    Poisson-mixed Gamma: N ~ Poisson(2z/t), Z_t ~ Gamma(N, scale t/2), with
    Z_t = 0 when N = 0.  Its Laplace transform is exp(-2 lam z/(2 + lam t)).
    """
    z = np.asarray(z, dtype=float)
    n = rng.poisson(2 * z / t)
    out = np.zeros(z.shape)
    pos = n > 0
    out[pos] = rng.gamma(n[pos], t / 2)
    return out


def feller_transition_sample(z: float, t: float, rng: np.random.Generator) -> float:
    if z <= 0:
        return 0.0
    return float(feller_transition(np.array([z]), t, rng)[0])


def besq4_quarter(z, dt: float, rng: np.random.Generator) -> np.ndarray:
    """Exact quarter-BESQ^4 transition: (dt/4) * chi2'(df=4, nonc=4z/dt)."""
    z = np.asarray(z, dtype=float)
    return dt / 4 * rng.noncentral_chisquare(4, 4 * z / dt)


def besq4_quarter_step(z: float, dt: float, rng: np.random.Generator) -> float:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return float(besq4_quarter(np.array([z]), dt, rng)[0])


def F_drift(x):
    """h-transform drift F(x) = x e^-x / (1 - e^-x), F(0) = 1."""
    x = np.asarray(x, dtype=float)
    safe = np.where(x > 0, x, 1.0)
    out = np.where(x > 0, safe * np.exp(-safe) / -np.expm1(-safe), 1.0)
    return float(out) if out.ndim == 0 else out


def conditioned_feller_path(z, T: float, dt: float, rng: np.random.Generator, n_paths: int | None = None):
    """Euler paths of dZ = F(2Z/(T-s)) ds + sqrt(Z) dB on [0, T].

    Negative excursions are truncated at 0; the positive drift at 0 lets the
    state re-enter.  With ``n_paths`` set, returns ``(times, values)`` with
    ``values`` of shape (n_steps+1, n_paths); otherwise a single DiffusionPath.
    """
    if not (z > 0 and T > 0):
        raise ValueError(f"z and T must be positive, got z={z}, T={T}")
    if dt >= T:
        raise ValueError(f"dt={dt} must be smaller than T={T}")
    n = int(math.ceil(T / dt - 1e-9))
    h = T / n
    m = 1 if n_paths is None else n_paths
    vals = np.empty((n + 1, m))
    vals[0] = z
    cur = np.full(m, float(z))
    for k in range(n):
        s = k * h
        drift = F_drift(2 * cur / (T - s))
        cur = cur + drift * h + np.sqrt(cur * h) * rng.standard_normal(m)
        np.maximum(cur, 0.0, out=cur)
        vals[k + 1] = cur
    times = np.linspace(0.0, T, n + 1)
    if n_paths is None:
        return DiffusionPath(times, vals[:, 0])
    return times, vals


def feller_path(z: float, dt: float, n_steps: int, rng: np.random.Generator) -> DiffusionPath:
    """Exact-transition Feller path sampled on a uniform grid."""
    vals = np.empty(n_steps + 1)
    vals[0] = z
    cur = float(z)
    for k in range(n_steps):
        cur = feller_transition_sample(cur, dt, rng) if cur > 0 else 0.0
        vals[k + 1] = cur
    return DiffusionPath(np.arange(n_steps + 1) * dt, vals)


def euler_path(z, dt: float, n_steps: int, rng: np.random.Generator, delta: float = 0.0, n_paths: int = 1):
    """Truncated Euler scheme for dZ = delta dt + sqrt(Z) dB (test oracle)."""
    cur = np.full(n_paths, float(z))
    out = np.empty((n_steps + 1, n_paths))
    out[0] = cur
    for k in range(n_steps):
        cur = cur + delta * dt + np.sqrt(cur * dt) * rng.standard_normal(n_paths)
        np.maximum(cur, 0.0, out=cur)
        out[k + 1] = cur
    return out


def hit_one_before_zero_mc(
    z: float, n: int, dt: float, rng: np.random.Generator, bridge: bool = True, max_time: float = 1e4
) -> tuple[int, int]:
    """Monte Carlo count of exact-transition Feller paths reaching 1 before 0.

    Paths are advanced together and resolved ones are dropped each step.  With
    ``bridge`` a crossing of 1 between grid times is detected by the Brownian
    bridge probability exp(-2(1-a)(1-b)/(a dt)), freezing the diffusion
    coefficient at the left endpoint ``a``.

    Returns:
        (hits, unresolved) where unresolved counts paths alive at ``max_time``.
    """
    cur = np.full(n, float(z))
    hits = 0
    t = 0.0
    while cur.size and t < max_time:
        nxt = feller_transition(cur, dt, rng)
        up = nxt >= 1.0
        if bridge:
            below = ~up & (nxt > 0)
            a, b = cur[below], nxt[below]
            p = np.exp(-2 * (1 - a) * (1 - b) / (np.maximum(a, 1e-300) * dt))
            cross = rng.random(a.size) < p
            up[np.flatnonzero(below)[cross]] = True
        hits += int(up.sum())
        cur = nxt[~up & (nxt > 0)]
        t += dt
    return hits, int(cur.size)


def fractional_moment_bound(z: float, T: float, p: float, K_p: float, params: ParamVector) -> float:
    """Ceiling K_p[(z^{p alpha^N0} T^{p alpha} + z^p) surv(z,T) + z T^{p xi - 1}]."""
    if not (0 < z <= 1 and 0 < T <= 1 and p > 0):
        raise ValueError(f"need z, T in (0, 1] and p > 0, got z={z}, T={T}, p={p}")
    a, xi, n0 = params.alpha, params.xi, params.n0
    first = (z ** (p * a**n0) * T ** (p * a) + z**p) * survival_prob(z, T)
    return K_p * (first + z * T ** (p * xi - 1))
