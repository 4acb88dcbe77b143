"""Coupled epsilon-approximating pair (X, Y) on a lattice, one shared white noise.

Each immigrant starts its own cluster field.  Per step and per cell:

1. every cluster takes an explicit heat step (nonnegative for dt <= dx^2/2);
2. one shared normal ``g`` is drawn for the cell;
3. X-clusters with positive mass at the cell receive noises
   ``xi = H (g, aux)`` where ``H`` is the Householder reflection sending e1
   to u = sqrt(m)/sqrt(sum m).  Hence sum_j sqrt(m_j) xi_j = sqrt(sum m) g and
   the xi_j are independent standard normals;
4. Y-clusters do the same with the same ``g`` and their own auxiliary draws;
5. each cluster cell then branches.  In the Gaussian regime
   (2 m dx / dt >= ``mu_switch``) the update is ``c + sqrt(c) xi sqrt(dt/dx)``
   clamped at 0.  Below it the cell mass takes an exact Feller step whose
   Poisson count is the quantile of ``Phi(xi)``, so the same normal still
   drives it monotonically.

Scheme ``"truncated"`` uses the Gaussian update everywhere; it is kept for
bias measurements only.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba as nb
import numpy as np

from . import rng as crng
from .diffusion1d import DiffusionPath
from .lattice import ConfigurationError, Grid, LatticeField, crap_norm_array, mollifier_values, triangle_J

__all__ = [
    "PsiSpec",
    "ImmigrationSchedule",
    "ClusterSet",
    "CoupledState",
    "LatticeConfig",
    "CoupledSimulation",
    "RunRecord",
    "SimulationAbort",
    "sample_targets",
    "allocate_noise",
    "allocation_matrix",
    "step_coupled",
    "mass_process",
    "covariation_check",
    "CovariationReport",
    "support_envelope_check",
    "run_single_cluster_batch",
    "write_mass_csv",
]

KSLOT = 4096
SUPPORT_THRESHOLD = 1e-12
UNDERFLOW = 1e-200
SCHEMES = ("hybrid", "truncated")


class SimulationAbort(RuntimeError):
    """Raised when a replica produces non-finite values."""


# --------------------------------------------------------------------------- immigration


@dataclass(frozen=True)
class PsiSpec:
    """Immigration function: a trapezoid (default), box or tent on [lo, hi] with total mass ``mass``."""

    shape: str = "trapezoid"
    lo: float = 0.0
    hi: float = 1.0
    mass: float = 1.0
    ramp: float = 0.05

    def __post_init__(self):
        if self.shape not in ("trapezoid", "box", "tent"):
            raise ValueError(f"unknown psi shape {self.shape!r}")
        if not self.hi > self.lo:
            raise ValueError(f"psi support must be nondegenerate, got [{self.lo}, {self.hi}]")
        if not self.mass >= 0:
            raise ValueError(f"psi mass must be >= 0, got {self.mass}")

    def _shape(self, x):
        x = np.asarray(x, dtype=float)
        w = self.hi - self.lo
        if self.shape == "box":
            return ((x >= self.lo) & (x <= self.hi)).astype(float)
        if self.shape == "tent":
            mid = 0.5 * (self.lo + self.hi)
            return np.maximum(1 - np.abs(x - mid) / (w / 2), 0.0)
        ramp = self.ramp * w
        up = np.clip((x - self.lo) / ramp, 0, 1)
        down = np.clip((self.hi - x) / ramp, 0, 1)
        return np.minimum(up, down)

    def _shape_integral(self) -> float:
        w = self.hi - self.lo
        return {"box": w, "tent": w / 2, "trapezoid": w * (1 - self.ramp)}[self.shape]

    def __call__(self, x):
        if self.mass == 0:
            return np.zeros_like(np.asarray(x, dtype=float))
        return self.mass * self._shape(x) / self._shape_integral()


def sample_targets(psi, n: int, rng: np.random.Generator, support: tuple[float, float] | None = None, resolution: int = 8193) -> np.ndarray:
    """i.i.d. draws from psi(x)dx/psi(1) by inverse CDF on an interpolated cumulative."""
    if support is None:
        support = (psi.lo, psi.hi)
    xs = np.linspace(support[0], support[1], resolution)
    dens = np.asarray(psi(xs), dtype=float)
    if np.any(dens < 0) or not np.any(dens > 0):
        raise ValueError("psi must be nonnegative and not identically zero")
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(xs))])
    cdf /= cdf[-1]
    # strictly increasing knots so interpolation inverts cleanly across flat pieces
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return np.interp(rng.random(n), cdf[keep], xs[keep])


@dataclass(frozen=True)
class ImmigrationSchedule:
    eps: float
    targets_x: np.ndarray
    targets_y: np.ndarray
    psi_mass: float = 1.0

    def __post_init__(self):
        cap = min(1 / (8 * self.psi_mass), 1.0) if self.psi_mass > 0 else 1.0
        if not 0 < self.eps <= cap * (1 + 1e-12):
            raise ValueError(f"eps={self.eps} outside (0, {cap:.6g}]")

    @property
    def s_times(self) -> np.ndarray:
        return (np.arange(1, len(self.targets_x) + 1) - 0.5) * self.eps

    @property
    def t_times(self) -> np.ndarray:
        return np.arange(1, len(self.targets_y) + 1) * self.eps

    @classmethod
    def build(cls, eps: float, horizon: float, psi: PsiSpec, rng: np.random.Generator, n_x: int | None = None, n_y: int | None = None, same_targets: bool = False):
        nx = int(math.floor(horizon / eps + 0.5 + 1e-9)) if n_x is None else n_x
        ny = int(math.floor(horizon / eps + 1e-9)) if n_y is None else n_y
        tx = sample_targets(psi, nx, rng)
        ty = tx[:ny].copy() if same_targets and ny <= nx else sample_targets(psi, ny, rng)
        return cls(eps, tx, ty, psi.mass)


# --------------------------------------------------------------------------- noise allocation


def allocation_matrix(masses: Sequence[float]) -> np.ndarray:
    """Orthogonal M with first column u = sqrt(m)/sqrt(sum m) (Householder)."""
    m = np.asarray(masses, dtype=float)
    k = m.size
    s = m.sum()
    e1 = np.zeros(k)
    e1[0] = 1.0
    u = np.sqrt(m / s) if s > 0 else e1
    v = e1 - u
    vv = v @ v
    if vv < 1e-300:
        return np.eye(k)
    return np.eye(k) - 2.0 * np.outer(v, v) / vv


def allocate_noise(masses: Sequence[float], shared_g: float, aux: Sequence[float]) -> np.ndarray:
    """Cluster noises xi = M(masses) (shared_g, aux); sum sqrt(m_j) xi_j = sqrt(sum m) shared_g."""
    m = np.asarray(masses, dtype=float)
    if m.ndim != 1 or m.size == 0:
        raise ValueError("masses must be a nonempty vector")
    if np.any(m < 0) or not np.all(np.isfinite(m)):
        raise ValueError("masses must be finite and nonnegative")
    aux = np.asarray(aux, dtype=float)
    if aux.size != m.size - 1:
        raise ValueError(f"need {m.size - 1} auxiliary normals, got {aux.size}")
    w = np.concatenate([[shared_g], aux])
    return allocation_matrix(m) @ w


# --------------------------------------------------------------------------- kernel


_RECIP = 1.0 / np.arange(1, 4097, dtype=np.float64)


@nb.njit(cache=True, error_model="numpy")
def _poisson_quantile(u, mu):
    """Smallest k with P(Poisson(mu) <= k) >= u (sequential search, mu < ~50)."""
    # exp(-mu) >= 1 - mu, so this settles most halo cells without exp
    if u <= 1.0 - mu:
        return 0
    p = math.exp(-mu)
    cdf = p
    k = 0
    while u > cdf and k < 4096:
        p *= mu * _RECIP[k]
        k += 1
        cdf += p
        if p < 1e-300 and k > mu:
            break
    return k


@nb.njit(cache=True, error_model="numpy")
def _branch(h, xi, dx, bdt, sq, mu_switch, hybrid, gkey, gbase):
    """Branching update of one cluster cell; returns (new value, mass added by clamping).

    ``bdt`` is noise^2 * dt, the branching time of the step; 0 disables branching.
    """
    mu = 2.0 * h * dx / bdt
    if (not hybrid) or mu >= mu_switch:
        v = h + math.sqrt(h) * xi * sq
        if v < 0.0:
            return 0.0, -v * dx
        return v, 0.0
    u = 0.5 * math.erfc(-xi / math.sqrt(2.0))
    n = _poisson_quantile(u, mu)
    if n == 0:
        return 0.0, 0.0
    return _gamma_int(n, gkey, gbase) * (bdt / 2.0) / dx, 0.0


@nb.njit(cache=True, error_model="numpy")
def _gamma_int(n, gkey, gbase):
    """Gamma(n, 1) for integer n >= 1 from counter-based draws.

    Small shapes sum exponentials; larger ones use Marsaglia-Tsang with
    normals on even counters below gbase+512 and uniforms from gbase+512.
    """
    if n < 4:
        acc = 0.0
        for q in range(n):
            acc -= math.log(crng.uniform_at(gkey, gbase + np.uint64(512 + q)))
        return acc
    d = n - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    for q in range(255):
        x = crng.normal_at(gkey, gbase + np.uint64(2 * q))
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = crng.uniform_at(gkey, gbase + np.uint64(512 + q))
        x2 = x * x
        if u < 1.0 - 0.0331 * x2 * x2:
            return d * v
        if math.log(u) < 0.5 * x2 + d - d * v + d * math.log(v):
            return d * v
    return float(n)


@nb.njit(cache=True, error_model="numpy")
def _float_bits(x):
    return np.uint64(np.int64(x * 4294967296.0) & np.int64(0x7FFFFFFFFFFFFFFF))


@nb.njit(cache=True, error_model="numpy")
def _advance(
    valsX, bufX, loX, hiX, bornX, cX, bX,
    valsY, bufY, loY, hiY, bornY, cY, bY,
    x0, dx, dt, noise, mu_switch, hybrid, seed,
    step_start, step_end,
    eps_half, beta, beta_prime, lam_max, norm_stride,
    massX, massY, supX, supY, sigX, sigY,
    trackX, wX, wYagg, wYJ,
    normvals, resid, clampX, clampY, digest,
    cov_pred, cov_bound, n_blocks, n_total,
    stop_on_hit,
    work_u, work_m, work_idx, work_xi, work_ux, diff,
):
    n = valsX.shape[1]
    KX = valsX.shape[0]
    KY = valsY.shape[0]
    lam = 0.5 * dt / (dx * dx)
    sq = math.sqrt(dt / dx) * noise
    bdt = noise * noise * dt
    hybrid_b = hybrid != 0
    parity = 0
    step = step_start
    while step < step_end:
        t1 = (step + 1) * dt
        kS = crng.step_key(np.uint64(seed), np.uint64(crng.STREAM_SHARED), np.uint64(step))
        kAX = crng.step_key(np.uint64(seed), np.uint64(crng.STREAM_AUX_X), np.uint64(step))
        kAY = crng.step_key(np.uint64(seed), np.uint64(crng.STREAM_AUX_Y), np.uint64(step))
        kGX = crng.step_key(np.uint64(seed), np.uint64(crng.STREAM_AUX_X + 16), np.uint64(step))
        kGY = crng.step_key(np.uint64(seed), np.uint64(crng.STREAM_AUX_Y + 16), np.uint64(step))
        # heat step into buffers; the global range is the union of expanded windows
        glo = n
        ghi = 0
        for j in range(KX):
            if bornX[j] and hiX[j] > loX[j]:
                a = max(loX[j] - 1, 1)
                b = min(hiX[j] + 1, n - 1)
                for k in range(a, b):
                    bufX[j, k] = valsX[j, k] + lam * (valsX[j, k - 1] - 2.0 * valsX[j, k] + valsX[j, k + 1])
                    if bufX[j, k] < UNDERFLOW:
                        bufX[j, k] = 0.0
                loX[j] = a
                hiX[j] = b
                glo = min(glo, a)
                ghi = max(ghi, b)
        for j in range(KY):
            if bornY[j] and hiY[j] > loY[j]:
                a = max(loY[j] - 1, 1)
                b = min(hiY[j] + 1, n - 1)
                for k in range(a, b):
                    bufY[j, k] = valsY[j, k] + lam * (valsY[j, k - 1] - 2.0 * valsY[j, k] + valsY[j, k + 1])
                    if bufY[j, k] < UNDERFLOW:
                        bufY[j, k] = 0.0
                loY[j] = a
                hiY[j] = b
                glo = min(glo, a)
                ghi = max(ghi, b)
        block = min(step * n_blocks // max(n_total, 1), n_blocks - 1)
        rmax = 0.0
        cadd_x = 0.0
        cadd_y = 0.0
        gpair = -1
        g0 = 0.0
        g1 = 0.0
        for k in range(glo, ghi):
            if (k >> 1) != gpair:
                gpair = k >> 1
                g0, g1 = crng.normal_pair_at(kS, np.uint64(gpair))
            g = g1 if k & 1 else g0
            # ---- X clusters at cell k
            kx = 0
            sx = 0.0
            for j in range(KX):
                if bornX[j] and loX[j] <= k < hiX[j] and bufX[j, k] > 0.0:
                    work_idx[kx] = j
                    work_m[kx] = bufX[j, k]
                    sx += bufX[j, k]
                    kx += 1
            if kx > 0:
                digest[0] = crng.mix64(digest[0] ^ _float_bits(g))
                rs = math.sqrt(sx)
                vv = 0.0
                vw = 0.0
                for q in range(kx):
                    uq = math.sqrt(work_m[q]) / rs
                    work_ux[q] = uq
                    vq = (1.0 if q == 0 else 0.0) - uq
                    wq = g if q == 0 else crng.normal_at(kAX, np.uint64(k * KSLOT + q))
                    work_u[q] = vq
                    work_xi[q] = wq
                    vv += vq * vq
                    vw += vq * wq
                acc = 0.0
                for q in range(kx):
                    if vv > 1e-300:
                        work_xi[q] = work_xi[q] - 2.0 * work_u[q] * vw / vv
                    acc += math.sqrt(work_m[q]) * work_xi[q]
                r = abs(acc - rs * g) / (1.0 + rs * abs(g))
                if r > rmax:
                    rmax = r
                for q in range(kx):
                    j = work_idx[q]
                    gbase = np.uint64((k * KSLOT + j) * 1024)
                    v, c = _branch(work_m[q], work_xi[q], dx, bdt, sq, mu_switch, hybrid_b, kGX, gbase)
                    bufX[j, k] = v
                    cadd_x += c
            # keep the X allocation for the covariation bracket
            kxs = kx
            sxs = sx
            for q in range(kx):
                work_ux[KX + KY + q] = work_m[q]
                work_idx[KX + KY + q] = work_idx[q]
            # ---- Y clusters at cell k
            ky = 0
            sy = 0.0
            for j in range(KY):
                if bornY[j] and loY[j] <= k < hiY[j] and bufY[j, k] > 0.0:
                    work_idx[ky] = j
                    work_m[ky] = bufY[j, k]
                    sy += bufY[j, k]
                    ky += 1
            if ky > 0:
                digest[1] = crng.mix64(digest[1] ^ _float_bits(g))
                rs = math.sqrt(sy)
                vv = 0.0
                vw = 0.0
                for q in range(ky):
                    uq = math.sqrt(work_m[q]) / rs
                    vq = (1.0 if q == 0 else 0.0) - uq
                    wq = g if q == 0 else crng.normal_at(kAY, np.uint64(k * KSLOT + q))
                    work_u[q] = vq
                    work_xi[q] = wq
                    vv += vq * vq
                    vw += vq * wq
                acc = 0.0
                for q in range(ky):
                    if vv > 1e-300:
                        work_xi[q] = work_xi[q] - 2.0 * work_u[q] * vw / vv
                    acc += math.sqrt(work_m[q]) * work_xi[q]
                r = abs(acc - rs * g) / (1.0 + rs * abs(g))
                if r > rmax:
                    rmax = r
                for q in range(ky):
                    j = work_idx[q]
                    gbase = np.uint64((k * KSLOT + j) * 1024)
                    v, c = _branch(work_m[q], work_xi[q], dx, bdt, sq, mu_switch, hybrid_b, kGY, gbase)
                    bufY[j, k] = v
                    cadd_y += c
            # predictable covariation of cluster masses: E[xi^X_i xi^Y_j] = u^X_i u^Y_j
            if kxs > 0 and ky > 0 and n_blocks > 0:
                den = math.sqrt(sxs * sy)
                for p in range(kxs):
                    mi = work_ux[KX + KY + p]
                    ii = work_idx[KX + KY + p]
                    for q in range(ky):
                        mj = work_m[q]
                        jj = work_idx[q]
                        cov_pred[ii, jj, block] += noise * noise * dt * dx * mi * mj / den
                        cov_bound[ii, jj, block] += noise * noise * dt * dx * math.sqrt(mi * mj)
        resid[step + 1] = rmax
        clampX[step + 1] = cadd_x
        clampY[step + 1] = cadd_y
        # zero the old buffers over their old extent, trim windows, swap roles
        for j in range(KX):
            if bornX[j] and hiX[j] > loX[j]:
                for k in range(loX[j], hiX[j]):
                    valsX[j, k] = 0.0
                a = loX[j]
                b = hiX[j]
                while a < b and bufX[j, a] == 0.0:
                    a += 1
                while b > a and bufX[j, b - 1] == 0.0:
                    b -= 1
                loX[j] = a
                hiX[j] = b
        for j in range(KY):
            if bornY[j] and hiY[j] > loY[j]:
                for k in range(loY[j], hiY[j]):
                    valsY[j, k] = 0.0
                a = loY[j]
                b = hiY[j]
                while a < b and bufY[j, a] == 0.0:
                    a += 1
                while b > a and bufY[j, b - 1] == 0.0:
                    b -= 1
                loY[j] = a
                hiY[j] = b
        valsX, bufX = bufX, valsX
        valsY, bufY = bufY, valsY
        parity ^= 1
        # ---- diagnostics on the new state
        rec = step + 1
        stop = False
        for j in range(KX):
            m = 0.0
            slo = -1
            shi = -1
            if bornX[j]:
                for k in range(loX[j], hiX[j]):
                    v = valsX[j, k]
                    if not (v < 1e300):
                        return -1 - step, parity
                    m += v
                    if v > SUPPORT_THRESHOLD:
                        if slo < 0:
                            slo = k
                        shi = k
                m *= dx
                if slo >= 0 and sigX[j] < 0:
                    env = eps_half + (t1 - bX[j]) ** beta
                    xl = x0 + (slo + 0.5) * dx
                    xh = x0 + (shi + 0.5) * dx
                    if xl < cX[j] - env or xh > cX[j] + env:
                        sigX[j] = rec
                if stop_on_hit and (m >= 1.0 or m <= 0.0):
                    stop = True
            massX[rec, j] = m
            supX[rec, j, 0] = slo
            supX[rec, j, 1] = shi
        for j in range(KY):
            m = 0.0
            slo = -1
            shi = -1
            if bornY[j]:
                for k in range(loY[j], hiY[j]):
                    v = valsY[j, k]
                    if not (v < 1e300):
                        return -1 - step, parity
                    m += v
                    if v > SUPPORT_THRESHOLD:
                        if slo < 0:
                            slo = k
                        shi = k
                m *= dx
                if slo >= 0 and sigY[j] < 0:
                    env = eps_half + (t1 - bY[j]) ** beta
                    xl = x0 + (slo + 0.5) * dx
                    xh = x0 + (shi + 0.5) * dx
                    if xl < cY[j] - env or xh > cY[j] + env:
                        sigY[j] = rec
            massY[rec, j] = m
            supY[rec, j, 0] = slo
            supY[rec, j, 1] = shi
        # window masses for tracked X clusters
        for i in range(KX):
            if not bornX[i] or t1 > trackX[i] + 0.5 * dt or t1 < bX[i]:
                continue
            W = eps_half + (t1 - bX[i]) ** beta
            kl = int(math.ceil((cX[i] - W - x0) / dx - 0.5))
            kh = int(math.floor((cX[i] + W - x0) / dx - 0.5))
            kl = max(kl, 0)
            kh = min(kh, n - 1)
            s = 0.0
            for k in range(max(kl, loX[i]), min(kh + 1, hiX[i])):
                s += valsX[i, k]
            wX[rec, i] = s * dx
            reach = 2.0 * (eps_half + (t1 - bX[i]) ** beta_prime)
            sa = 0.0
            sj = 0.0
            for j in range(KY):
                if not bornY[j]:
                    continue
                a = max(kl, loY[j])
                b = min(kh + 1, hiY[j])
                if b <= a:
                    continue
                s = 0.0
                for k in range(a, b):
                    s += valsY[j, k]
                s *= dx
                sa += s
                if bY[j] > bX[i] and bY[j] <= t1 + 0.5 * dt and abs(cY[j] - cX[i]) <= reach:
                    sj += s
            wYagg[rec, i] = sa
            wYJ[rec, i] = sj
        if norm_stride > 0 and rec % norm_stride == 0:
            for k in range(n):
                diff[k] = 0.0
            for j in range(KX):
                if bornX[j]:
                    for k in range(loX[j], hiX[j]):
                        diff[k] += valsX[j, k]
            for j in range(KY):
                if bornY[j]:
                    for k in range(loY[j], hiY[j]):
                        diff[k] -= valsY[j, k]
            total = 0.0
            for lam_i in range(1, lam_max + 1):
                best = -np.inf
                for k in range(n):
                    v = abs(diff[k])
                    if v > 0.0:
                        lv = math.log(v) + lam_i * abs(x0 + (k + 0.5) * dx)
                        if lv > best:
                            best = lv
                term = 1.0 if best >= 0.0 else math.exp(best)
                total += term / 2.0**lam_i
            normvals[rec // norm_stride] = total
        step += 1
        if stop:
            break
    if parity == 1:
        # results live in the buffers; copy back so callers always read vals
        for j in range(KX):
            for k in range(loX[j], hiX[j]):
                bufX[j, k] = valsX[j, k]
                valsX[j, k] = 0.0
        for j in range(KY):
            for k in range(loY[j], hiY[j]):
                bufY[j, k] = valsY[j, k]
                valsY[j, k] = 0.0
    return step, parity


# --------------------------------------------------------------------------- configuration and state


@dataclass(frozen=True)
class LatticeConfig:
    """Discretisation and run controls for one coupled replica."""

    eps: float
    horizon: float
    psi: PsiSpec = PsiSpec()
    beta: float = 0.49
    beta_prime: float = 0.45
    dx: float | None = None
    dt_ratio: float = 0.25
    margin: float = 2.0
    noise: float = 1.0
    scheme: str = "hybrid"
    mu_switch: float = 20.0
    n_x: int | None = None
    n_y: int | None = None
    same_targets: bool = False
    norm_stride: int = 0
    lambda_max: int = 20
    cov_blocks: int = 16
    track_r: float | None = None
    J: Callable = triangle_J

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not 0 < self.dt_ratio <= 0.5:
            raise ConfigurationError(f"dt must satisfy dt <= dx^2/2; got dt_ratio={self.dt_ratio}")
        if not self.horizon > 0:
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}")

    @property
    def spacing(self) -> float:
        return self.eps / 8 if self.dx is None else self.dx

    @property
    def time_step(self) -> float:
        """Largest dt <= dt_ratio dx^2 with eps/2 an integer multiple of dt."""
        dx = self.spacing
        target = self.dt_ratio * dx * dx
        m = max(1, int(math.ceil(self.eps / 2 / target - 1e-9)))
        return self.eps / 2 / m

    @property
    def half_period_steps(self) -> int:
        return int(round(self.eps / 2 / self.time_step))

    def grid(self) -> Grid:
        envelope = math.sqrt(self.eps) + self.horizon**self.beta
        pad = max(self.margin, 1.5 * envelope)
        return Grid.with_spacing(self.psi.lo - pad, self.psi.hi + pad, self.spacing)

    def digest(self) -> str:
        items = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "J"}
        items["psi"] = repr(self.psi)
        items["J"] = getattr(self.J, "__name__", repr(self.J))
        return hashlib.sha256(repr(sorted(items.items())).encode()).hexdigest()[:16]


@dataclass
class ClusterSet:
    grid: Grid
    births: np.ndarray
    targets: np.ndarray
    fields: np.ndarray  # (K, n_cells), zero before birth

    @property
    def aggregate(self) -> LatticeField:
        return LatticeField(self.grid, self.fields.sum(axis=0))

    def cluster(self, j: int) -> LatticeField:
        return LatticeField(self.grid, self.fields[j].copy())

    def decomposition_error(self, aggregate: np.ndarray | None = None) -> float:
        """max |sum_j fields - aggregate| / (1 + |aggregate|), summed in a different order."""
        agg = self.fields.sum(axis=0) if aggregate is None else aggregate
        other = np.zeros(self.grid.n_cells)
        for j in range(self.fields.shape[0] - 1, -1, -1):
            other += self.fields[j]
        return float(np.max(np.abs(other - agg) / (1 + np.abs(agg)))) if other.size else 0.0


@dataclass
class CoupledState:
    time: float
    step: int
    X: ClusterSet
    Y: ClusterSet
    shared_noise_digest: tuple[int, int]


@dataclass
class RunRecord:
    """Per-step diagnostics of one replica (index 0 is the initial state)."""

    config: LatticeConfig
    seed: int
    dt: float
    dx: float
    grid: Grid
    schedule: ImmigrationSchedule
    steps_done: int
    mass_x: np.ndarray
    mass_y: np.ndarray
    sup_x: np.ndarray
    sup_y: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray
    wX: np.ndarray
    wYagg: np.ndarray
    wYJ: np.ndarray
    norm_times: np.ndarray
    norm_values: np.ndarray
    resid: np.ndarray
    clamp_x: np.ndarray
    clamp_y: np.ndarray
    cov_pred: np.ndarray
    cov_bound: np.ndarray
    digest: tuple[int, int]
    birth_step_x: np.ndarray
    birth_step_y: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps_done + 1) * self.dt

    def total_mass_x(self) -> np.ndarray:
        return self.mass_x[: self.steps_done + 1].sum(axis=1)

    def sigma_time_x(self, j: int) -> float:
        return math.inf if self.sigma_x[j] < 0 else self.sigma_x[j] * self.dt

    def sigma_time_y(self, j: int) -> float:
        return math.inf if self.sigma_y[j] < 0 else self.sigma_y[j] * self.dt


class CoupledSimulation:
    """Driver for one replica: schedules deposits and advances the kernel in chunks."""

    def __init__(self, config: LatticeConfig, seed: int, schedule: ImmigrationSchedule | None = None, record: bool = True):
        self.config = config
        self.seed = int(seed)
        self.dx = config.spacing
        self.dt = config.time_step
        self.grid = config.grid()
        if math.sqrt(config.eps) < 3 * self.dx:
            raise ConfigurationError(f"mollifier under-resolved: eps^1/2 < 3 dx (dx={self.dx})")
        if schedule is None:
            trng = np.random.default_rng([self.seed & 0xFFFFFFFF, self.seed >> 32, 7])
            schedule = ImmigrationSchedule.build(config.eps, config.horizon, config.psi, trng, config.n_x, config.n_y, config.same_targets)
        self.schedule = schedule
        n = self.grid.n_cells
        kx, ky = len(schedule.targets_x), len(schedule.targets_y)
        self.n_total = int(round(config.horizon / self.dt))
        hp = config.half_period_steps
        self.birth_step_x = (2 * np.arange(1, kx + 1) - 1) * hp
        self.birth_step_y = 2 * np.arange(1, ky + 1) * hp
        self.valsX = np.zeros((kx, n))
        self.bufX = np.zeros((kx, n))
        self.valsY = np.zeros((ky, n))
        self.bufY = np.zeros((ky, n))
        self.loX = np.zeros(kx, np.int64)
        self.hiX = np.zeros(kx, np.int64)
        self.loY = np.zeros(ky, np.int64)
        self.hiY = np.zeros(ky, np.int64)
        self.bornX = np.zeros(kx, np.bool_)
        self.bornY = np.zeros(ky, np.bool_)
        self.cX = np.asarray(schedule.targets_x, float)
        self.cY = np.asarray(schedule.targets_y, float)
        self.bX = self.birth_step_x * self.dt
        self.bY = self.birth_step_y * self.dt
        T = self.n_total + 1
        self.mass_x = np.zeros((T, kx))
        self.mass_y = np.zeros((T, ky))
        self.sup_x = np.full((T, kx, 2), -1, np.int64)
        self.sup_y = np.full((T, ky, 2), -1, np.int64)
        self.sigma_x = np.full(kx, -1, np.int64)
        self.sigma_y = np.full(ky, -1, np.int64)
        track = np.full(kx, -1.0)
        if config.track_r is not None:
            track = self.bX + config.track_r
        self.trackX = track
        self.wX = np.zeros((T, kx))
        self.wYagg = np.zeros((T, kx))
        self.wYJ = np.zeros((T, kx))
        ns = config.norm_stride
        self.normvals = np.full(T // ns + 1 if ns > 0 else 1, np.nan)
        self.resid = np.zeros(T)
        self.clampX = np.zeros(T)
        self.clampY = np.zeros(T)
        self.digest = np.zeros(2, np.uint64)
        nb_ = max(config.cov_blocks, 1)
        self.cov_pred = np.zeros((kx, ky, nb_))
        self.cov_bound = np.zeros((kx, ky, nb_))
        kk = kx + ky
        self._work = [np.zeros(2 * kk + 2), np.zeros(2 * kk + 2), np.zeros(2 * kk + 2, np.int64), np.zeros(2 * kk + 2), np.zeros(2 * kk + 2)]
        self._diff = np.zeros(n)
        self.step = 0
        self.x = self.grid.x
        self._deposits = {}
        for j, s in enumerate(self.birth_step_x):
            self._deposits.setdefault(int(s), []).append(("X", j))
        for j, s in enumerate(self.birth_step_y):
            self._deposits.setdefault(int(s), []).append(("Y", j))
        self._event_steps = sorted(self._deposits)
        self.stopped = False

    # -- immigration
    def _deposit(self, kind: str, j: int) -> None:
        cfg = self.config
        prof = cfg.psi.mass * mollifier_values(self.x, (self.cX if kind == "X" else self.cY)[j], cfg.eps, cfg.J)
        nz = np.flatnonzero(prof > 0)
        if kind == "X":
            self.valsX[j] += prof
            self.loX[j], self.hiX[j] = (nz[0], nz[-1] + 1) if nz.size else (0, 0)
            self.bornX[j] = True
            self.mass_x[self.step, j] = self.valsX[j].sum() * self.dx
            self.sup_x[self.step, j] = self._support(self.valsX[j])
        else:
            self.valsY[j] += prof
            self.loY[j], self.hiY[j] = (nz[0], nz[-1] + 1) if nz.size else (0, 0)
            self.bornY[j] = True
            self.mass_y[self.step, j] = self.valsY[j].sum() * self.dx
            self.sup_y[self.step, j] = self._support(self.valsY[j])

    @staticmethod
    def _support(vals: np.ndarray) -> tuple[int, int]:
        nz = np.flatnonzero(vals > SUPPORT_THRESHOLD)
        return (int(nz[0]), int(nz[-1])) if nz.size else (-1, -1)

    def _apply_deposits(self) -> None:
        for kind, j in self._deposits.pop(self.step, []):
            self._deposit(kind, j)

    def advance(self, n_steps: int | None = None, stop_on_hit: bool = False) -> int:
        """Advance up to ``n_steps`` (default: to the horizon); returns the current step."""
        target = self.n_total if n_steps is None else min(self.n_total, self.step + n_steps)
        cfg = self.config
        while self.step < target and not self.stopped:
            self._apply_deposits()
            nxt = [s for s in self._event_steps if s > self.step]
            end = min(target, nxt[0]) if nxt else target
            self._event_steps = nxt
            done, _ = _advance(
                self.valsX, self.bufX, self.loX, self.hiX, self.bornX, self.cX, self.bX,
                self.valsY, self.bufY, self.loY, self.hiY, self.bornY, self.cY, self.bY,
                self.grid.x_min, self.dx, self.dt, cfg.noise, cfg.mu_switch, 1 if cfg.scheme == "hybrid" else 0, np.uint64(self.seed),
                self.step, end,
                math.sqrt(cfg.eps), cfg.beta, cfg.beta_prime, cfg.lambda_max, cfg.norm_stride,
                self.mass_x, self.mass_y, self.sup_x, self.sup_y, self.sigma_x, self.sigma_y,
                self.trackX, self.wX, self.wYagg, self.wYJ,
                self.normvals, self.resid, self.clampX, self.clampY, self.digest,
                self.cov_pred, self.cov_bound, max(cfg.cov_blocks, 1), self.n_total,
                stop_on_hit,
                *self._work, self._diff,
            )
            if done < 0:
                raise SimulationAbort(f"non-finite field at step {-done - 1} (seed={self.seed})")
            if done < end:
                self.step = done
                self.stopped = True
                break
            self.step = done
        if self.step == self.n_total:
            self._apply_deposits()
        return self.step

    def state(self) -> CoupledState:
        X = ClusterSet(self.grid, self.bX.copy(), self.cX.copy(), self.valsX.copy())
        Y = ClusterSet(self.grid, self.bY.copy(), self.cY.copy(), self.valsY.copy())
        return CoupledState(self.step * self.dt, self.step, X, Y, (int(self.digest[0]), int(self.digest[1])))

    def record(self) -> RunRecord:
        T = self.step + 1
        ns = self.config.norm_stride
        if ns > 0:
            idx = np.arange(0, T, ns)
            norm_t, norm_v = idx * self.dt, self.normvals[: idx.size].copy()
        else:
            norm_t, norm_v = np.zeros(0), np.zeros(0)
        return RunRecord(
            self.config, self.seed, self.dt, self.dx, self.grid, self.schedule, self.step,
            self.mass_x[:T], self.mass_y[:T], self.sup_x[:T], self.sup_y[:T], self.sigma_x.copy(), self.sigma_y.copy(),
            self.wX[:T], self.wYagg[:T], self.wYJ[:T], norm_t, norm_v,
            self.resid[:T], self.clampX[:T], self.clampY[:T], self.cov_pred.copy(), self.cov_bound.copy(),
            (int(self.digest[0]), int(self.digest[1])), self.birth_step_x.copy(), self.birth_step_y.copy(),
        )


def step_coupled(sim: CoupledSimulation) -> CoupledState:
    """Advance one lattice step (deposits due at the current time land first)."""
    sim.advance(1)
    return sim.state()


# --------------------------------------------------------------------------- analysis of recorded runs


def mass_process(rec: RunRecord, kind: str, j: int) -> DiffusionPath:
    """Total-mass path of one cluster from its birth, with hit markers for 0 and 1."""
    births = rec.birth_step_x if kind == "X" else rec.birth_step_y
    masses = rec.mass_x if kind == "X" else rec.mass_y
    b = int(births[j])
    if b > rec.steps_done:
        raise ValueError(f"cluster {kind}{j} not born by step {rec.steps_done}")
    vals = masses[b : rec.steps_done + 1, j]
    times = np.arange(b, rec.steps_done + 1) * rec.dt
    return DiffusionPath(times, vals)


@dataclass(frozen=True)
class CovariationReport:
    lhs: np.ndarray
    rhs: np.ndarray
    holds: bool
    min_margin: float
    realized: float


def covariation_check(rec: RunRecord, i: int, j: int, H: np.ndarray | None = None, rng: np.random.Generator | None = None, n_random: int = 10) -> CovariationReport:
    """Check |sum H d<X^i(1), Y^j(1)>| <= sum |H| dt dx sum sqrt(X^i Y^j) blockwise.

    ``H`` is piecewise constant on the covariation blocks; H = 1 is checked
    first, then ``n_random`` random bounded H drawn from ``rng``.
    """
    pred = rec.cov_pred[i, j]
    bound = rec.cov_bound[i, j]
    Hs = [np.ones_like(pred)] if H is None else [np.asarray(H, float)]
    if rng is not None:
        Hs += [rng.uniform(-1, 1, pred.size) for _ in range(n_random)]
    lhs = np.array([abs(np.sum(h * pred)) for h in Hs])
    rhs = np.array([np.sum(np.abs(h) * bound) for h in Hs])
    tol = 1e-12 * (1 + rhs)
    margins = rhs - lhs
    # realised covariation of the two mass paths, excluding deposit steps
    dX = np.diff(rec.mass_x[:, i])
    dY = np.diff(rec.mass_y[:, j])
    mask = np.ones(dX.size, bool)
    for s in list(rec.birth_step_x) + list(rec.birth_step_y):
        if 0 < s <= dX.size:
            mask[s - 1] = False
    realized = float(np.sum(dX[mask] * dY[mask]))
    return CovariationReport(lhs, rhs, bool(np.all(lhs <= rhs + tol)), float(margins.min()), realized)


def write_mass_csv(rec: RunRecord, path, header: dict | None = None, stride: int = 1) -> None:
    """Per-cluster mass CSV: step,time,cluster_id,kind,mass,support_lo,support_hi.

    Support bounds are cell-centre coordinates of the first and last cell
    above the support threshold; empty supports are written as nan.
    """
    x = rec.grid.x
    lines = [f"# {k}={v}" for k, v in (header or {}).items()]
    lines.append("step,time,cluster_id,kind,mass,support_lo,support_hi")
    for kind, births, masses, sup in (("X", rec.birth_step_x, rec.mass_x, rec.sup_x), ("Y", rec.birth_step_y, rec.mass_y, rec.sup_y)):
        for j, b in enumerate(births):
            for step in range(int(b), rec.steps_done + 1, stride):
                lo, hi = sup[step, j]
                xl = x[lo] if lo >= 0 else math.nan
                xh = x[hi] if hi >= 0 else math.nan
                lines.append(f"{step},{step * rec.dt:.12g},{j},{kind},{masses[step, j]:.17g},{xl:.12g},{xh:.12g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def support_envelope_check(rec: RunRecord, kind: str = "X") -> np.ndarray:
    """First-escape times sigma_beta per cluster (inf when the support stayed inside)."""
    sig = rec.sigma_x if kind == "X" else rec.sigma_y
    return np.where(sig < 0, np.inf, sig * rec.dt)


# --------------------------------------------------------------------------- single-cluster batches


@nb.njit(cache=True, error_model="numpy")
def _lone_clusters(init, lo0, hi0, x0, center, eps_half, beta, dx, dt, n_steps, seeds, mu_switch, hybrid, stop_on_sigma, noise,
                   out_mass, out_level, out_steps, out_sigma):
    """Batch of independent lone clusters, each started from ``init``.

    Same branching law as the coupled kernel with k = 1 (xi = g).  In the
    exact regime the Poisson uniform is drawn directly, which has the law of
    Phi(g) when no other cluster shares the cell.
    """
    n = init.shape[0]
    vals = np.zeros(n)
    buf = np.zeros(n)
    lam = 0.5 * dt / (dx * dx)
    sq = math.sqrt(dt / dx) * noise
    bdt = noise * noise * dt
    for r in range(seeds.shape[0]):
        seed = np.uint64(seeds[r])
        for k in range(n):
            vals[k] = init[k]
            buf[k] = 0.0
        lo = lo0
        hi = hi0
        level = -1
        sig = -1
        m = 0.0
        step = 0
        while step < n_steps:
            kS = crng.step_key(seed, np.uint64(crng.STREAM_SHARED), np.uint64(step))
            kG = crng.step_key(seed, np.uint64(crng.STREAM_AUX_X + 16), np.uint64(step))
            a = max(lo - 1, 1)
            b = min(hi + 1, n - 1)
            g0 = 0.0
            g1 = 0.0
            gpair = -1
            for k in range(a, b):
                h = vals[k] + lam * (vals[k - 1] - 2.0 * vals[k] + vals[k + 1])
                if h < UNDERFLOW:
                    buf[k] = 0.0
                    continue
                mu = 2.0 * h * dx / bdt
                if hybrid == 0 or mu >= mu_switch:
                    if (k >> 1) != gpair:
                        gpair = k >> 1
                        g0, g1 = crng.normal_pair_at(kS, np.uint64(gpair))
                    v = h + math.sqrt(h) * (g1 if k & 1 else g0) * sq
                    buf[k] = v if v > 0.0 else 0.0
                else:
                    u = crng.uniform_at(kG, np.uint64((k * KSLOT + 1023) * 1024))
                    cnt = _poisson_quantile(u, mu)
                    if cnt == 0:
                        buf[k] = 0.0
                    else:
                        gbase = np.uint64((k * KSLOT) * 1024)
                        buf[k] = _gamma_int(cnt, kG, gbase) * (bdt / 2.0) / dx
            for k in range(lo, hi):
                vals[k] = 0.0
            while a < b and buf[a] == 0.0:
                a += 1
            while b > a and buf[b - 1] == 0.0:
                b -= 1
            m = 0.0
            slo = -1
            shi = -1
            for k in range(a, b):
                v = buf[k]
                vals[k] = v
                buf[k] = 0.0
                m += v
                if v > SUPPORT_THRESHOLD:
                    if slo < 0:
                        slo = k
                    shi = k
            m *= dx
            lo = a
            hi = b
            step += 1
            if sig < 0 and slo >= 0:
                env = eps_half + (step * dt) ** beta
                if x0 + (slo + 0.5) * dx < center - env or x0 + (shi + 0.5) * dx > center + env:
                    sig = step
                    if stop_on_sigma:
                        break
            if m >= 1.0:
                level = 1
                break
            if m <= 0.0:
                level = 0
                break
        for k in range(lo, hi):
            vals[k] = 0.0
        out_mass[r] = m
        out_level[r] = level
        out_steps[r] = step
        out_sigma[r] = sig


def run_single_cluster_batch(eps: float, until: float, n_replicas: int, seed: int, dx: float | None = None, dt_ratio: float = 0.5,
                             psi_mass: float = 1.0, scheme: str = "hybrid", start: int = 0, beta: float = 0.49,
                             stop_on_sigma: bool = False, noise: float = 1.0, J: Callable = triangle_J):
    """Simulate lone clusters from birth to ``until`` or until they hit 0 or 1.

    Returns a dict over replicas: ``mass`` (final or at the hit), ``level``
    (1, 0, or -1 when alive at ``until``), ``time`` since birth at exit, and
    ``sigma`` the first envelope escape time since birth (inf if none).
    The birth position is 0; the answer is translation invariant.
    """
    if scheme not in SCHEMES:
        raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    h = eps / 8 if dx is None else dx
    if math.sqrt(eps) < 3 * h:
        raise ConfigurationError(f"mollifier under-resolved: eps^1/2 < 3 dx (dx={h})")
    if not 0 < dt_ratio <= 0.5:
        raise ConfigurationError(f"dt must satisfy dt <= dx^2/2; got dt_ratio={dt_ratio}")
    dt = dt_ratio * h * h
    n_steps = int(math.ceil(until / dt - 1e-9))
    dt = until / n_steps
    half = math.sqrt(eps) + until**beta
    pad = max(2.0, 1.5 * half)
    grid = Grid.with_spacing(-pad, pad, h)
    init = psi_mass * mollifier_values(grid.x, 0.0, eps, J)
    nz = np.flatnonzero(init > 0)
    seeds = np.array([crng.replica_seed(seed, start + r) for r in range(n_replicas)], dtype=np.uint64)
    mass = np.empty(n_replicas)
    level = np.empty(n_replicas, np.int64)
    steps = np.empty(n_replicas, np.int64)
    sig = np.empty(n_replicas, np.int64)
    _lone_clusters(init, int(nz[0]), int(nz[-1]) + 1, grid.x_min, 0.0, math.sqrt(eps), beta, h, dt, n_steps, seeds,
                   20.0, 1 if scheme == "hybrid" else 0, stop_on_sigma, noise, mass, level, steps, sig)
    return {
        "mass": mass,
        "level": level,
        "time": steps * dt,
        "sigma": np.where(sig < 0, np.inf, sig * dt),
        "dt": dt,
        "dx": h,
        "initial_mass": float(init.sum() * h),
    }
