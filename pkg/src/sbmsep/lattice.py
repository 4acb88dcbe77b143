"""Uniform spatial grid, discrete white noise, heat operator and the rap norm.

Fields hold densities per unit length at cell centres.  The line is
truncated to ``[x_min, x_max]`` with zero-Dirichlet boundary cells, so mass
can only leave through the first and last cell.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numba as nb
import numpy as np

from . import rng as crng

__all__ = [
    "ConfigurationError",
    "ResolutionError",
    "Grid",
    "LatticeField",
    "NoiseStream",
    "NoiseSlice",
    "CrapNorm",
    "heat_half_step",
    "heat_step_array",
    "white_noise_increment",
    "crap_norm",
    "crap_norm_array",
    "triangle_J",
    "mollifier_field",
    "mollifier_values",
    "write_field_csv",
    "read_field_csv",
    "write_frame",
    "read_frame",
    "FRAME_MAGIC",
]

FRAME_MAGIC = b"SBMF"
FRAME_VERSION = 1
# magic, version, reserved, x_min, x_max, n_cells, step, time, seed, digest
_FRAME_HEADER = struct.Struct("<4sHHddQQdQQ")


class ConfigurationError(ValueError):
    """Raised for discretisation settings that break stability or resolution."""


class ResolutionError(ConfigurationError):
    """Raised when a mollifier spans too few cells."""


@dataclass(frozen=True)
class Grid:
    x_min: float
    x_max: float
    n_cells: int

    def __post_init__(self):
        if not (math.isfinite(self.x_min) and math.isfinite(self.x_max) and self.x_max > self.x_min):
            raise ConfigurationError(f"bad domain [{self.x_min}, {self.x_max}]")
        if self.n_cells < 3:
            raise ConfigurationError(f"need at least 3 cells, got {self.n_cells}")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_cells

    @property
    def x(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n_cells) + 0.5) * self.dx

    @classmethod
    def with_spacing(cls, x_min: float, x_max: float, dx: float) -> "Grid":
        """Grid of spacing exactly ``dx`` covering at least ``[x_min, x_max]``."""
        n = int(math.ceil((x_max - x_min) / dx - 1e-9))
        return cls(x_min, x_min + n * dx, n)

    def index_of(self, x: float) -> int:
        return int(np.clip(math.floor((x - self.x_min) / self.dx), 0, self.n_cells - 1))


@dataclass
class LatticeField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_cells,):
            raise ValueError(f"values must have shape ({self.grid.n_cells},), got {self.values.shape}")

    @classmethod
    def zeros(cls, grid: Grid) -> "LatticeField":
        return cls(grid, np.zeros(grid.n_cells))

    def mass(self) -> float:
        return float(self.grid.dx * self.values.sum())

    def is_nonnegative(self) -> bool:
        return bool(np.all(self.values >= 0))

    def copy(self) -> "LatticeField":
        return LatticeField(self.grid, self.values.copy())


@nb.njit(cache=True)
def heat_step_array(vals, out, lam):
    """``out = vals + lam * second difference``; first and last cell pinned to 0."""
    n = vals.shape[0]
    out[0] = 0.0
    out[n - 1] = 0.0
    for k in range(1, n - 1):
        out[k] = vals[k] + lam * (vals[k - 1] - 2.0 * vals[k] + vals[k + 1])


def _check_stability(dt: float, dx: float) -> None:
    if not 0 < dt <= dx * dx / 2 * (1 + 1e-12):
        raise ConfigurationError(f"explicit heat step unstable: dt={dt:.6g} > dx^2/2={dx * dx / 2:.6g} (dx={dx:.6g})")


def heat_half_step(f: LatticeField, dt: float) -> LatticeField:
    """One explicit step of d/dt = (1/2) Laplacian with zero-Dirichlet ends."""
    dx = f.grid.dx
    _check_stability(dt, dx)
    out = np.empty_like(f.values)
    heat_step_array(f.values, out, 0.5 * dt / (dx * dx))
    return LatticeField(f.grid, out)


@dataclass(frozen=True)
class NoiseStream:
    seed: int
    stream_id: int = crng.STREAM_SHARED


@dataclass(frozen=True)
class NoiseSlice:
    grid: Grid
    gaussians: np.ndarray
    stream_id: int
    step: int
    dt: float

    def increment(self) -> np.ndarray:
        """Per-cell white-noise factor xi * sqrt(dt/dx)."""
        return self.gaussians * math.sqrt(self.dt / self.grid.dx)


def white_noise_increment(grid: Grid, dt: float, stream: NoiseStream, step: int) -> NoiseSlice:
    """Standard normals for one step; cell k draws counter k of key (seed, stream, step)."""
    g = crng.normals(stream.seed, stream.stream_id, step, grid.n_cells)
    return NoiseSlice(grid, g, stream.stream_id, step, dt)


@dataclass(frozen=True)
class CrapNorm:
    value: float
    tail: float


@nb.njit(cache=True)
def crap_norm_array(x, vals, lam_max):
    """Truncated rap norm sum_{lam<=lam_max} min(|f|_lam, 1) / 2^lam."""
    total = 0.0
    for lam in range(1, lam_max + 1):
        # log-space max avoids overflow of exp(lam |x|)
        best = -np.inf
        for k in range(vals.shape[0]):
            v = abs(vals[k])
            if v > 0.0:
                lv = math.log(v) + lam * abs(x[k])
                if lv > best:
                    best = lv
        term = 1.0 if best >= 0.0 else math.exp(best)
        total += term / 2.0**lam
    return total


def crap_norm(f: LatticeField, lambda_max: int = 30) -> CrapNorm:
    if lambda_max < 1:
        raise ValueError(f"lambda_max must be >= 1, got {lambda_max}")
    return CrapNorm(float(crap_norm_array(f.grid.x, f.values, lambda_max)), 2.0**-lambda_max)


def triangle_J(u):
    """Even bump (1 - |u|)_+ with unit integral and support [-1, 1]."""
    return np.maximum(1.0 - np.abs(u), 0.0)


def mollifier_values(x_cells: np.ndarray, x: float, eps: float, J: Callable = triangle_J) -> np.ndarray:
    h = math.sqrt(eps)
    return h * J((x - x_cells) / h)


def mollifier_field(grid: Grid, x: float, eps: float, J: Callable = triangle_J) -> LatticeField:
    """Immigrant profile z -> eps^{1/2} J((x - z) eps^{-1/2}); its mass is eps * int J."""
    if math.sqrt(eps) < 3 * grid.dx:
        raise ResolutionError(f"mollifier under-resolved: eps^1/2={math.sqrt(eps):.4g} < 3 dx={3 * grid.dx:.4g}")
    return LatticeField(grid, mollifier_values(grid.x, x, eps, J))


def _header_lines(header: Mapping[str, object] | None) -> str:
    if not header:
        return ""
    return "".join(f"# {k}={v}\n" for k, v in header.items())


def write_field_csv(path, f: LatticeField, header: Mapping[str, object] | None = None) -> None:
    buf = io.StringIO()
    buf.write(_header_lines(header))
    buf.write("x,value\n")
    np.savetxt(buf, np.column_stack([f.grid.x, f.values]), delimiter=",", fmt="%.17g")
    Path(path).write_text(buf.getvalue())


def read_field_csv(path) -> tuple[np.ndarray, np.ndarray, dict]:
    header, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# ") and "=" in line:
            k, v = line[2:].split("=", 1)
            header[k] = v
        elif line and not line.startswith(("#", "x,")):
            rows.append(line)
    data = np.loadtxt(rows, delimiter=",", ndmin=2)
    return data[:, 0], data[:, 1], header


def write_frame(fh, f: LatticeField, step: int, time: float, seed: int = 0, digest: int = 0) -> None:
    """Append one binary frame: fixed little-endian header then float64 payload."""
    g = f.grid
    fh.write(_FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, 0, g.x_min, g.x_max, g.n_cells, step, time, seed, digest))
    fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_frame(fh) -> tuple[LatticeField, dict] | None:
    raw = fh.read(_FRAME_HEADER.size)
    if not raw:
        return None
    if len(raw) != _FRAME_HEADER.size:
        raise ValueError("truncated frame header")
    magic, version, _, x_min, x_max, n, step, time, seed, digest = _FRAME_HEADER.unpack(raw)
    if magic != FRAME_MAGIC or version != FRAME_VERSION:
        raise ValueError(f"not a frame: magic={magic!r} version={version}")
    payload = fh.read(8 * n)
    if len(payload) != 8 * n:
        raise ValueError("truncated frame payload")
    vals = np.frombuffer(payload, dtype="<f8").astype(float)
    meta = {"step": step, "time": time, "seed": seed, "digest": digest}
    return LatticeField(Grid(x_min, x_max, n), vals), meta
