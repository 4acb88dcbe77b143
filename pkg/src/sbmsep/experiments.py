"""Conditioning, stopping times, the separation events and their Monte Carlo tallies.

All event functions read a :class:`~sbmsep.spde.RunRecord`; none of them
re-simulate.  Times are compared on the lattice time grid with the
first-crossing convention: a condition "fails at s" if it fails at the first
grid time >= s where it is evaluated.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import rng as crng
from .diffusion1d import besq4_quarter
from .params import DEFAULT_PARAMS, DerivedConstants, ParameterError, ParamVector, derive_constants, eps0_of_r
from .spde import CoupledSimulation, LatticeConfig, PsiSpec, RunRecord, SimulationAbort, run_single_cluster_batch

__all__ = [
    "StoppingTimes",
    "stopping_times",
    "condition_on_hit",
    "event_G",
    "event_S",
    "event_Gamma",
    "yloc_check",
    "wilson",
    "SeparationConfig",
    "EventTally",
    "ExperimentReport",
    "run_separation",
    "separation_replica",
    "k_star_table",
    "ConditioningResult",
    "run_conditioning",
    "SupportScaling",
    "run_support_scaling",
    "MassReplicaSummary",
    "run_mass_replicas",
]


# --------------------------------------------------------------------------- stopping times


@dataclass(frozen=True)
class StoppingTimes:
    tau1: float
    tau2: float
    tau3: float
    tau: float


def _first_true(times: np.ndarray, flags: np.ndarray) -> float:
    idx = np.flatnonzero(flags)
    return float(times[idx[0]]) if idx.size else math.inf


def stopping_times(
    times: np.ndarray,
    mass_i: np.ndarray,
    s_i: float,
    params: ParamVector,
    psi_mass: float,
    eps: float,
    y_total_after: np.ndarray | None = None,
    t_hit1: float | None = None,
) -> StoppingTimes:
    """The four stopping times of cluster i on a time grid starting at ``s_i``.

    Args:
        times: grid times, ``times[0] == s_i``.
        mass_i: X^i total mass on ``times``.
        y_total_after: sum of Y^j masses over ``s_i < t_j <= t`` on ``times``.
        t_hit1: hitting time of level 1 (None or inf if not hit).

    Infinite results mean the condition never triggered within the record.
    """
    times = np.asarray(times, float)
    m = np.asarray(mass_i, float)
    T1 = math.inf if t_hit1 is None else t_hit1
    # stop the mass at T1
    if math.isfinite(T1):
        m = np.where(times >= T1, np.minimum(m, 1.0), m)
        k1 = np.searchsorted(times, T1)
        if k1 < m.size:
            m = m.copy()
            m[k1:] = m[k1]
    u = times - s_i
    live = u > 0
    tau1 = min(_first_true(times, live & (m < u**params.eta / 4)), T1)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (m[1:] + m[:-1]) * np.diff(times))])
    dev = np.abs(m - psi_mass * eps - u)
    tau2 = min(_first_true(times, live & (dev > params.L * integral**params.alpha)), T1)
    if y_total_after is None:
        tau3 = math.inf
    else:
        tau3 = _first_true(times, np.asarray(y_total_after) > 1.0)
    tau = min(tau1, tau2, tau3, s_i + 1.0)
    return StoppingTimes(tau1, tau2, tau3, tau)


def condition_on_hit(mass_path: np.ndarray, accept_uniform: float | None = None) -> bool:
    """Rejection flag for Q^i: True iff the mass reaches 1 before 0.

    When the record ends with the cluster alive at mass M, the undecided
    future hits 1 first with probability M (linear scale function); with
    ``accept_uniform`` given the replica is accepted iff ``U < M``, otherwise
    undecided replicas are rejected.
    """
    m = np.asarray(mass_path, float)
    up = np.flatnonzero(m >= 1.0)
    down = np.flatnonzero(m <= 0.0)
    first_up = up[0] if up.size else math.inf
    first_down = down[0] if down.size else math.inf
    if first_up < first_down:
        return True
    if first_down < math.inf:
        return False
    if accept_uniform is None:
        return False
    return bool(accept_uniform < m[-1])


# --------------------------------------------------------------------------- events


def _grid_slice(rec: RunRecord, i: int, T: float) -> slice:
    b = int(rec.birth_step_x[i])
    e = min(int(math.floor(T / rec.dt + 1e-9)), rec.steps_done)
    return slice(b + 1, e + 1)


def event_G(rec: RunRecord, i: int, T: float, params: ParamVector, consts: DerivedConstants) -> bool:
    """Window-mass event G^i(T) on grid times in (s_i, T]; vacuous at s_i itself.

    Needs window masses recorded for cluster ``i`` through ``T``
    (``LatticeConfig.track_r``).
    """
    s_i = float(rec.birth_step_x[i] * rec.dt)
    if T < s_i:
        raise ValueError(f"T={T} precedes the birth {s_i} of X^{i}")
    track = rec.config.track_r
    if T > s_i and (track is None or T > s_i + track + 0.5 * rec.dt):
        raise ValueError(f"window masses for X^{i} not recorded through T={T}")
    sl = _grid_slice(rec, i, T)
    if sl.stop <= sl.start:
        return True
    u = np.arange(sl.start, sl.stop) * rec.dt - s_i
    x_ok = rec.wX[sl, i] >= u**params.eta / 4
    eps = rec.config.eps
    cap = consts.k_star * (u ** (consts.kappa1 - consts.wp) + eps**consts.kappa2 * u ** (consts.kappa3 - consts.wp))
    y_ok = rec.wYagg[sl, i] <= cap
    return bool(np.all(x_ok & y_ok))


def event_S(rec: RunRecord, r: float, params: ParamVector, consts: DerivedConstants) -> bool:
    """S(r): some i <= floor(r/eps) has G^i(s_i + r).  Empty index set gives False."""
    n = int(math.floor(r / rec.config.eps + 1e-12))
    n = min(n, rec.mass_x.shape[1])
    for i in range(n):
        s_i = rec.birth_step_x[i] * rec.dt
        if event_G(rec, i, s_i + r, params, consts):
            return True
    return False


def _hull_meets(rec: RunRecord, kind: str, j: int, i: int, s0: float, s1: float) -> bool:
    """Whether the recorded support hull of a cluster meets X^i's parabola on [s0, s1]."""
    sup = rec.sup_x if kind == "X" else rec.sup_y
    k0 = max(int(math.ceil(s0 / rec.dt - 1e-9)), 0)
    k1 = min(int(math.floor(s1 / rec.dt + 1e-9)), rec.steps_done)
    if k1 < k0:
        return False
    lo = sup[k0 : k1 + 1, j, 0]
    hi = sup[k0 : k1 + 1, j, 1]
    alive = lo >= 0
    if not alive.any():
        return False
    x = rec.grid.x
    s = np.arange(k0, k1 + 1) * rec.dt
    s_i = rec.birth_step_x[i] * rec.dt
    w = math.sqrt(rec.config.eps) + np.maximum(s - s_i, 0.0) ** rec.config.beta
    c = rec.schedule.targets_x[i]
    xl = x[np.where(alive, lo, 0)]
    xh = x[np.where(alive, hi, 0)]
    return bool(np.any(alive & (xh >= c - w) & (xl <= c + w)))


@dataclass(frozen=True)
class GammaResult:
    holds: bool
    a: bool
    b: bool
    c: bool
    censored_b: int


def event_Gamma(rec: RunRecord, i: int, r: float) -> GammaResult:
    """Confinement event Gamma^i(r) from recorded support hulls and escape times.

    Clause (b) asks sigma(Y^j) > t_j + 3r; Y^j whose window t_j + 3r passes
    the horizon are judged on the recorded part and counted in ``censored_b``.
    """
    dt = rec.dt
    s_i = rec.birth_step_x[i] * dt
    births_y = rec.birth_step_y * dt
    a = True
    for j, t_j in enumerate(births_y):
        if t_j <= s_i + 1e-12 and _hull_meets(rec, "Y", j, i, s_i, s_i + r):
            a = False
            break
    b = True
    censored = 0
    horizon = rec.steps_done * dt
    for j, t_j in enumerate(births_y):
        if t_j > s_i + r + 1e-12 or t_j > horizon:
            continue
        sig = rec.sigma_time_y(j)
        if sig <= t_j + 3 * r:
            b = False
        elif t_j + 3 * r > horizon:
            censored += 1
    c = rec.sigma_time_x(i) > s_i + 2 * r
    return GammaResult(a and b and c, a, b, c, censored)


def yloc_check(rec: RunRecord, i: int, r: float, tol: float = 1e-12) -> float:
    """max over (s_i, s_i+r] of |Y window mass - sum over J^i Y^j window mass|, relative."""
    sl = _grid_slice(rec, i, rec.birth_step_x[i] * rec.dt + r)
    if sl.stop <= sl.start:
        return 0.0
    a = rec.wYagg[sl, i]
    b = rec.wYJ[sl, i]
    return float(np.max(np.abs(a - b) / (tol + np.abs(a))))


# --------------------------------------------------------------------------- statistics


def wilson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return (float(ci.low), float(ci.high))


def _sigma_p(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n) if n else math.inf


# --------------------------------------------------------------------------- separation


@dataclass(frozen=True)
class SeparationConfig:
    params: ParamVector = DEFAULT_PARAMS
    eps_list: tuple = (0.04, 0.02)
    r: float | None = None
    replicas: int = 500
    seed: int = 0
    horizon: float | None = None
    k_star: float = 1.0
    psi: PsiSpec = PsiSpec()
    dt_ratio: float = 0.25
    norm_stride: int = 16
    lambda_max: int = 20
    enforce_regime: bool = True
    allowance: float = 0.0
    implication_slack: float = 0.0

    def __post_init__(self):
        if self.r is None:
            raise ParameterError("separation radius r is required")
        if not 0 < self.r <= 1:
            raise ParameterError(f"r must lie in (0, 1], got {self.r}")
        if len(self.eps_list) == 0 or any(b >= a for a, b in zip(self.eps_list, self.eps_list[1:])):
            raise ParameterError(f"eps_list must be nonempty and strictly decreasing, got {self.eps_list}")
        if self.replicas < 100:
            raise ParameterError(f"replicas must be >= 100, got {self.replicas}")
        consts = self.constants()
        if self.r > consts.r0 * (1 + 1e-12):
            msg = f"r={self.r} exceeds r0={consts.r0:.6g}"
            if self.enforce_regime:
                raise ParameterError(msg)
        e0 = eps0_of_r(self.r, self.params, self.psi.mass)
        bad = [e for e in self.eps_list if e > e0]
        if bad and self.enforce_regime:
            raise ParameterError(f"eps {bad} exceed eps0(r)={e0:.3g} at r={self.r:.6g}")

    def constants(self) -> DerivedConstants:
        return derive_constants(self.params, self.k_star)

    @property
    def run_horizon(self) -> float:
        return 2 * self.r if self.horizon is None else self.horizon

    def regime_notes(self) -> list[str]:
        consts = self.constants()
        e0 = eps0_of_r(self.r, self.params, self.psi.mass)
        notes = []
        if self.r > consts.r0:
            notes.append(f"r={self.r:.6g} > r0={consts.r0:.6g}: Delta(r) numerator not positive")
        for e in self.eps_list:
            if e > e0:
                notes.append(f"eps={e} > eps0(r)={e0:.3g}")
            if math.floor(self.r / e + 1e-12) == 0:
                notes.append(f"eps={e}: floor(r/eps)=0, S(r) is an empty union")
        return notes

    def digest(self) -> str:
        d = asdict(self)
        d["psi"] = repr(self.psi)
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class EventTally:
    eps: float
    replicas: int = 0
    aborted: int = 0
    s_count: int = 0
    sup_ge_delta: int = 0
    sup_ge_half_delta: int = 0
    implication_violations: int = 0
    g_counts: list = field(default_factory=list)
    gamma_failures: list = field(default_factory=list)
    sigma_early: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    yloc_checked: int = 0
    yloc_max: float = 0.0
    sup_norms: list = field(default_factory=list)

    def merge(self, rep: dict) -> None:
        if rep.get("aborted"):
            self.aborted += 1
            return
        self.replicas += 1
        self.s_count += int(rep["S"])
        self.sup_ge_delta += int(rep["sup_ge_delta"])
        self.sup_ge_half_delta += int(rep["sup_ge_half_delta"])
        self.implication_violations += int(rep["S"] and not rep["sup_ge_delta_slack"])
        for name in ("g_counts", "gamma_failures", "sigma_early", "accepted"):
            vals = rep[name]
            cur = getattr(self, name)
            if len(cur) < len(vals):
                cur.extend([0] * (len(vals) - len(cur)))
            for k, v in enumerate(vals):
                cur[k] += int(v)
        self.yloc_checked += rep["yloc_checked"]
        self.yloc_max = max(self.yloc_max, rep["yloc_max"])
        self.sup_norms.append(rep["sup_norm"])

    def summary(self, r: float, psi_mass: float, delta: float, allowance: float) -> dict:
        n = self.replicas
        p = self.s_count / n if n else 0.0
        sig = _sigma_p(p, n)
        floor = psi_mass * r / 4
        threshold = floor - 3 * sig - allowance
        sn = np.asarray(self.sup_norms) if self.sup_norms else np.zeros(1)
        if p >= floor - 3 * sig:
            floor_status = "PASS"
        elif p >= threshold:
            floor_status = "AMBER"
        else:
            floor_status = "FAIL"
        return {
            "eps": self.eps,
            "replicas": n,
            "aborted": self.aborted,
            "abort_fraction": self.aborted / max(n + self.aborted, 1),
            "S_count": self.s_count,
            "S_freq": p,
            "S_wilson95": wilson(self.s_count, n),
            "S_sigma": sig,
            "floor": floor,
            "floor_threshold": threshold,
            "floor_status": floor_status,
            "sup_ge_delta_freq": self.sup_ge_delta / n if n else 0.0,
            "sup_ge_half_delta_freq": self.sup_ge_half_delta / n if n else 0.0,
            "sup_ge_half_delta_wilson95": wilson(self.sup_ge_half_delta, n),
            "implication_violations": self.implication_violations,
            "delta_r": delta,
            "G_counts": list(self.g_counts),
            "Gamma_failures": list(self.gamma_failures),
            "sigma_early_escapes": list(self.sigma_early),
            "Q_acceptances": list(self.accepted),
            "yloc_checked_steps": self.yloc_checked,
            "yloc_max_rel_dev": self.yloc_max,
            "sup_norm_mean": float(sn.mean()),
            "sup_norm_quantiles": [float(q) for q in np.quantile(sn, [0.05, 0.5, 0.95])],
        }


def separation_replica(cfg: SeparationConfig, eps: float, replica: int) -> dict:
    """One coupled replica for the separation tallies (picklable entry point)."""
    consts = cfg.constants()
    params = cfg.params
    r = cfg.r
    lat = LatticeConfig(
        eps=eps,
        horizon=cfg.run_horizon,
        psi=cfg.psi,
        beta=params.beta,
        beta_prime=params.beta_prime,
        dt_ratio=cfg.dt_ratio,
        norm_stride=cfg.norm_stride,
        lambda_max=cfg.lambda_max,
        track_r=r,
        cov_blocks=1,
    )
    seed = crng.replica_seed(cfg.seed, int(round(eps * 1e9)) * 1_000_003 + replica)
    try:
        sim = CoupledSimulation(lat, seed)
        sim.advance()
    except SimulationAbort:
        return {"aborted": True}
    rec = sim.record()
    n_idx = min(int(math.floor(r / eps + 1e-12)), rec.mass_x.shape[1])
    g = [event_G(rec, i, rec.birth_step_x[i] * rec.dt + r, params, consts) for i in range(n_idx)]
    S = any(g)
    delta = consts.delta(r)
    sup = float(np.nanmax(rec.norm_values)) if rec.norm_values.size else 0.0
    gam = [event_Gamma(rec, i, r) for i in range(n_idx)]
    yl_steps, yl_max = 0, 0.0
    for i, gm in enumerate(gam):
        if gm.holds:
            yl_max = max(yl_max, yloc_check(rec, i, r))
            yl_steps += int(round(r / rec.dt))
    sig_early = [rec.sigma_time_x(i) - rec.birth_step_x[i] * rec.dt <= r for i in range(n_idx)]
    aux = crng.uniforms(seed, crng.STREAM_ACCEPT, 0, max(n_idx, 1))
    acc = [condition_on_hit(rec.mass_x[rec.birth_step_x[i] :, i], aux[i]) for i in range(n_idx)]
    return {
        "aborted": False,
        "S": S,
        "sup_norm": sup,
        "sup_ge_delta": sup >= delta,
        "sup_ge_delta_slack": sup >= delta - cfg.implication_slack,
        "sup_ge_half_delta": sup >= delta / 2,
        "g_counts": g,
        "gamma_failures": [not gm.holds for gm in gam],
        "sigma_early": sig_early,
        "accepted": acc,
        "yloc_checked": yl_steps,
        "yloc_max": yl_max,
        "digest": rec.digest,
    }


def _replica_task(args):
    cfg, eps, rep = args
    return separation_replica(cfg, eps, rep)


def _map(tasks, workers: int):
    if workers <= 1:
        return [_replica_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_replica_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def k_star_table(params: ParamVector, k_values: Sequence[float] = (2.0, 1.0, 0.5, 0.2, 0.1, 0.05, 0.01), psi_mass: float = 1.0) -> list[dict]:
    """r0, Delta(r0) and eps0(r0) as functions of the unresolved constant K*."""
    rows = []
    for k in k_values:
        try:
            c = derive_constants(params, k)
        except ParameterError as exc:
            rows.append({"k_star": k, "error": str(exc)})
            continue
        rows.append({"k_star": k, "r0": c.r0, "delta_r0": c.delta(c.r0), "eps0_r0": c.eps0(c.r0, psi_mass), "psi_r0_over_4": psi_mass * c.r0 / 4})
    return rows


@dataclass
class ExperimentReport:
    kind: str
    config: dict
    results: dict
    seed: int
    runtime_s: float = 0.0
    timestamp: str = ""

    def payload(self) -> dict:
        return {"kind": self.kind, "config": self.config, "results": self.results, "seed": self.seed}

    def digest(self) -> str:
        # excludes timestamp and runtime so reruns with the same config and seed agree
        return hashlib.sha256(json.dumps(self.payload(), sort_keys=True, default=_jsonable).encode()).hexdigest()[:16]

    def to_json(self) -> str:
        d = self.payload() | {"digest": self.digest(), "runtime_s": self.runtime_s, "timestamp": self.timestamp}
        return json.dumps(d, indent=2, sort_keys=True, default=_jsonable)

    def write(self, out_dir, config_digest: str = "") -> dict:
        os.makedirs(out_dir, exist_ok=True)
        paths = {"json": os.path.join(out_dir, "report.json"), "csv": os.path.join(out_dir, "summary.csv")}
        with open(paths["json"], "w") as fh:
            fh.write(self.to_json() + "\n")
        rows = self.results.get("rows", [])
        with open(paths["csv"], "w") as fh:
            fh.write(f"# config_digest={config_digest or self.digest()}\n# seed={self.seed}\n")
            if rows:
                keys = [k for k in rows[0] if not isinstance(rows[0][k], (list, tuple, dict))]
                fh.write(",".join(keys) + "\n")
                for row in rows:
                    fh.write(",".join(_fmt(row[k]) for k in keys) + "\n")
        return paths


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    return str(o)


def run_separation(cfg: SeparationConfig, workers: int = 1) -> ExperimentReport:
    """Simulate ``cfg.replicas`` coupled replicas per eps and tally the separation events.

    Raises:
        SimulationAbort: if more than 1% of replicas at any eps abort.
    """
    t0 = time.time()
    consts = cfg.constants()
    delta = consts.delta(cfg.r)
    rows = []
    for eps in cfg.eps_list:
        tally = EventTally(eps)
        tasks = [(cfg, eps, k) for k in range(cfg.replicas)]
        for rep in _map(tasks, workers):
            tally.merge(rep)
        row = tally.summary(cfg.r, cfg.psi.mass, delta, cfg.allowance)
        if row["abort_fraction"] > 0.01:
            raise SimulationAbort(f"{tally.aborted} of {cfg.replicas} replicas aborted at eps={eps}")
        rows.append(row)
    freqs = [row["S_freq"] for row in rows]
    results = {
        "rows": rows,
        "derived": consts.as_dict() | {"delta_r": delta, "eps0_r": eps0_of_r(cfg.r, cfg.params, cfg.psi.mass)},
        "k_star_table": k_star_table(cfg.params, psi_mass=cfg.psi.mass),
        "regime_notes": cfg.regime_notes(),
        "trend_nonvanishing": bool(freqs[-1] > 0) if freqs else False,
        "floor": cfg.psi.mass * cfg.r / 4,
    }
    conf = {
        "params": cfg.params.as_dict(),
        "eps_list": list(cfg.eps_list),
        "r": cfg.r,
        "replicas": cfg.replicas,
        "horizon": cfg.run_horizon,
        "k_star": cfg.k_star,
        "psi": repr(cfg.psi),
        "dt_ratio": cfg.dt_ratio,
        "norm_stride": cfg.norm_stride,
        "lambda_max": cfg.lambda_max,
        "enforce_regime": cfg.enforce_regime,
        "allowance": cfg.allowance,
        "config_digest": cfg.digest(),
    }
    return ExperimentReport("separation", conf, results, cfg.seed, time.time() - t0, time.strftime("%Y-%m-%dT%H:%M:%S"))


# --------------------------------------------------------------------------- conditioning


@dataclass
class ConditioningResult:
    eps: float
    until: float
    replicas: int
    accepted: int
    acceptance_rate: float
    acceptance_sigma: float
    initial_mass: float
    accepted_masses: np.ndarray
    reference: np.ndarray
    ks_stat: float
    ks_p: float
    ks_stat_allowed: float
    ks_p_allowed: float
    allowance: float
    rejection_mean: float
    importance_mean: float
    importance_se: float
    rejection_se: float
    runtime_s: float

    def as_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if not isinstance(v, np.ndarray)}
        return d


def _conditioning_chunk(args):
    eps, until, k, seed, dt_ratio, psi_mass, scheme, start = args
    out = run_single_cluster_batch(eps, until, k, seed, dt_ratio=dt_ratio, psi_mass=psi_mass, scheme=scheme, start=start)
    u = np.array([crng.uniforms(crng.replica_seed(seed, start + j), crng.STREAM_ACCEPT, 0, 1)[0] for j in range(k)])
    m = np.minimum(out["mass"], 1.0)
    acc = (out["level"] == 1) | ((out["level"] == -1) & (u < m))
    return out["initial_mass"], m, acc


def run_conditioning(
    eps: float = 0.05,
    until: float = 0.1,
    target_accepted: int = 5000,
    seed: int = 0,
    psi_mass: float = 1.0,
    chunk: int = 2000,
    max_replicas: int | None = None,
    allowance_cells: float = 2.0,
    scheme: str = "hybrid",
    dt_ratio: float = 0.5,
    workers: int = 1,
) -> ConditioningResult:
    """Rejection-condition lone clusters on hitting 1 before 0 and compare with quarter-BESQ^4.

    Each replica runs to ``until`` after birth or to absorption.  Replicas
    still alive are accepted iff U < M_until (lazy completion of the hitting
    event; exact by the linear scale function).  Masses are taken stopped
    at 1.  The reference sample is quarter-BESQ^4 started at the deposit
    mass, capped at 1, with the same sample size.

    With ``workers > 1`` chunks run in a process pool, ``workers`` at a time,
    and are consumed in replica order, so the result does not depend on
    ``workers``.
    """
    t0 = time.time()
    if max_replicas is None:
        max_replicas = int(20 * target_accepted / (psi_mass * eps)) + chunk
    acc_masses: list[np.ndarray] = []
    all_mass: list[np.ndarray] = []
    n_acc = 0
    n = 0
    init = eps * psi_mass
    step = max(workers, 1)
    while n_acc < target_accepted and n < max_replicas:
        starts = []
        for _ in range(step):
            k = min(chunk, max_replicas - n - sum(c for _, c in starts))
            if k <= 0:
                break
            starts.append((n + sum(c for _, c in starts), k))
        tasks = [(eps, until, k, seed, dt_ratio, psi_mass, scheme, st) for st, k in starts]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                outs = list(ex.map(_conditioning_chunk, tasks))
        else:
            outs = [_conditioning_chunk(t) for t in tasks]
        for (st, k), (chunk_init, m, acc) in zip(starts, outs):
            # identical to the sequential loop: stop at the first chunk that reaches the target
            if n_acc >= target_accepted:
                break
            init = chunk_init
            acc_masses.append(m[acc])
            all_mass.append(m)
            n_acc += int(acc.sum())
            n += k
    am = np.concatenate(acc_masses)[:target_accepted] if acc_masses else np.zeros(0)
    allm = np.concatenate(all_mass) if all_mass else np.zeros(0)
    ref_rng = np.random.default_rng([seed & 0xFFFFFFFF, 99])
    ref = np.minimum(besq4_quarter(np.full(max(am.size, 1), init), until, ref_rng), 1.0)
    if am.size:
        ks = stats.ks_2samp(am, ref)
        D, p = float(ks.statistic), float(ks.pvalue)
    else:
        D, p = 1.0, 0.0
    dx = eps / 8
    allowance = allowance_cells * dx
    D_allowed = max(D - allowance, 0.0)
    en = am.size * ref.size / max(am.size + ref.size, 1)
    p_allowed = float(stats.kstwo.sf(D_allowed, max(int(round(en)), 1))) if am.size else 0.0
    rate = n_acc / n if n else 0.0
    # Q-mean by rejection vs importance weight M/psi eps
    w = allm / init
    imp = float(np.mean(w * allm))
    imp_se = float(np.std(w * allm) / math.sqrt(max(allm.size, 1)))
    rej = float(am.mean()) if am.size else math.nan
    rej_se = float(am.std() / math.sqrt(am.size)) if am.size else math.nan
    return ConditioningResult(
        eps, until, n, n_acc, rate, _sigma_p(psi_mass * eps, n), init, am, ref, D, p, D_allowed, p_allowed, allowance, rej, imp, imp_se, rej_se, time.time() - t0
    )


# --------------------------------------------------------------------------- support propagation


@dataclass
class SupportScaling:
    eps_list: list
    r_list: list
    freq: np.ndarray
    counts: np.ndarray
    replicas: int
    slope: float
    slope_target: float
    slope_error: float
    intercept: float

    def as_dict(self) -> dict:
        return {
            "eps_list": list(self.eps_list),
            "r_list": list(self.r_list),
            "freq": self.freq.tolist(),
            "counts": self.counts.tolist(),
            "replicas": self.replicas,
            "slope": self.slope,
            "slope_target": self.slope_target,
            "slope_error": self.slope_error,
            "intercept": self.intercept,
        }


def run_support_scaling(eps_list: Sequence[float], r_list: Sequence[float], replicas: int, seed: int = 0, beta: float = 0.49, dt_ratio: float = 0.5) -> SupportScaling:
    """Frequency of sigma_beta - s_i <= r for lone clusters, and its log-log slope.

    The fitted model is log P = c + slope * log(eps (r v eps)); the target
    slope is 1.  Cells with zero frequency are left out of the fit.
    """
    rmax = max(r_list)
    freq = np.zeros((len(eps_list), len(r_list)))
    counts = np.zeros_like(freq, dtype=np.int64)
    for a, eps in enumerate(eps_list):
        out = run_single_cluster_batch(eps, rmax, replicas, seed + a, beta=beta, dt_ratio=dt_ratio, stop_on_sigma=True)
        for b, r in enumerate(r_list):
            counts[a, b] = int(np.sum(out["sigma"] <= r))
            freq[a, b] = counts[a, b] / replicas
    X, Yv = [], []
    for a, eps in enumerate(eps_list):
        for b, r in enumerate(r_list):
            if freq[a, b] > 0:
                X.append(math.log(eps * max(r, eps)))
                Yv.append(math.log(freq[a, b]))
    if len(X) >= 2:
        fit = stats.linregress(X, Yv)
        slope, icpt = float(fit.slope), float(fit.intercept)
    else:
        slope, icpt = math.nan, math.nan
    return SupportScaling(list(eps_list), list(r_list), freq, counts, replicas, slope, 1.0, abs(slope - 1.0), icpt)


# --------------------------------------------------------------------------- mass and covariation replicas


@dataclass
class MassReplicaSummary:
    times: list
    means: list
    ses: list
    expected: list
    within_3sigma: list
    cov_holds: int
    cov_pairs_runs: int
    replicas: int
    aborted: int


def run_mass_replicas(cfg: LatticeConfig, replicas: int, seed: int, times: Sequence[float]) -> MassReplicaSummary:
    """Total X mass at ``times`` over replicas, and the covariation bound per run (H = 1 and random H)."""
    from .spde import covariation_check

    vals = np.zeros((replicas, len(times)))
    ok_rows = np.zeros(replicas, bool)
    holds = 0
    expected = [0.0] * len(times)
    for rep in range(replicas):
        try:
            sim = CoupledSimulation(cfg, crng.replica_seed(seed, rep))
            sim.advance()
        except SimulationAbort:
            continue
        rec = sim.record()
        ks = [int(round(t / rec.dt)) for t in times]
        vals[rep] = [rec.mass_x[k].sum() for k in ks]
        ok_rows[rep] = True
        expected = [float(cfg.psi.mass * cfg.eps * np.sum(rec.birth_step_x <= k)) for k in ks]
        rng = np.random.default_rng([seed & 0xFFFFFFFF, rep])
        ok = all(covariation_check(rec, i, j, rng=rng).holds for i in range(rec.mass_x.shape[1]) for j in range(rec.mass_y.shape[1]))
        holds += int(ok)
    v = vals[ok_rows]
    good = int(ok_rows.sum())
    aborted = replicas - good
    means = v.mean(axis=0)
    ses = v.std(axis=0, ddof=1) / math.sqrt(max(good, 1))
    within = [bool(abs(m - e) <= 3 * s) for m, e, s in zip(means, expected, ses)]
    return MassReplicaSummary(list(times), means.tolist(), ses.tolist(), expected, within, holds, good, replicas, aborted)
