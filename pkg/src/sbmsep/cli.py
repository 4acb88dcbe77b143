"""Command line front door: ``sbmsep {validate,simulate,decompose,condition,separation}``.

Exit codes: 0 success, 1 validation failure, 2 usage error, 3 runtime abort.

Config files are flat ``section.key = value`` lines; ``#`` starts a comment.
Command line flags (including repeated ``--set section.key=value``) override
the file.  Every artifact starts with ``# config_digest=`` and ``# seed=``
header lines, or carries both fields at the top level of its JSON.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .params import DEFAULT_PARAMS, ParameterError, ParamVector, validate_params

__all__ = ["main", "load_config", "ConfigError", "SCHEMA"]

log = logging.getLogger("sbmsep")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3


class ConfigError(ValueError):
    """Malformed config key or value; maps to exit code 2."""


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


SCHEMA: dict[str, dict[str, type | object]] = {
    "params": {"eta": float, "alpha": float, "L": float, "beta": float, "beta_prime": float, "xi": float, "n0": int},
    "psi": {"shape": str, "lo": float, "hi": float, "mass": float, "ramp": float},
    "lattice": {
        "eps": float, "horizon": float, "dx": _opt_float, "dt_ratio": float, "noise": float, "scheme": str,
        "mu_switch": float, "norm_stride": int, "lambda_max": int, "frame_stride": int, "steps": int,
    },
    "separation": {
        "r": _opt_float, "eps_list": _floats, "replicas": int, "k_star": float, "horizon": _opt_float,
        "enforce_regime": _bool, "allowance": float, "dt_ratio": float,
    },
    "condition": {"eps": float, "until": float, "accepted": int, "max_replicas": int, "allowance_cells": float, "dt_ratio": float},
    "validate": {"size": float, "z_fail": float, "only": str},
    "run": {"seed": int, "workers": int, "out": str},
}

DEFAULTS = {
    "lattice.eps": "0.05", "lattice.horizon": "0.3", "lattice.dt_ratio": "0.25", "lattice.noise": "1",
    "lattice.scheme": "hybrid", "lattice.frame_stride": "0", "lattice.steps": "0",
    "separation.eps_list": "0.04 0.02", "separation.replicas": "500", "separation.k_star": "1",
    "separation.enforce_regime": "true", "separation.allowance": "0", "separation.dt_ratio": "0.25",
    "condition.eps": "0.05", "condition.until": "0.1", "condition.accepted": "5000", "condition.allowance_cells": "2",
    "condition.dt_ratio": "0.5",
    "validate.size": "0.05", "validate.z_fail": "4",
    "run.seed": "0", "run.out": "out",
}


def _parse_line(line: str, where: str) -> tuple[str, str] | None:
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    if "=" not in line:
        raise ConfigError(f"{where}: expected key=value, got {line!r}")
    key, val = (p.strip() for p in line.split("=", 1))
    sec, _, name = key.partition(".")
    if not name or sec not in SCHEMA or name not in SCHEMA[sec]:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    return key, val


def load_config(path: str | None = None, overrides: list[str] | None = None) -> dict:
    """Merge defaults, file and overrides into a typed ``{section: {key: value}}`` dict."""
    raw = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        for n, line in enumerate(p.read_text().splitlines(), 1):
            kv = _parse_line(line, f"{path}:{n}")
            if kv:
                raw[kv[0]] = kv[1]
    for item in overrides or []:
        kv = _parse_line(item, "--set")
        if kv:
            raw[kv[0]] = kv[1]
    out: dict[str, dict] = {s: {} for s in SCHEMA}
    for key, val in raw.items():
        sec, name = key.split(".", 1)
        try:
            out[sec][name] = SCHEMA[sec][name](val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    return out


def config_digest(cfg: dict) -> str:
    """Digest of the typed config with the run section (seed, out, workers) removed."""
    body = {k: v for k, v in cfg.items() if k != "run"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _params(cfg: dict) -> ParamVector:
    return dataclasses.replace(DEFAULT_PARAMS, **cfg["params"])


def _psi(cfg: dict):
    from .spde import PsiSpec

    return PsiSpec(**cfg["psi"])


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["run"]["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {out} ({exc})") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory not writable: {out}")
    return out


def _header(cfg: dict) -> dict:
    return {"config_digest": config_digest(cfg), "seed": cfg["run"]["seed"]}


def _write_json(path: Path, cfg: dict, kind: str, body: dict) -> Path:
    doc = _header(cfg) | {"kind": kind, "config": cfg, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")} | body
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable))
    return path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, float) and not np.isfinite(o):
        return str(o)
    return str(o)


def _write_csv(path: Path, cfg: dict, header: list[str], rows: list[list]) -> Path:
    h = _header(cfg)
    lines = [f"# config_digest={h['config_digest']}", f"# seed={h['seed']}", ",".join(header)]
    lines += [",".join(_cell(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    if isinstance(v, (list, tuple)):
        return ";".join(_cell(x) for x in v)
    return str(v)


# --------------------------------------------------------------------------- commands


def cmd_validate(cfg: dict, only: str | None) -> int:
    from .validate import VALIDATORS, run_validators

    only = only or cfg["validate"].get("only")
    if only is not None and only not in VALIDATORS:
        raise ConfigError(f"unknown module for --only: {only!r} (choose from {', '.join(VALIDATORS)})")
    out = _out_dir(cfg)
    params = _params(cfg)
    violations = validate_params(params)
    if violations:
        for v in violations:
            print(f"FAIL [params/hard] constraint ({v.constraint}) violated: {v}")
        _write_json(out / "report.json", cfg, "validate", {"passed": False, "violations": [str(v) for v in violations]})
        return EXIT_FAIL
    checks = run_validators(only, size=cfg["validate"]["size"], seed=cfg["run"]["seed"], z_fail=cfg["validate"]["z_fail"], params=params)
    for c in checks:
        print(c.line())
    passed = all(c.passed for c in checks)
    rows = [[c.module, c.name, c.kind, "PASS" if c.passed else "FAIL", "" if c.z is None else c.z, c.detail, c.runtime_s] for c in checks]
    _write_csv(out / "summary.csv", cfg, ["module", "check", "kind", "status", "z", "detail", "runtime_s"], rows)
    _write_json(out / "report.json", cfg, "validate", {"passed": passed, "checks": [dataclasses.asdict(c) for c in checks]})
    print(f"{sum(c.passed for c in checks)}/{len(checks)} checks passed")
    return EXIT_OK if passed else EXIT_FAIL


def _lattice_config(cfg: dict):
    from .spde import LatticeConfig

    lc = cfg["lattice"]
    kw = {k: lc[k] for k in ("eps", "horizon", "dt_ratio", "noise", "scheme") if k in lc}
    for k in ("dx", "mu_switch", "norm_stride", "lambda_max"):
        if lc.get(k) is not None:
            kw[k] = lc[k]
    p = _params(cfg)
    return LatticeConfig(psi=_psi(cfg), beta=p.beta, beta_prime=p.beta_prime, **kw)


def cmd_simulate(cfg: dict) -> int:
    from . import report
    from .lattice import write_frame
    from .spde import CoupledSimulation, write_mass_csv

    out = _out_dir(cfg)
    lcfg = _lattice_config(cfg)
    seed = cfg["run"]["seed"]
    sim = CoupledSimulation(lcfg, seed)
    stride = cfg["lattice"]["frame_stride"]
    h = _header(cfg)
    t0 = time.time()
    if stride > 0:
        frames = out / "frames"
        frames.mkdir(exist_ok=True)
        n = 0
        while sim.step < sim.n_total:
            sim.advance(stride)
            st = sim.state()
            for tag, cs in (("X", st.X), ("Y", st.Y)):
                with open(frames / f"{tag}_{n:05d}.sbmf", "wb") as fh:
                    write_frame(fh, cs.aggregate, st.step, st.time, seed=seed, digest=int(h["config_digest"], 16))
            n += 1
    else:
        sim.advance()
    rec = sim.record()
    write_mass_csv(rec, out / "mass.csv", header=h)
    report.write_gnuplot(out / "plot.gp", "mass.csv", h)
    fig = report.plot_mass_paths(rec, out / "mass_paths.png", header=h)
    k = rec.steps_done
    body = {
        "steps": k,
        "dt": rec.dt,
        "dx": rec.dx,
        "final_mass_x": float(rec.mass_x[k].sum()),
        "final_mass_y": float(rec.mass_y[k].sum()),
        "clusters_x": len(rec.birth_step_x),
        "clusters_y": len(rec.birth_step_y),
        "noise_digest": list(rec.digest),
        "runtime_s": time.time() - t0,
        "figures": [fig.name],
    }
    _write_json(out / "report.json", cfg, "simulate", body)
    rows = [[float(t), float(mx), float(my)] for t, mx, my in zip(rec.times[:: max(k // 200, 1)], rec.mass_x[: k + 1 : max(k // 200, 1)].sum(1), rec.mass_y[: k + 1 : max(k // 200, 1)].sum(1))]
    _write_csv(out / "summary.csv", cfg, ["time", "mass_x", "mass_y"], rows)
    print(f"simulated {k} steps; final X mass {body['final_mass_x']:.6g}, Y mass {body['final_mass_y']:.6g}; wrote {out}")
    return EXIT_OK


def cmd_decompose(cfg: dict) -> int:
    from .spde import CoupledSimulation, allocation_matrix, step_coupled

    out = _out_dir(cfg)
    lcfg = _lattice_config(cfg)
    sim = CoupledSimulation(lcfg, cfg["run"]["seed"])
    n = cfg["lattice"]["steps"] or sim.n_total
    n = min(n, sim.n_total)
    worst = 0.0
    for _ in range(n):
        st = step_coupled(sim)
        worst = max(worst, st.X.decomposition_error(), st.Y.decomposition_error())
    resid = float(sim.record().resid.max()) if n else 0.0
    rng = np.random.default_rng(cfg["run"]["seed"])
    orth = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 20))
        M = allocation_matrix(rng.exponential(size=k) * (rng.random(k) > 0.2))
        orth = max(orth, float(np.abs(M @ M.T - np.eye(k)).max()))
    passed = worst <= 1e-10 and resid < 1e-12 and orth < 1e-12
    body = {"steps": n, "max_sum_deviation": worst, "max_allocation_residual": resid, "max_orthogonality_error": orth, "passed": passed}
    _write_json(out / "report.json", cfg, "decompose", body)
    _write_csv(out / "summary.csv", cfg, list(body), [list(body.values())])
    print(f"{'PASS' if passed else 'FAIL'} decomposition over {n} steps: sum_dev={worst:.2e} resid={resid:.2e} orth={orth:.2e}")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_condition(cfg: dict, workers: int) -> int:
    from . import report
    from .experiments import run_conditioning

    out = _out_dir(cfg)
    cc = cfg["condition"]
    res = run_conditioning(
        eps=cc["eps"], until=cc["until"], target_accepted=cc["accepted"], seed=cfg["run"]["seed"], psi_mass=cfg["psi"].get("mass", 1.0),
        max_replicas=cc.get("max_replicas"), allowance_cells=cc["allowance_cells"], scheme=cfg["lattice"]["scheme"], dt_ratio=cc["dt_ratio"], workers=workers,
    )
    fig = report.plot_conditioning(res.accepted_masses, res.reference, out / "ks_cdf.png", _header(cfg))
    d = res.as_dict()
    passed = res.ks_p_allowed > 0.01
    _write_json(out / "report.json", cfg, "condition", {"result": d, "passed": passed, "figures": [fig.name]})
    _write_csv(out / "summary.csv", cfg, list(d), [list(d.values())])
    print(f"{'PASS' if passed else 'FAIL'} conditioned law: accepted={res.accepted}/{res.replicas} KS D={res.ks_stat:.4f} p={res.ks_p:.3g} allowed p={res.ks_p_allowed:.3g}")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_separation(cfg: dict, workers: int) -> int:
    from . import report
    from .experiments import SeparationConfig, run_separation

    sc = cfg["separation"]
    if sc.get("r") is None:
        raise ConfigError("separation.r is required (use --r or separation.r=...)")
    out = _out_dir(cfg)
    kw = {k: sc[k] for k in ("eps_list", "replicas", "k_star", "enforce_regime", "allowance", "dt_ratio", "r")}
    if sc.get("horizon") is not None:
        kw["horizon"] = sc["horizon"]
    try:
        scfg = SeparationConfig(params=_params(cfg), psi=_psi(cfg), seed=cfg["run"]["seed"], **kw)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None
    rep = run_separation(scfg, workers=workers)
    rep.config["cli_config_digest"] = config_digest(cfg)
    paths = rep.write(out, config_digest(cfg))
    figs = report.plot_separation(rep.results, out, _header(cfg))
    _write_gnuplot_separation(out / "plot.gp", cfg)
    for row in rep.results["rows"]:
        print(f"eps={row['eps']:g} S={row['S_count']}/{row['replicas']} freq={row['S_freq']:.4g} floor={row['floor']:.4g} status={row['floor_status']} implication_violations={row['implication_violations']}")
    print(f"wrote {Path(paths['json']).name}, {Path(paths['csv']).name}, " + ", ".join(f.name for f in figs))
    ok = all(r["floor_status"] != "FAIL" and r["implication_violations"] == 0 for r in rep.results["rows"])
    return EXIT_OK if ok else EXIT_FAIL


def _write_gnuplot_separation(path: Path, cfg: dict) -> None:
    h = _header(cfg)
    path.write_text(
        f"# config_digest={h['config_digest']}\n# seed={h['seed']}\n"
        "set datafile separator ','\nset logscale x\nset xlabel 'eps'\nset ylabel 'P(S(r))'\n"
        "plot 'summary.csv' every ::1 using 1:6 with linespoints title 'S frequency'\n"
    )


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="master seed (u64)")
    common.add_argument("--workers", type=int, help="worker processes (default: logical cores)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="sbmsep", description="Coupled super-Brownian motion simulations and validators.")
    sub = ap.add_subparsers(dest="command", required=True)
    v = sub.add_parser("validate", parents=[common], help="run deterministic and statistical validators")
    v.add_argument("--only", help="restrict to one module")
    v.add_argument("--size", type=float, help="sample-size scale (1 = full acceptance sizes)")
    sub.add_parser("simulate", parents=[common], help="one coupled run with mass CSV, frames and plots")
    sub.add_parser("decompose", parents=[common], help="check the cluster decomposition identity")
    sub.add_parser("condition", parents=[common], help="conditioned cluster law vs quarter-BESQ^4")
    s = sub.add_parser("separation", parents=[common], help="separation-event frequencies per eps")
    s.add_argument("--r", type=float, help="separation radius")
    s.add_argument("--eps-list", help="comma separated eps values, decreasing")
    s.add_argument("--replicas", type=int)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            print("usage error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
            return EXIT_USAGE
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.out={args.out}")
    if getattr(args, "size", None) is not None:
        overrides.append(f"validate.size={args.size}")
    if getattr(args, "r", None) is not None:
        overrides.append(f"separation.r={args.r}")
    if getattr(args, "eps_list", None) is not None:
        overrides.append(f"separation.eps_list={args.eps_list}")
    if getattr(args, "replicas", None) is not None:
        overrides.append(f"separation.replicas={args.replicas}")
    try:
        cfg = load_config(args.config, overrides)
        workers = args.workers or cfg["run"].get("workers") or os.cpu_count() or 1
        if args.command == "validate":
            return cmd_validate(cfg, args.only)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "decompose":
            return cmd_decompose(cfg)
        if args.command == "condition":
            return cmd_condition(cfg, workers)
        return cmd_separation(cfg, workers)
    except (ConfigError, ParameterError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime aborts, including SimulationAbort
        log.debug("abort", exc_info=True)
        print(f"runtime abort: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
