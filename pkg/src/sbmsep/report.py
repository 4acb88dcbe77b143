"""Figures for the CLI report path.

Every function writes one PNG next to the CSV/JSON artifacts and returns its
path.  ``header`` (config digest and seed) is stored in the PNG text chunk.
The Agg backend is forced so the CLI runs headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_separation", "plot_conditioning", "plot_support_scaling", "plot_mass_paths", "write_gnuplot"]


def _save(fig, path, header: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    meta = {"Description": " ".join(f"{k}={v}" for k, v in (header or {}).items())} if header else None
    fig.savefig(path, dpi=110, metadata=meta)
    plt.close(fig)
    return path


def plot_separation(results: dict, out_dir, header: dict | None = None) -> list[Path]:
    rows = results["rows"]
    eps = np.array([r["eps"] for r in rows])
    p = np.array([r["S_freq"] for r in rows])
    lo = np.array([r["S_wilson95"][0] for r in rows])
    hi = np.array([r["S_wilson95"][1] for r in rows])

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(eps, p, yerr=np.vstack([p - lo, hi - p]), fmt="o-", capsize=3, label="S frequency (Wilson 95%)")
    ax.axhline(results["floor"], color="k", ls="--", lw=1, label="floor psi r / 4")
    ax.set_xscale("log")
    ax.set_xlabel("eps")
    ax.set_ylabel("frequency")
    ax.legend(fontsize=8)
    out = [_save(fig, Path(out_dir) / "separation_frequency.png", header)]

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in rows:
        q = r["sup_norm_quantiles"]
        ax.plot([0.05, 0.5, 0.95], q, "o-", label=f"eps={r['eps']:g}")
    ax.axhline(rows[0]["delta_r"], color="k", ls="--", lw=1, label="delta(r)")
    ax.set_xlabel("quantile level")
    ax.set_ylabel("sup |X - Y| rap norm")
    ax.set_yscale("symlog", linthresh=1e-6)
    ax.legend(fontsize=8)
    out.append(_save(fig, Path(out_dir) / "sup_norm_quantiles.png", header))
    return out


def plot_conditioning(accepted: np.ndarray, reference: np.ndarray, path, header: dict | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for data, label in ((accepted, "conditioned SBM mass"), (reference, "BESQ(4)/4 reference")):
        x = np.sort(data)
        ax.step(x, np.arange(1, x.size + 1) / x.size, where="post", label=f"{label} (n={x.size})")
    ax.set_xlabel("mass at t")
    ax.set_ylabel("empirical CDF")
    ax.legend(fontsize=8)
    return _save(fig, path, header)


def plot_support_scaling(sc, path, header: dict | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for a, eps in enumerate(sc.eps_list):
        x = np.array([eps * max(r, eps) for r in sc.r_list])
        y = sc.freq[a]
        keep = y > 0
        ax.loglog(x[keep], y[keep], "o-", label=f"eps={eps:g}")
    ax.set_xlabel("eps (r v eps)")
    ax.set_ylabel("P(support escape before r)")
    ax.set_title(f"fitted slope {sc.slope:.2f} (target {sc.slope_target:g})", fontsize=9)
    ax.legend(fontsize=8)
    return _save(fig, path, header)


def plot_mass_paths(rec, path, max_clusters: int = 12, header: dict | None = None) -> Path:
    t = rec.times
    k = rec.steps_done + 1
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for j in range(min(rec.mass_x.shape[1], max_clusters)):
        ax.plot(t[:k], rec.mass_x[:k, j], lw=0.8, color="C0", alpha=0.7)
    for j in range(min(rec.mass_y.shape[1], max_clusters)):
        ax.plot(t[:k], rec.mass_y[:k, j], lw=0.8, color="C3", alpha=0.7)
    ax.plot([], [], color="C0", label="X clusters")
    ax.plot([], [], color="C3", label="Y clusters")
    ax.set_xlabel("time")
    ax.set_ylabel("cluster mass")
    ax.legend(fontsize=8)
    return _save(fig, path, header)


def write_gnuplot(path, csv_name: str, header: dict | None = None) -> Path:
    """Gnuplot script that plots per-cluster mass from the mass CSV."""
    path = Path(path)
    path.write_text(
        "".join(f"# {k}={v}\n" for k, v in (header or {}).items())
        + "set datafile separator ','\n"
        "set xlabel 'time'\nset ylabel 'mass'\n"
        f"plot '{csv_name}' every ::1 using 2:(stringcolumn(4) eq 'X' ? $5 : 1/0) with dots title 'X', \\\n"
        f"     '{csv_name}' every ::1 using 2:(stringcolumn(4) eq 'Y' ? $5 : 1/0) with dots title 'Y'\n"
    )
    return path
