"""Optional PNG renderings of CLI outputs (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_gap_sweep(result, path) -> Path:
    """Loss gap and Fisher divergence against ``t`` (log-log), one line per ``(n, d)``."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    keys = sorted({(n, d) for _, n, d, _ in result.grid})
    for n, d in keys:
        rows = [(t, e) for (t, nn, dd, _), e in zip(result.grid, result.estimates) if nn == n and dd == d and e is not None]
        if not rows:
            continue
        t = np.array([r[0] for r in rows])
        gap = np.array([r[1][0].mean for r in rows])
        fis = np.array([r[1][1].mean for r in rows])
        (line,) = ax.loglog(t, np.maximum(gap, 1e-12), "o-", label=f"loss gap n={n} d={d}")
        ax.loglog(t, np.maximum(fis, 1e-12), "x--", color=line.get_color(), alpha=0.6, label=f"Fisher n={n} d={d}")
    ax.set_xlabel("t")
    ax.set_ylabel("value")
    ax.legend(fontsize=7)
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def plot_theorem(report, path) -> Path:
    """Mean loss gap against ``1/sigma_t^2`` with per-dimension fits."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    x = np.asarray(report.inv_sigma2)
    for d in report.d_list:
        (line,) = ax.plot(x, report.mean_gap[d], "o", label=f"d={d} slope={report.slope[d]:.3g}")
        ax.plot(x, report.intercept[d] + report.slope[d] * x, "-", color=line.get_color(), alpha=0.6)
    ax.set_xlabel("1 / sigma_t^2")
    ax.set_ylabel("mean loss gap")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_samples(train, generated, path, title: str = "") -> Path:
    """Scatter of the first two coordinates of generated and training points."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(generated[:, 0], generated[:, 1 if generated.shape[1] > 1 else 0], s=3, alpha=0.4, label="generated")
    ax.scatter(train[:, 0], train[:, 1 if train.shape[1] > 1 else 0], s=18, marker="x", color="k", label="training")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=8)
    ax.set_aspect("equal", adjustable="datalim")
    return _save(fig, path)


def plot_sweep(rows, x_key: str, path) -> Path:
    """Memorization ratio and mean log-likelihood against ``x_key``, one line per ``n``."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    for n in sorted({r["n"] for r in rows}):
        sel = sorted((r for r in rows if r["n"] == n), key=lambda r: r[x_key])
        xs = [r[x_key] for r in sel]
        ax1.plot(xs, [r["mem_ratio"] for r in sel], "o-", label=f"n={n}")
        ax2.plot(xs, [r["mean_ll"] for r in sel], "o-", label=f"n={n}")
    for ax in (ax1, ax2):
        ax.set_xlabel(x_key)
        if x_key == "width":
            ax.set_xscale("log", base=2)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
    ax1.set_ylabel("memorization ratio")
    ax2.set_ylabel("mean log-likelihood")
    return _save(fig, path)
