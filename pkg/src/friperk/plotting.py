"""Matplotlib figures for sweep summaries and timing tables."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MARKERS = {"fri-perk": "o", "fri-per-dense": "s", "lowpass": "^", "ra-ormp": "v", "truth": "x"}


def _by_estimator(summary_rows):
    out = {}
    for r in summary_rows:
        out.setdefault(r["estimator"], []).append(r)
    for rows in out.values():
        rows.sort(key=lambda r: r["snr_db"])
    return out


def plot_sweep(summary_rows, outdir, prefix="sweep") -> list:
    """SER, MSE and K_hat against SNR; returns the written PNG paths."""
    groups = _by_estimator(summary_rows)
    paths = []
    panels = [("mean_ser", "mean SER", True, "ser"), ("mean_mse", "mean channel MSE", True, "mse"),
              ("median_K_hat", "median K_hat", False, "k_hat")]
    for key, label, logy, tag in panels:
        fig, ax = plt.subplots(figsize=(6, 4.2))
        for est, rows in groups.items():
            if key == "median_K_hat" and est in ("lowpass", "truth"):
                continue
            x = np.array([r["snr_db"] for r in rows], float)
            y = np.array([r[key] for r in rows], float)
            if key == "mean_ser":
                se = np.array([r["se_ser"] for r in rows], float)
                ax.errorbar(x, y, yerr=2 * se, marker=MARKERS.get(est, "."), capsize=3, label=est)
            else:
                ax.plot(x, y, marker=MARKERS.get(est, "."), label=est)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel("SNR [dB]")
        ax.set_ylabel(label)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = os.path.join(outdir, f"{prefix}_{tag}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_timing(rows, columns, outdir, name="timing.png") -> str:
    fig, ax = plt.subplots(figsize=(6, 4.2))
    N = np.array([r["N"] for r in rows], float)
    for col in columns:
        if not col.endswith("_s"):
            continue
        t = np.array([r.get(col, np.nan) for r in rows], float)
        ok = np.isfinite(t)
        ax.loglog(N[ok], t[ok], marker="o", label=col[:-2].replace("_", "-"))
    ax.set_xlabel("pilots N = 2M+1")
    ax.set_ylabel("median wall-clock [s]")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = os.path.join(outdir, name)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_per_trace(trace, K_hat=None, path="per_trace.png") -> str:
    """PER_k against k with the detected sparsity marked."""
    t = np.asarray(trace, float)
    k = np.arange(1, t.size + 1)
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.plot(k, t, marker=".")
    if K_hat:
        ax.axvline(K_hat, color="k", ls="--", lw=0.8)
    ax.set_xlabel("k")
    ax.set_ylabel("PER_k")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
