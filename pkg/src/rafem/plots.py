"""Report figures for the CLI: PSNR curves, slice heat maps, bench bars.

Rendering always goes through the Agg backend so the commands work in
headless environments; figures are written next to the delimited
output they illustrate.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import PsnrSeries, SliceGrid

__all__ = ["save_bench_plot", "save_psnr_plot", "save_slice_plot"]


def save_psnr_plot(series: PsnrSeries, path) -> None:
    """Per-step PSNR for both fields with dashed noise-control lines."""
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    for vals, label in ((series.psnr_t, "T"), (series.psnr_v, "V")):
        finite = np.isfinite(vals)
        ax.plot(series.steps[finite], vals[finite], marker=".", label=f"PSNR {label}")
    for j, amp in enumerate(series.control_amps):
        ax.axhline(series.control_t[j, 0], linestyle="--", linewidth=0.8,
                   color="gray", label=f"control {amp:g} (T)")
        ax.axhline(series.control_v[j, 0], linestyle=":", linewidth=0.8,
                   color="gray", label=f"control {amp:g} (V)")
    ax.set_xlabel("step")
    ax.set_ylabel("PSNR [dB]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_slice_plot(grid: SliceGrid, path, value_name: str = "value") -> None:
    """Heat map of one plane slice; missing samples stay blank."""
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    mesh = ax.pcolormesh(grid.u, grid.v, grid.values.T, shading="nearest")
    fig.colorbar(mesh, ax=ax, label=value_name)
    ax.set_xlabel(f"{grid.u_name} [mm]")
    ax.set_ylabel(f"{grid.v_name} [mm]")
    ax.set_title(f"{grid.axis} = {grid.offset:g}")
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_bench_plot(labels, makespans_ns, path) -> None:
    """Bar chart of mean makespan per benchmark configuration."""
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(labels)), 4.0))
    ax.bar(range(len(labels)), np.asarray(makespans_ns) / 1e9)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("makespan [s]")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
