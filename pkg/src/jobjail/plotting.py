"""Figures rendered next to exported reports."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def figsize(width: float = 7.0, rows: int = 1) -> tuple[float, float]:
    return width, width * GOLDEN * 0.45 * rows


def render_series(series: Sequence, path, title: str | None = None,
                  mem_limit: int | None = None) -> Path:
    """Four stacked panels over runtime: NoT, main CPU id, CPU %, RSS.

    A fifth panel is added when the series carries accelerator values.
    """
    has_accel = any(getattr(s, "accel_util", None) is not None for s in series)
    panels = 5 if has_accel else 4
    t = [s.t_ms / 1000.0 for s in series]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(panels, 1, sharex=True, figsize=figsize(7.0, panels))
        axes[0].step(t, [s.not_total for s in series], where="post", color="C0")
        axes[0].set_ylabel("threads")
        cpu_ids = [s.main_cpu_id if s.main_cpu_id >= 0 else float("nan") for s in series]
        axes[1].plot(t, cpu_ids, ".", color="C1", markersize=3)
        axes[1].set_ylabel("main CPU id")
        axes[2].plot(t, [s.cpu_percent for s in series], color="C2")
        axes[2].set_ylabel("CPU %")
        axes[2].set_ylim(bottom=0)
        axes[3].plot(t, [s.rss_total_bytes / 2**20 for s in series], color="C3")
        if mem_limit:
            axes[3].axhline(mem_limit / 2**20, color="k", linestyle="--", linewidth=0.8)
        axes[3].set_ylabel("RSS [MiB]")
        axes[3].set_ylim(bottom=0)
        if has_accel:
            axes[4].plot(t, [s.accel_util if s.accel_util is not None else float("nan") for s in series],
                         color="C4")
            axes[4].set_ylabel("accel %")
        axes[-1].set_xlabel("runtime [s]")
        if title:
            axes[0].set_title(title)
        fig.align_ylabels(axes)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path


def render_memory_timeline(times: Sequence[int], reserved: Sequence[int], live: Sequence[int],
                           path, arena_bytes: int | None = None) -> Path:
    """Reserved vs live bytes over the events of an allocation trace."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(7.0, 2))
        ax.plot(times, [r / 2**10 for r in reserved], label="reserved", color="C0")
        ax.plot(times, [v / 2**10 for v in live], label="live objects", color="C1")
        ax.set_xlabel("event")
        ax.set_ylabel("KiB")
        if arena_bytes:
            ax.set_title(f"arena size {arena_bytes // 1024} KiB")
        ax.legend(frameon=False)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path
