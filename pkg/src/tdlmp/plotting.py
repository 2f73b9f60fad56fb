"""Optional report figures rendered to files with the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pricing import COMPONENTS  # noqa: E402


def comparison_figure(rows, path) -> None:
    rows = [r for r in rows if r.option != "base"]
    scen = list(dict.fromkeys(r.scenario for r in rows))
    opts = list(dict.fromkeys(r.option for r in rows))
    width = 0.8 / max(len(opts), 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    x = np.arange(len(scen))
    for i, o in enumerate(opts):
        tot = [next((r.dTotal for r in rows if r.scenario == s and r.option == o), np.nan) for s in scen]
        lol = [next((r.LoL for r in rows if r.scenario == s and r.option == o), np.nan) for s in scen]
        ax1.bar(x + i * width, tot, width, label=o)
        ax2.bar(x + i * width, lol, width, label=o)
    for ax, title in ((ax1, "cost difference vs base ($)"), (ax2, "loss of life (h)")):
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels(scen, rotation=30, ha="right")
        ax.set_title(title)
    ax2.set_yscale("symlog", linthresh=1e-3)
    ax1.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def dlmp_figure(dec, node: int, path) -> None:
    T = dec.lam_p.shape[1]
    hours = np.arange(T)
    fig, ax = plt.subplots(figsize=(8, 4))
    pos = np.zeros(T)
    neg = np.zeros(T)
    for c in COMPONENTS:
        vals = dec.p[c][node]
        base = np.where(vals >= 0, pos, neg)
        ax.bar(hours, vals, bottom=base, label=c.replace("_", " "))
        pos += np.clip(vals, 0, None)
        neg += np.clip(vals, None, 0)
    ax.plot(hours, dec.lam_p[node], "k.-", label="DLMP")
    ax.set_xlabel("hour")
    ax.set_ylabel("$/kWh")
    ax.set_title(f"real-power DLMP components at node {node}")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def thermal_figure(cells, name: str, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    for cell in cells:
        if not cell.solved or name not in cell.expost.trajectories:
            continue
        ax.plot(cell.expost.trajectories[name].hot_spot, label=cell.option.value)
    ax.axhline(110.0, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("hour")
    ax.set_ylabel("hot-spot temperature (°C)")
    ax.set_title(name)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
