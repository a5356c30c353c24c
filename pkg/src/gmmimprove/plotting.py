"""Figures for merged run reports (written to files, no GUI)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_curves(rows: list, path, target: float = 0.8) -> None:
    """Mean incumbent success against training episodes, one line per run group."""
    groups: dict = {}
    for row in rows:
        groups.setdefault((row["task"], row["kind"], row["modality"]), []).append(row)
    tasks = sorted({key[0] for key in groups})
    fig, axes = plt.subplots(1, max(len(tasks), 1), figsize=(4.5 * max(len(tasks), 1), 3.6),
                             squeeze=False)
    for ax, task in zip(axes[0], tasks):
        for (t, kind, modality), pts in sorted(groups.items()):
            if t != task:
                continue
            x = [p["episode"] for p in pts]
            y = [p["mean_success"] for p in pts]
            label = modality if kind == "optimize" else "online GMM"
            ax.step(x, y, where="post", label=f"{label} (n={pts[0]['n_seeds']})")
        ax.axhline(target, color="0.5", lw=0.8, ls="--")
        ax.set_title(task)
        ax.set_xlabel("training episodes")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=8, loc="lower right")
    axes[0][0].set_ylabel("success rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
