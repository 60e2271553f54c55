"""Figures for audit and training reports, written straight to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def anchor_scatter(positions: np.ndarray, path, regions=(), density=None, title="anchor cloud") -> Path:
    """Top and side views of the anchors, candidate regions outlined."""
    pts = np.asarray(positions).reshape(-1, 3)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.6))
        for ax, (i, j, lab) in zip(axes, ((0, 1, "x / y"), (0, 2, "x / z"))):
            c = density if density is not None else "tab:blue"
            ax.scatter(pts[:, i], pts[:, j], s=4, c=c, cmap="viridis", linewidths=0)
            for r in regions:
                lo, hi = r.box.lo, r.box.hi
                ax.add_patch(plt.Rectangle((lo[i], lo[j]), hi[i] - lo[i], hi[j] - lo[j], fill=False,
                                           ec="tab:red" if r.flagged else "0.4", lw=1.0))
            ax.set_xlabel(lab.split(" / ")[0])
            ax.set_ylabel(lab.split(" / ")[1])
            ax.set_aspect("equal", adjustable="datalim")
        fig.suptitle(title)
        return _save(fig, path)


def nn_histogram(hist: np.ndarray, edges: np.ndarray, path, title="nearest-neighbour distance") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3))
        ax.bar(edges[:-1], hist, width=np.diff(edges), align="edge", color="0.55", ec="0.3", lw=0.4)
        ax.set_xlabel("distance")
        ax.set_ylabel("anchors")
        ax.set_title(title)
        return _save(fig, path)


def loss_curves(metrics: list[dict], path, history: list[dict] | None = None) -> Path:
    """Losses, PSNR and anchor counts against iteration."""
    it = np.array([m["iteration"] for m in metrics])

    def col(key):
        return np.array([np.nan if m.get(key) is None else m[key] for m in metrics], dtype=float)

    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        axes[0].semilogy(it, col("l_ori"), lw=0.7, label="original")
        if np.isfinite(col("l_hid")).any():
            ok = np.isfinite(col("l_hid"))
            axes[0].semilogy(it[ok], col("l_hid")[ok], lw=0.7, label="hidden")
        if np.isfinite(col("l_bit")).any():
            axes[0].semilogy(it, col("l_bit"), lw=0.7, label="bits")
        axes[0].set_title("loss")
        axes[0].legend()
        axes[1].plot(it, col("psnr_o"), lw=0.7, label="original")
        ok = np.isfinite(col("psnr_h"))
        if ok.any():
            axes[1].plot(it[ok], col("psnr_h")[ok], lw=0.7, label="hidden")
        axes[1].set_title("PSNR (dB)")
        axes[1].legend()
        axes[2].plot(it, col("anchors_ori"), label="grown from original")
        axes[2].plot(it, col("anchors_hid"), label="grown from hidden")
        for h in history or []:
            axes[2].axvline(h["iteration"], color="0.85", lw=0.5, zorder=0)
        axes[2].set_title("anchors")
        axes[2].legend()
        for ax in axes:
            ax.set_xlabel("iteration")
        return _save(fig, path)


def image_grid(rows: dict[str, list[np.ndarray]], path) -> Path:
    names = list(rows)
    n = max(len(v) for v in rows.values())
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(names), n, figsize=(1.6 * n, 1.7 * len(names)), squeeze=False)
        for r, name in enumerate(names):
            for c in range(n):
                ax = axes[r, c]
                ax.axis("off")
                if c < len(rows[name]):
                    ax.imshow(np.clip(rows[name][c], 0, 1), interpolation="nearest")
            axes[r, 0].set_title(name, loc="left")
        return _save(fig, path)
