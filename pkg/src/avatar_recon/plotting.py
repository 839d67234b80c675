"""Report figures: loss curves, normal-map pairs and mesh projections."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import LOG_FIELDS, LossLog  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def loss_curves(logs: dict, path, smooth: int = 25, title: str | None = None):
    """Total loss (and the three terms) per named LossLog, log-scaled."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
        for name, lg in logs.items():
            rows = np.asarray(lg.rows, dtype=np.float64)
            if not len(rows):
                continue
            k = max(1, min(smooth, len(rows)))
            sm = np.convolve(rows[:, 4], np.ones(k) / k, mode="valid")
            axes[0].plot(rows[k - 1:, 0], sm, label=name)
            for j, term in enumerate(LOG_FIELDS[1:4], start=1):
                axes[1].plot(rows[:, 0], rows[:, j], lw=0.6, label=f"{name} {term}")
        axes[0].set_yscale("log")
        axes[0].set_xlabel("iteration")
        axes[0].set_ylabel(f"total (mean of {smooth})")
        axes[1].set_yscale("log")
        axes[1].set_xlabel("iteration")
        axes[1].set_ylabel("term")
        axes[0].legend()
        axes[1].legend(fontsize=6, ncol=2)
        if title:
            fig.suptitle(title)
        _save(fig, path)


def normal_pair(images, path, titles=("front", "back")):
    """Side-by-side normal maps, colour-coded as (n + 1) / 2."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(images), figsize=(3 * len(images), 3))
        for ax, im, t in zip(np.atleast_1d(axes), images, titles):
            rgb = np.where(im.mask[..., None], (im.normals + 1) / 2, 1.0)
            ax.imshow(np.clip(rgb, 0, 1))
            ax.set_title(t)
            ax.axis("off")
        _save(fig, path)


def mesh_views(meshes: dict, path, n_points: int = 4000, seed: int = 0):
    """Front (xy) and side (zy) scatter projections of each mesh's vertices."""
    rng = np.random.default_rng(seed)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, len(meshes), figsize=(2.6 * len(meshes), 5), squeeze=False)
        for c, (name, m) in enumerate(meshes.items()):
            v = m.vertices
            if len(v) > n_points:
                v = v[rng.choice(len(v), n_points, replace=False)]
            for r, (i, lab) in enumerate(((0, "x"), (2, "z"))):
                ax = axes[r, c]
                ax.scatter(v[:, i], v[:, 1], s=0.3, c=v[:, 2 - i], cmap="viridis")
                ax.set_aspect("equal")
                ax.set_xlabel(lab)
                ax.grid(False)
            axes[0, c].set_title(name)
        _save(fig, path)


def metric_bars(rows: list[dict], keys, path, label: str = "name"):
    """Grouped bars of metric values per row (e.g. coarse vs refined)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(keys) * len(rows) / 2, 3))
        w = 0.8 / max(len(rows), 1)
        x = np.arange(len(keys))
        for j, r in enumerate(rows):
            ax.bar(x + j * w, [r[k] for k in keys], w, label=str(r[label]))
        ax.set_xticks(x + w * (len(rows) - 1) / 2, keys)
        ax.legend()
        _save(fig, path)


def load_log(path) -> LossLog:
    return LossLog.read_csv(path)
