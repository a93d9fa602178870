"""Rendered views of predictions and training traces.

Matplotlib with the Agg backend only; every function writes a PNG next
to the delimited artifacts and returns the path. Nothing here feeds
back into metrics, so rendering choices can't affect results.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _overlay_constraints(ax, specs):
    """Draw bound curves for any constraint that has a drawable shape."""
    for spec in specs or []:
        grid = np.asarray(spec.grid, dtype=np.float64).ravel()
        grid = grid[spec.region_mask(grid)]
        if grid.size == 0:
            continue
        if spec.kind in ("lower_bound", "band") and spec.lower is not None:
            ax.plot(grid, spec.lower(grid), color="crimson", ls="--", lw=1.0,
                    label=f"{spec.name or spec.kind} lower")
        if spec.kind in ("upper_bound", "band") and spec.upper is not None:
            ax.plot(grid, spec.upper(grid), color="darkorange", ls="--", lw=1.0,
                    label=f"{spec.name or spec.kind} upper")


def prediction_figure(path, summary, train=None, truth=None, specs=None, title=""):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    x = np.asarray(summary.x, dtype=np.float64).ravel()
    ax.fill_between(x, summary.mean - 2 * summary.std, summary.mean + 2 * summary.std,
                    alpha=0.25, color="steelblue", label="mean ± 2 std")
    ax.plot(x, summary.mean, color="navy", lw=1.5, label="posterior mean")
    if truth is not None:
        ax.plot(x, np.asarray(truth).ravel(), color="black", ls=":", lw=1.2,
                label="truth")
    if train is not None:
        ax.scatter(train.x.ravel(), train.y.ravel(), s=18, color="dimgray",
                   zorder=5, label="train")
    _overlay_constraints(ax, specs)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def dataset_figure(path, train, test=None, specs=None, title=""):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    if test is not None:
        order = np.argsort(test.x.ravel())
        ax.plot(test.x.ravel()[order], test.y.ravel()[order], color="black",
                ls=":", lw=1.2, label="test / truth")
    ax.scatter(train.x.ravel(), train.y.ravel(), s=18, color="dimgray",
               zorder=5, label="train")
    _overlay_constraints(ax, specs)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def history_figure(path, history, title=""):
    """Loss plus expected-constraint traces; dual variables when present."""
    has_dual = bool(history) and bool(history[-1].get("s"))
    ncols = 2 if has_dual else 1
    fig, axes = plt.subplots(1, ncols, figsize=(6 * ncols, 4))
    axes = np.atleast_1d(axes)
    epochs = [row["epoch"] for row in history]
    axes[0].plot(epochs, [row["loss"] for row in history], lw=1.0, label="loss")
    efs = np.array([row["ef"] for row in history], dtype=np.float64)
    if efs.size:
        for i in range(efs.shape[1]):
            axes[0].plot(epochs, efs[:, i], lw=0.8, label=f"Ef[{i}]")
    axes[0].set_xlabel("epoch")
    axes[0].legend(fontsize=8)
    if title:
        axes[0].set_title(title)
    if has_dual:
        s = np.array([row["s"] for row in history], dtype=np.float64)
        for i in range(s.shape[1]):
            axes[1].plot(epochs, s[:, i], lw=1.0, label=f"s[{i}]")
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("dual")
        axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def comparison_figure(path, entries, truth=None, title=""):
    """Overlay posterior means from several runs on one axis.

    entries: iterable of (label, x, mean) triples in plot order.
    """
    fig, ax = plt.subplots(figsize=(7.5, 5))
    first_x = None
    for label, x, mean in entries:
        x = np.asarray(x, dtype=np.float64).ravel()
        if first_x is None:
            first_x = x
        ax.plot(x, np.asarray(mean).ravel(), lw=1.2, label=label)
    if truth is not None and first_x is not None:
        ax.plot(first_x, np.asarray(truth).ravel(), color="black", ls=":",
                lw=1.5, label="truth")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
