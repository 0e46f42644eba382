"""PNG figures for the CLI reports.

Figures are built on :class:`matplotlib.figure.Figure` with the Agg canvas, so
no GUI backend or global pyplot state is involved, and PNG metadata is pinned
to keep reruns byte-identical.
"""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

_PNG_META = {"Software": None}


def _save(fig, path):
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    return path


def _imshow(ax, image, title, cmap="gray", clip=False, vlim=None):
    values = np.asarray(image, dtype=np.float64)
    if clip:
        values = np.clip(values, 0, None)
    vmin, vmax = vlim if vlim is not None else (np.nanmin(values), np.nanmax(values))
    im = ax.imshow(values.T, origin="lower", cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
    ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    return im


def plot_panels(images, path, titles=None, clip=False, shared_scale=True):
    """Side-by-side panels, e.g. recon / clean / artifact.

    ``images`` maps panel title -> 2-D array. With ``clip`` negative values
    are hidden for display only; stored data stay signed.
    """
    titles = list(images) if titles is None else titles
    arrays = [np.asarray(images[t], dtype=np.float64) for t in images]
    vlim = None
    if shared_scale:
        stacked = np.concatenate([a.ravel() for a in arrays])
        vlim = (0.0 if clip else np.nanmin(stacked), np.nanmax(stacked))
    fig = Figure(figsize=(3.2 * len(arrays), 3.4))
    for i, (arr, title) in enumerate(zip(arrays, titles)):
        ax = fig.add_subplot(1, len(arrays), i + 1)
        _imshow(ax, arr, title, clip=clip, vlim=vlim)
    fig.tight_layout()
    return _save(fig, path)


def plot_cv_map(cvmap, path, title="CV (%)", vmax=None):
    cv = np.asarray(cvmap.cv if hasattr(cvmap, "cv") else cvmap, dtype=np.float64)
    finite = cv[np.isfinite(cv)]
    top = vmax if vmax is not None else (float(np.percentile(finite, 99)) if finite.size else 1.0)
    fig = Figure(figsize=(4.2, 3.6))
    ax = fig.add_subplot(1, 1, 1)
    im = _imshow(ax, cv, title, cmap="magma", vlim=(0.0, top))
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss(history, path):
    """Loss curves (log scale) from a training history array."""
    h = np.asarray(history, dtype=np.float64)
    fig = Figure(figsize=(5, 3.4))
    ax = fig.add_subplot(1, 1, 1)
    for col, name in ((2, "residual"), (3, "consistency"), (4, "total")):
        ax.semilogy(h[:, 0], np.maximum(h[:, col], 1e-12), label=name, lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
