"""Report figures, rendered headlessly to PNG files.

Figures are built on matplotlib's object API (no pyplot, no global state) and
saved through :func:`save_figure`, which strips the writer metadata so that a
rerun with identical inputs produces byte-identical files.
"""

from __future__ import annotations

import numpy as np
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from .boxes import BoxNorm
from .detector import LogRow
from .metrics import HeatMap

_BOX_COLORS = ("#2a9d8f", "#e76f51", "#7b2d8b", "#e9c46a")


def save_figure(fig: Figure, path) -> None:
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})


def concentration_curves(curves: np.ndarray,
                         designated: int | None = None) -> Figure:
    """Per-layer concentration for each sample (faint) plus the mean (bold)."""
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    layers = np.arange(curves.shape[1])
    fig = Figure(figsize=(7, 4.2))
    ax = fig.subplots()
    for row in curves:
        ax.plot(layers, row, color="#8ab6d6", alpha=0.25, linewidth=0.8)
    ax.plot(layers, curves.mean(axis=0), color="#1d3557", linewidth=2.2,
            label="mean")
    if designated is not None:
        ax.axvline(designated, color="#e76f51", linestyle="--", linewidth=1.4,
                   label=f"designated layer {designated}")
    ax.set_xlabel("layer")
    ax.set_ylabel("in-box concentration")
    ax.set_title(f"per-layer concentration, {curves.shape[0]} samples")
    ax.legend(loc="upper left")
    fig.tight_layout()
    return fig


def peak_hist_figure(hist: np.ndarray, designated: int | None = None,
                     title: str = "peak-layer histogram") -> Figure:
    hist = np.asarray(hist, dtype=float)
    layers = np.arange(hist.size)
    fig = Figure(figsize=(7, 4.2))
    ax = fig.subplots()
    colors = ["#e76f51" if i == designated else "#457b9d" for i in layers]
    ax.bar(layers, hist, color=colors, width=0.85)
    ax.set_xlabel("layer")
    ax.set_ylabel("fraction of samples peaking")
    ax.set_title(title)
    ax.set_ylim(0, max(1.0, hist.max() * 1.05))
    fig.tight_layout()
    return fig


def condense_hists_figure(baseline_hist, post_hist,
                          designated: int) -> Figure:
    """Peak-layer mass before and after condensation training."""
    base = np.asarray(baseline_hist, dtype=float)
    post = np.asarray(post_hist, dtype=float)
    layers = np.arange(base.size)
    fig = Figure(figsize=(8, 4.2))
    ax = fig.subplots()
    ax.bar(layers - 0.2, base, width=0.4, color="#a8dadc", label="before")
    ax.bar(layers + 0.2, post, width=0.4, color="#e63946", label="after")
    ax.axvline(designated, color="#1d3557", linestyle="--", linewidth=1.2)
    ax.set_xlabel("layer")
    ax.set_ylabel("fraction of samples peaking")
    ax.set_title(f"condensation onto layer {designated}: "
                 f"{base[designated]:.3f} -> {post[designated]:.3f}")
    ax.legend()
    fig.tight_layout()
    return fig


def training_curve_figure(rows: list[LogRow]) -> Figure:
    steps = [r.step for r in rows]
    fig = Figure(figsize=(7, 4.2))
    ax = fig.subplots()
    ax.plot(steps, [r.total for r in rows], color="#1d3557", linewidth=1.2,
            label="total")
    ax.plot(steps, [r.l1 for r in rows], color="#457b9d", linewidth=0.9,
            label="l1")
    ax.plot(steps, [r.giou_term for r in rows], color="#e76f51", linewidth=0.9,
            label="giou")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("detector training loss")
    ax.legend()
    fig.tight_layout()
    return fig


def lac_curve_figure(lac: list[float], epoch_len: int) -> Figure:
    steps = [(i + 1) * epoch_len for i in range(len(lac))]
    fig = Figure(figsize=(7, 4.2))
    ax = fig.subplots()
    ax.plot(steps, lac, color="#1d3557", marker="o", linewidth=1.4)
    ax.set_xlabel("step")
    ax.set_ylabel("held-out condensation objective")
    ax.set_title("condensation objective on held-out boxes")
    fig.tight_layout()
    return fig


def iou_hist_figure(ious, tau: float) -> Figure:
    ious = np.asarray(list(ious), dtype=float)
    fig = Figure(figsize=(7, 4.2))
    ax = fig.subplots()
    ax.hist(ious, bins=np.linspace(0.0, 1.0, 21), color="#457b9d")
    ax.axvline(tau, color="#e76f51", linestyle="--",
               label=f"grounding-error threshold {tau}")
    ax.set_xlabel("IoU")
    ax.set_ylabel("samples")
    ax.set_title(f"IoU distribution, mean={ious.mean():.3f}")
    ax.legend()
    fig.tight_layout()
    return fig


def _draw_heat(ax, heat: HeatMap, boxes: dict[str, BoxNorm]) -> None:
    ax.imshow(heat.values, extent=(0.0, 1.0, 1.0, 0.0), cmap="magma",
              interpolation="nearest")
    for i, (label, b) in enumerate(boxes.items()):
        color = _BOX_COLORS[i % len(_BOX_COLORS)]
        ax.add_patch(Rectangle((b.x1, b.y1), b.width, b.height, fill=False,
                               edgecolor=color, linewidth=1.6))
        ax.text(b.x1, max(0.0, b.y1 - 0.02), label, color=color, fontsize=7)
    ax.set_xticks(())
    ax.set_yticks(())


def heatmap_overlay_figure(heat: HeatMap, boxes: dict[str, BoxNorm],
                           title: str = "") -> Figure:
    fig = Figure(figsize=(4.6, 4.6))
    ax = fig.subplots()
    _draw_heat(ax, heat, boxes)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return fig


def montage_figure(panels: list[tuple[HeatMap, dict[str, BoxNorm], str]],
                   cols: int = 4) -> Figure:
    """Grid of heatmaps with overlaid boxes; panels beyond the grid are dropped."""
    n = len(panels)
    cols = max(1, min(cols, n))
    rows = (n + cols - 1) // cols
    fig = Figure(figsize=(2.6 * cols, 2.8 * rows))
    axes = np.atleast_1d(fig.subplots(rows, cols)).reshape(-1)
    for ax in axes[n:]:
        ax.axis("off")
    for ax, (heat, boxes, title) in zip(axes, panels):
        _draw_heat(ax, heat, boxes)
        ax.set_title(title, fontsize=7)
    fig.tight_layout()
    return fig