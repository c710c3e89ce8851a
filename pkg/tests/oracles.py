"""Independent reference implementations used to check the library code.

These deliberately avoid the library's own formulas: geometry is estimated by
sampling, attention statistics by explicit loops.
"""

from __future__ import annotations

import numpy as np


def mc_iou_giou(a, b, n_side: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Estimate IoU and GIoU of two corner boxes by stratified point sampling.

    One jittered sample per cell of an ``n_side x n_side`` grid laid over the
    enclosing box; with n_side=1000 that is 1e6 samples and the estimate is
    good to a few 1e-4.
    """
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    ex1, ey1 = min(ax1, bx1), min(ay1, by1)
    ex2, ey2 = max(ax2, bx2), max(ay2, by2)
    rng = np.random.default_rng(seed)
    jx = rng.uniform(size=(n_side, n_side))
    jy = rng.uniform(size=(n_side, n_side))
    ix, iy = np.meshgrid(np.arange(n_side), np.arange(n_side), indexing="xy")
    xs = ex1 + (ix + jx) * (ex2 - ex1) / n_side
    ys = ey1 + (iy + jy) * (ey2 - ey1) / n_side
    in_a = (xs >= ax1) & (xs <= ax2) & (ys >= ay1) & (ys <= ay2)
    in_b = (xs >= bx1) & (xs <= bx2) & (ys >= by1) & (ys <= by2)
    both = np.count_nonzero(in_a & in_b)
    either = np.count_nonzero(in_a | in_b)
    iou_est = both / either
    union_frac = either / (n_side * n_side)
    giou_est = iou_est - (1.0 - union_frac)
    return float(iou_est), float(giou_est)


def loop_aggregate_heatmap(weights: np.ndarray, layer: int,
                           query_ids, grid: tuple[int, int]) -> np.ndarray:
    """Per-patch mean attention via explicit loops over heads and queries."""
    _, n_heads, _, n_patches = weights.shape
    acc = np.zeros(n_patches, dtype=np.float64)
    count = 0
    for h in range(n_heads):
        for q in query_ids:
            for p in range(n_patches):
                acc[p] += float(weights[layer, h, q, p])
            count += 1
    return (acc / count).reshape(grid)


def loop_concentration(values: np.ndarray, valid: np.ndarray, region) -> float:
    """Ratio of region mean to overall valid mean, with explicit sums."""
    flat = values.reshape(-1)
    vmask = valid.reshape(-1)
    region_sum = 0.0
    for p in region:
        region_sum += float(flat[p])
    region_mean = region_sum / len(region)
    total = 0.0
    n_valid = 0
    for p in range(flat.size):
        if vmask[p]:
            total += float(flat[p])
            n_valid += 1
    return region_mean / (total / n_valid)


def loop_peak_layer(weights: np.ndarray, region, query_ids,
                    grid: tuple[int, int]) -> int:
    """Exhaustive scan for the layer with maximal concentration."""
    n_layers = weights.shape[0]
    best_layer, best_s = 0, -np.inf
    for layer in range(n_layers):
        heat = loop_aggregate_heatmap(weights, layer, query_ids, grid)
        s = loop_concentration(heat, np.ones_like(heat, dtype=bool), region)
        if s > best_s:  # strict: ties keep the lowest layer index
            best_layer, best_s = layer, s
    return best_layer
