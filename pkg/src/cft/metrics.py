"""Layer-wise attention aggregation and concentration statistics.

An attention tensor holds post-softmax weights of shape
``[layers, heads, queries, patches]``; patches index a ``(Hp, Wp)`` grid in
row-major order (patch ``p`` sits at row ``p // Wp``, column ``p % Wp``).

The central quantity is the concentration score of a heatmap on a region:
the mean attention inside the region divided by the mean over all valid
cells. A uniform map scores 1 for every region; a map with all mass inside a
k-cell region scores ``P / k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .boxes import BoxNorm

DEFAULT_ALPHA = 0.003


@dataclass(frozen=True)
class Region:
    """A non-empty set of patch indices on a fixed grid."""
    patches: frozenset[int]
    grid: tuple[int, int]
    source: str = "box"

    def __post_init__(self):
        hp, wp = self.grid
        if not self.patches:
            raise ValueError("empty region")
        if min(self.patches) < 0 or max(self.patches) >= hp * wp:
            raise ValueError(f"region patches outside grid {self.grid}")

    def __len__(self) -> int:
        return len(self.patches)

    def mask(self) -> np.ndarray:
        """Boolean (Hp, Wp) membership mask."""
        hp, wp = self.grid
        m = np.zeros(hp * wp, dtype=bool)
        m[list(self.patches)] = True
        return m.reshape(hp, wp)


@dataclass(frozen=True)
class HeatMap:
    """Non-negative per-patch values with a validity mask of the same shape."""
    values: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        m = np.asarray(self.valid_mask, dtype=bool)
        if v.ndim != 2 or v.shape != m.shape:
            raise ValueError(f"heatmap/mask shape mismatch: {v.shape} vs {m.shape}")
        if np.any(v < 0):
            raise ValueError("negative heatmap values")
        if np.any(v[~m] != 0):
            raise ValueError("nonzero values on invalid cells")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid_mask", m)

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @staticmethod
    def full(values: np.ndarray) -> "HeatMap":
        v = np.asarray(values)
        return HeatMap(v, np.ones_like(v, dtype=bool))


@dataclass(frozen=True)
class AttentionTensor:
    """Post-softmax attention weights ``[L, H, Q, P]`` over a patch grid."""
    weights: np.ndarray
    grid: tuple[int, int]
    query_token_ids: tuple[int, ...] = ()

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4:
            raise ValueError(f"attention weights must be 4-d, got {w.shape}")
        hp, wp = self.grid
        if hp * wp != w.shape[3]:
            raise ValueError(f"grid {self.grid} does not tile {w.shape[3]} patches")
        if np.any(w < 0):
            raise ValueError("negative attention weights")
        ids = self.query_token_ids or tuple(range(w.shape[2]))
        if len(ids) == 0 or min(ids) < 0 or max(ids) >= w.shape[2]:
            raise ValueError(f"bad query token ids for {w.shape[2]} queries")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "query_token_ids", tuple(ids))

    @property
    def n_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def n_heads(self) -> int:
        return self.weights.shape[1]

    @property
    def n_queries(self) -> int:
        return self.weights.shape[2]

    @property
    def n_patches(self) -> int:
        return self.weights.shape[3]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = DEFAULT_ALPHA


def _resolve_queries(attn: AttentionTensor, query_subset) -> list[int]:
    if query_subset is None:
        ids = list(attn.query_token_ids)
    else:
        ids = list(query_subset)
    if not ids:
        raise ValueError("empty query subset")
    if min(ids) < 0 or max(ids) >= attn.n_queries:
        raise ValueError(f"query ids {ids} outside [0, {attn.n_queries})")
    return ids


def aggregate_heatmap(attn: AttentionTensor, layer: int,
                      query_subset: Iterable[int] | None = None) -> HeatMap:
    """Average attention over heads and selected queries at one layer."""
    if not (0 <= layer < attn.n_layers):
        raise ValueError(f"layer {layer} outside [0, {attn.n_layers})")
    ids = _resolve_queries(attn, query_subset)
    values = attn.weights[layer][:, ids, :].mean(axis=(0, 1))
    return HeatMap.full(values.reshape(attn.grid))


def aggregate_window(attn: AttentionTensor, layers: Iterable[int],
                     query_subset: Iterable[int] | None = None) -> HeatMap:
    """Mean of per-layer heatmaps over a window of layers."""
    layer_list = sorted(set(layers))
    if not layer_list:
        raise ValueError("empty layer window")
    maps = [aggregate_heatmap(attn, l, query_subset).values for l in layer_list]
    return HeatMap.full(np.mean(maps, axis=0))


def concentration(heat: HeatMap, region: Region) -> float:
    """Region mean over valid-cell mean. Requires every region cell valid."""
    if heat.grid != region.grid:
        raise ValueError(f"grid mismatch: heatmap {heat.grid} vs region {region.grid}")
    flat = heat.values.reshape(-1)
    valid = heat.valid_mask.reshape(-1)
    idx = list(region.patches)
    if not valid[idx].all():
        raise ValueError("region contains invalid cells")
    overall = flat[valid].mean()
    if overall <= 0.0:
        raise ValueError("degenerate attention: no mass on valid cells")
    return float(flat[idx].mean() / overall)


def peak_layer(attn: AttentionTensor, region: Region,
               query_subset: Iterable[int] | None = None) -> int:
    """Layer index maximizing concentration; ties resolve to the lowest index."""
    best_layer, best_s = 0, -math.inf
    for layer in range(attn.n_layers):
        s = concentration(aggregate_heatmap(attn, layer, query_subset), region)
        if s > best_s:
            best_layer, best_s = layer, s
    return best_layer


def layer_concentrations(attn: AttentionTensor, region: Region,
                         query_subset: Iterable[int] | None = None) -> np.ndarray:
    """Concentration per layer, as one float64 vector."""
    return np.asarray([
        concentration(aggregate_heatmap(attn, l, query_subset), region)
        for l in range(attn.n_layers)
    ], dtype=np.float64)


def condensation_loss(heat, region: Region):
    """Negative log concentration.

    ``heat`` may be a HeatMap (returns a float) or an autodiff Tensor of
    shape (Hp, Wp) or flat (P,) over a fully valid grid (returns a Tensor,
    differentiable down to the cells).
    """
    if isinstance(heat, ad.Tensor):
        hp, wp = region.grid
        flat = heat.reshape((hp * wp,)) if heat.ndim == 2 else heat
        if flat.shape != (hp * wp,):
            raise ValueError(f"heat shape {heat.shape} does not match grid {region.grid}")
        mask = region.mask().reshape(-1).astype(flat.dtype)
        region_mean = (flat * ad.Tensor(mask)).sum() / float(len(region))
        overall_mean = flat.sum() / float(hp * wp)
        return -ad.log(region_mean / overall_mean)
    s = concentration(heat, region)
    if s <= 0.0:
        raise ValueError("zero attention mass in region")
    return -math.log(s)


def total_loss(ntp, l_ac, weights: LossWeights = LossWeights()):
    """Next-token surrogate plus alpha-weighted condensation loss."""
    if isinstance(l_ac, ad.Tensor):
        return l_ac * weights.alpha + ntp
    return ntp + weights.alpha * l_ac


def box_to_region(box: BoxNorm, grid: tuple[int, int]) -> Region:
    """Patches whose cell centers fall inside the box.

    When no center is covered (a sliver between centers), the single patch
    containing the box center is used instead.
    """
    hp, wp = grid
    if hp <= 0 or wp <= 0:
        raise ValueError(f"empty grid {grid}")
    cx = (np.arange(wp) + 0.5) / wp
    cy = (np.arange(hp) + 0.5) / hp
    in_x = (cx >= box.x1) & (cx <= box.x2)
    in_y = (cy >= box.y1) & (cy <= box.y2)
    ii, jj = np.nonzero(np.outer(in_y, in_x))
    if ii.size == 0:
        bx, by = box.center
        i = min(max(int(by * hp), 0), hp - 1)
        j = min(max(int(bx * wp), 0), wp - 1)
        return Region(frozenset({i * wp + j}), grid, source="box-center")
    return Region(frozenset((ii * wp + jj).tolist()), grid, source="box")


def region_iou(a: Region, b: Region) -> float:
    """Set IoU of two regions on the same grid (the token-overlap route)."""
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")
    inter = len(a.patches & b.patches)
    union = len(a.patches | b.patches)
    return inter / union
