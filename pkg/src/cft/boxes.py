"""Axis-aligned box geometry: IoU/GIoU, grounding-error classification, crop planning.

All boxes are normalized to the unit square unless a function says otherwise.
Every function here is pure; the differentiable variants at the bottom mirror
the float formulas through the autodiff engine and are cross-checked against
them in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

GIOU_EPS = 1e-8
DEFAULT_TAU = 0.1
DEFAULT_MIN_SIDE = 28
DEFAULT_ZOOM_TARGET = 448


@dataclass(frozen=True)
class BoxNorm:
    """Corner-form box (x1, y1, x2, y2) with x1 < x2 and y1 < y2."""
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box: {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def in_unit_square(self, tol: float = 0.0) -> bool:
        return (self.x1 >= -tol and self.y1 >= -tol
                and self.x2 <= 1.0 + tol and self.y2 <= 1.0 + tol)


@dataclass(frozen=True)
class BoxCS:
    """Center-size box (cx, cy, w, h) with positive extent."""
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"non-positive box size: w={self.w} h={self.h}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def cs_to_corners(b: BoxCS) -> BoxNorm:
    return BoxNorm(b.cx - b.w / 2.0, b.cy - b.h / 2.0,
                   b.cx + b.w / 2.0, b.cy + b.h / 2.0)


def corners_to_cs(b: BoxNorm) -> BoxCS:
    return BoxCS((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0, b.width, b.height)


def _intersection_area(a: BoxNorm, b: BoxNorm) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: BoxNorm, b: BoxNorm) -> float:
    if a.area <= 0.0 or b.area <= 0.0:
        raise ValueError("iou of a zero-area box")
    inter = _intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union


def giou(a: BoxNorm, b: BoxNorm) -> float:
    """Generalized IoU: iou minus the enclosing-box penalty, in [-1, 1]."""
    inter = _intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        raise ValueError("giou of zero-area boxes")
    cw = max(a.x2, b.x2) - min(a.x1, b.x1)
    ch = max(a.y2, b.y2) - min(a.y1, b.y1)
    c_area = max(cw * ch, GIOU_EPS)
    return inter / union - (c_area - union) / c_area


def detection_loss(pred: BoxNorm, gt: BoxNorm) -> float:
    """L1 on corners plus (1 - GIoU)."""
    l1 = (abs(pred.x1 - gt.x1) + abs(pred.y1 - gt.y1)
          + abs(pred.x2 - gt.x2) + abs(pred.y2 - gt.y2))
    return l1 + (1.0 - giou(pred, gt))


def classify_grounding_error(pred: BoxNorm, gt: BoxNorm,
                             tau: float = DEFAULT_TAU) -> bool:
    """True when the prediction misses the target: IoU strictly below tau."""
    return iou(pred, gt) < tau


@dataclass(frozen=True)
class CropSpec:
    """A planned crop: normalized source rectangle plus resize parameters."""
    source_rect: BoxNorm           # clamped to the unit square
    image_size: tuple[int, int]    # (W, H) pixels
    output_size: tuple[int, int]   # (w, h) pixels after resize
    scale_factor: float

    @property
    def rect_px(self) -> tuple[float, float, float, float]:
        w, h = self.image_size
        r = self.source_rect
        return (r.x1 * w, r.y1 * h, r.x2 * w, r.y2 * h)

    def to_json_dict(self) -> dict:
        return {"rect_px": [round(v, 6) for v in self.rect_px],
                "output_px": list(self.output_size),
                "scale": round(self.scale_factor, 6)}


def _expand_axis(lo: float, hi: float, min_side: float, limit: float) -> tuple[float, float]:
    # grow to min_side centered on the span, then shift back inside [0, limit]
    side = hi - lo
    target = min(max(side, min_side), limit)
    if target > side:
        c = (lo + hi) / 2.0
        lo, hi = c - target / 2.0, c + target / 2.0
        if lo < 0.0:
            lo, hi = 0.0, target
        elif hi > limit:
            lo, hi = limit - target, limit
    return lo, hi


def crop_zoom(box: BoxNorm, image_size: tuple[int, int],
              min_side: int = DEFAULT_MIN_SIDE,
              zoom_target: int = DEFAULT_ZOOM_TARGET) -> CropSpec:
    """Plan a crop of ``box`` resized so its longer side equals ``zoom_target``.

    The box is clamped to the unit square; sides shorter than ``min_side``
    pixels are expanded symmetrically around the box center and pushed back
    inside the image when the expansion crosses a border.
    """
    w_img, h_img = image_size
    if w_img <= 0 or h_img <= 0:
        raise ValueError(f"empty image: {image_size}")
    x1 = min(max(box.x1, 0.0), 1.0) * w_img
    x2 = min(max(box.x2, 0.0), 1.0) * w_img
    y1 = min(max(box.y1, 0.0), 1.0) * h_img
    y2 = min(max(box.y2, 0.0), 1.0) * h_img
    if x2 - x1 <= 0.0 or y2 - y1 <= 0.0:
        raise ValueError(f"box {box.as_tuple()} is degenerate after clamping")

    x1, x2 = _expand_axis(x1, x2, float(min_side), float(w_img))
    y1, y2 = _expand_axis(y1, y2, float(min_side), float(h_img))

    rw, rh = x2 - x1, y2 - y1
    scale = zoom_target / max(rw, rh)
    if rw >= rh:
        out = (int(zoom_target), max(1, int(round(rh * scale))))
    else:
        out = (max(1, int(round(rw * scale))), int(zoom_target))

    rect = BoxNorm(x1 / w_img, y1 / h_img, x2 / w_img, y2 / h_img)
    return CropSpec(source_rect=rect, image_size=(int(w_img), int(h_img)),
                    output_size=out, scale_factor=scale)


# -- differentiable route ---------------------------------------------------
#
# Batched corner tensors of shape (B, 4). Ground truth enters as a constant.
# The float functions above are the oracle for these in the tests.


def _cols(t: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor, ad.Tensor]:
    n = t.shape[0]
    return tuple(ad.narrow(t, 1, i, 1).reshape((n,)) for i in range(4))


def giou_t(pred: ad.Tensor, gt: np.ndarray) -> ad.Tensor:
    """GIoU per row of a (B, 4) corner tensor against constant boxes."""
    px1, py1, px2, py2 = _cols(pred)
    g = np.asarray(gt, dtype=pred.dtype)
    gx1, gy1, gx2, gy2 = (ad.Tensor(g[:, i]) for i in range(4))
    zero = ad.Tensor(np.zeros((), dtype=pred.dtype))

    iw = ad.maximum(ad.minimum(px2, gx2) - ad.maximum(px1, gx1), zero)
    ih = ad.maximum(ad.minimum(py2, gy2) - ad.maximum(py1, gy1), zero)
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    iou_v = inter / union
    cw = ad.maximum(px2, gx2) - ad.minimum(px1, gx1)
    ch = ad.maximum(py2, gy2) - ad.minimum(py1, gy1)
    c_area = ad.maximum(cw * ch, ad.Tensor(np.asarray(GIOU_EPS, dtype=pred.dtype)))
    return iou_v - (c_area - union) / c_area


def detection_loss_t(pred: ad.Tensor, gt: np.ndarray) -> ad.Tensor:
    """Mean over the batch of corner L1 plus (1 - GIoU). Returns a scalar."""
    g = ad.Tensor(np.asarray(gt, dtype=pred.dtype))
    l1 = ad.absolute(pred - g).sum(axis=1)
    return (l1 + (1.0 - giou_t(pred, gt))).mean()


def detection_loss_terms_t(pred: ad.Tensor, gt: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
    """The two loss terms separately (batch means), for logging."""
    g = ad.Tensor(np.asarray(gt, dtype=pred.dtype))
    l1 = ad.absolute(pred - g).sum(axis=1).mean()
    giou_term = (1.0 - giou_t(pred, gt)).mean()
    return l1, giou_term
