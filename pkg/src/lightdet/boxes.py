"""Axis-aligned boxes and the IoU regression-loss family.

Boxes travel in center form (cx, cy, w, h). Losses operate on Tensors with a
trailing axis of 4 so they batch over any leading shape, and every branch is
differentiable; subgradients at ties follow numpy's maximum/minimum convention.
The rasterization oracle never uses the analytic intersection formula: it counts
grid-cell centers, which is what the loss tests compare against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

EPS = 1e-9


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    def array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def _split(b: Tensor):
    return b[..., 0], b[..., 1], b[..., 2], b[..., 3]


def _corners_t(b: Tensor):
    cx, cy, w, h = _split(b)
    hw, hh = w * 0.5, h * 0.5
    return cx - hw, cy - hh, cx + hw, cy + hh


def _as_tensor(b) -> Tensor:
    if isinstance(b, Box):
        return Tensor(b.array())
    if isinstance(b, Tensor):
        return b
    return Tensor(np.asarray(b))


def iou_tensor(pred, gt, eps: float = EPS) -> Tensor:
    """Plain intersection over union on center-form tensors, (...,4) -> (...)."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    ax1, ay1, ax2, ay2 = _corners_t(pred)
    bx1, by1, bx2, by2 = _corners_t(gt)
    iw = (ax2.minimum(bx2) - ax1.maximum(bx1)).clamp(0.0)
    ih = (ay2.minimum(by2) - ay1.maximum(by1)).clamp(0.0)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / (union + eps)


def box_loss(kind: str, pred, gt, squared_distance: bool = True,
             eps: float = EPS) -> Tensor:
    """1 - score for the requested IoU family member; batches over leading dims."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    ax1, ay1, ax2, ay2 = _corners_t(pred)
    bx1, by1, bx2, by2 = _corners_t(gt)
    pw, ph = ax2 - ax1, ay2 - ay1
    gw, gh = bx2 - bx1, by2 - by1

    iw = (ax2.minimum(bx2) - ax1.maximum(bx1)).clamp(0.0)
    ih = (ay2.minimum(by2) - ay1.maximum(by1)).clamp(0.0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou = inter / (union + eps)

    if kind == "iou":
        return 1.0 - iou

    # enclosing box of the pair
    ew = ax2.maximum(bx2) - ax1.minimum(bx1)
    eh = ay2.maximum(by2) - ay1.minimum(by1)

    if kind == "giou":
        enclose = ew * eh + eps
        return 1.0 - (iou - (enclose - union) / enclose)

    pcx, pcy = (ax1 + ax2) * 0.5, (ay1 + ay2) * 0.5
    gcx, gcy = (bx1 + bx2) * 0.5, (by1 + by2) * 0.5
    dx, dy = gcx - pcx, gcy - pcy
    center_sq = dx * dx + dy * dy

    if kind == "diou":
        diag_sq = ew * ew + eh * eh + eps
        return 1.0 - (iou - center_sq / diag_sq)

    if kind == "ciou":
        diag_sq = ew * ew + eh * eh + eps
        v = (4.0 / np.pi ** 2) * ((gw / (gh + eps)).arctan() - (pw / (ph + eps)).arctan()) ** 2
        alpha = v / ((1.0 - iou) + v + eps)
        return 1.0 - (iou - center_sq / diag_sq - alpha * v)

    if kind == "eiou":
        diag_sq = ew * ew + eh * eh + eps
        return 1.0 - (iou - center_sq / diag_sq
                      - (pw - gw) ** 2 / (ew * ew + eps)
                      - (ph - gh) ** 2 / (eh * eh + eps))

    if kind == "siou":
        sigma = (center_sq + eps).sqrt()
        ch = dy.abs()
        x = (ch / sigma).clamp(0.0, 1.0 - 1e-7)
        angle = 1.0 - 2.0 * (x.arcsin() - np.pi / 4).sin() ** 2
        gamma = 2.0 - angle
        rho_x = dx / (ew + eps)
        rho_y = dy / (eh + eps)
        if squared_distance:
            rho_x, rho_y = rho_x * rho_x, rho_y * rho_y
        else:
            rho_x, rho_y = rho_x.abs(), rho_y.abs()
        dist = (1.0 - (-gamma * rho_x).exp()) + (1.0 - (-gamma * rho_y).exp())
        ww = (pw - gw).abs() / pw.maximum(gw)
        wh = (ph - gh).abs() / ph.maximum(gh)
        shape = (1.0 - (-ww).exp()) ** 4 + (1.0 - (-wh).exp()) ** 4
        return 1.0 - iou + (dist + shape) * 0.5

    raise ValueError(f"unknown box loss kind {kind!r}")


LOSS_KINDS = ("iou", "giou", "diou", "ciou", "eiou", "siou")


# ---- numpy fast paths for matching / nms ----


def corners_np(boxes: np.ndarray) -> np.ndarray:
    """(..., 4) center form -> corner form, pure numpy."""
    out = np.empty_like(boxes)
    out[..., 0] = boxes[..., 0] - boxes[..., 2] / 2
    out[..., 1] = boxes[..., 1] - boxes[..., 3] / 2
    out[..., 2] = boxes[..., 0] + boxes[..., 2] / 2
    out[..., 3] = boxes[..., 1] + boxes[..., 3] / 2
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Pairwise IoU of corner-form boxes, (N,4) x (M,4) -> (N,M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    return inter / (area_a[:, None] + area_b[None, :] - inter + eps)


# ---- independent oracle ----


def rasterized_iou(a: Box, b: Box, n: int = 4000, dense: bool = False) -> float:
    """IoU by counting grid-cell centers inside each box.

    An n-cell grid spans the pair's joint bounding frame. A cell belongs to a box
    when its center does. dense=True materializes the full 2D occupancy grids;
    the default counts the same cells through the x/y center masks (identical
    result, no n^2 memory).
    """
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    x0, x1 = min(ax1, bx1), max(ax2, bx2)
    y0, y1 = min(ay1, by1), max(ay2, by2)
    span = max(x1 - x0, y1 - y0, 1e-12)
    xs = x0 + (np.arange(n) + 0.5) * (span / n)
    ys = y0 + (np.arange(n) + 0.5) * (span / n)

    in_ax = (xs >= ax1) & (xs <= ax2)
    in_ay = (ys >= ay1) & (ys <= ay2)
    in_bx = (xs >= bx1) & (xs <= bx2)
    in_by = (ys >= by1) & (ys <= by2)

    if dense:
        grid_a = np.outer(in_ay, in_ax)
        grid_b = np.outer(in_by, in_bx)
        cells_a = int(grid_a.sum())
        cells_b = int(grid_b.sum())
        cells_i = int((grid_a & grid_b).sum())
    else:
        cells_a = int(in_ax.sum()) * int(in_ay.sum())
        cells_b = int(in_bx.sum()) * int(in_by.sum())
        cells_i = int((in_ax & in_bx).sum()) * int((in_ay & in_by).sum())

    cells_u = cells_a + cells_b - cells_i
    return cells_i / cells_u if cells_u else 0.0
