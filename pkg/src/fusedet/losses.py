"""Grid-target construction and the weighted detection loss stack.

The heat-map loss is an MSE split into foreground (cells under a target
splat) and background, weighted separately because background dominates.
Box and yaw losses apply only at exact object-center cells.  Per-head losses
combine as  w_heat * L_heat + w_bbox * L_bbox (+ w_theta * yaw terms), and
the two heads combine as  w_bev * L_bev + w_2d * L_2d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tensor, ops
from .heads import CATEGORIES, GridGeometry, encode_yaw


@dataclass
class LossWeights:
    w_fg: float = 0.9
    w_bg: float = 0.1
    w_heat: float = 10.0
    w_bbox: float = 1.0
    w_theta: float = 0.2
    w_bev: float = 0.95
    w_2d: float = 0.05

    def validate(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class TargetObject:
    """One annotation in the head-grid's native frame.

    BEV: x forward / y lateral in meters, sizes (l, w) meters, yaw set.
    2D: x=u / y=v in pixels, sizes (w, h) pixels, yaw None.
    """

    category: int
    y: float
    x: float
    size_a: float
    size_b: float
    yaw: float = None


@dataclass
class GridTargets:
    heatmap: np.ndarray          # (Hg, Wg, K) float32 in [0, 1]
    box: np.ndarray              # (Hg, Wg, 4)
    yaw_class: np.ndarray        # (Hg, Wg) int (or None for 2d)
    yaw_offset: np.ndarray       # (Hg, Wg) float (or None for 2d)
    fg_mask: np.ndarray          # (Hg, Wg, K) bool: heatmap target > 0
    center_mask: np.ndarray      # (Hg, Wg) bool: exact object-center cells
    num_dropped: int = 0         # objects whose center fell outside the grid
    num_collisions: int = 0      # objects whose center cell was already taken


def bev_target_objects(annotations):
    return [TargetObject(CATEGORIES.index(o.category), o.y, o.x, o.length,
                         o.width, o.yaw) for o in annotations]


def camera_target_objects(boxes):
    return [TargetObject(CATEGORIES.index(b.category), b.v, b.u, b.w, b.h)
            for b in boxes]


def build_targets(objects, geometry: GridGeometry, kind,
                  num_categories=len(CATEGORIES)):
    """Rasterize annotations into per-cell training targets.

    Each object puts exact 1.0 at its center cell plus a Gaussian splat
    exp(-d^2 / (2 sigma^2)) on neighbors, sigma = max(1, diag_cells / 6);
    same-category splats merge with elementwise max.
    """
    if kind not in ("bev", "2d"):
        raise ValueError(f"unknown head kind {kind!r}")
    rows, cols = geometry.rows, geometry.cols
    heat = np.zeros((rows, cols, num_categories), dtype=np.float32)
    box = np.zeros((rows, cols, 4), dtype=np.float32)
    yaw_cls = np.zeros((rows, cols), dtype=np.int64) if kind == "bev" else None
    yaw_off = np.zeros((rows, cols), dtype=np.float32) if kind == "bev" else None
    center_mask = np.zeros((rows, cols), dtype=bool)
    dropped = 0
    collisions = 0

    for obj in objects:
        if obj.size_a <= 0 or obj.size_b <= 0:
            raise ValueError(f"object has non-positive size ({obj.size_a}, {obj.size_b})")
        iy, ix = geometry.cell_of(obj.y, obj.x)
        if not geometry.contains_cell(iy, ix):
            dropped += 1
            continue
        if center_mask[iy, ix]:
            collisions += 1
            continue
        diag_cells = math.hypot(obj.size_a, obj.size_b) / geometry.cell_size
        sigma = max(1.0, diag_cells / 6.0)
        radius = int(math.ceil(3.0 * sigma))
        y0, y1 = max(0, iy - radius), min(rows, iy + radius + 1)
        x0, x1 = max(0, ix - radius), min(cols, ix + radius + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        splat = np.exp(-((yy - iy) ** 2 + (xx - ix) ** 2) / (2.0 * sigma * sigma))
        k = obj.category
        heat[y0:y1, x0:x1, k] = np.maximum(heat[y0:y1, x0:x1, k],
                                           splat.astype(np.float32))
        heat[iy, ix, k] = 1.0
        dx = (obj.x - geometry.origin_x) / geometry.cell_size - ix
        dy = (obj.y - geometry.origin_y) / geometry.cell_size - iy
        box[iy, ix] = (dx, dy, math.log(obj.size_a), math.log(obj.size_b))
        if kind == "bev":
            cls, offset = encode_yaw(obj.yaw)
            yaw_cls[iy, ix] = cls
            yaw_off[iy, ix] = offset
        center_mask[iy, ix] = True

    return GridTargets(
        heatmap=heat, box=box, yaw_class=yaw_cls, yaw_offset=yaw_off,
        fg_mask=heat > 0, center_mask=center_mask,
        num_dropped=dropped, num_collisions=collisions)


def stack_targets(target_list):
    """Stack per-frame GridTargets into batched arrays for the loss ops."""
    heat = np.stack([t.heatmap for t in target_list])
    box = np.stack([t.box for t in target_list])
    fg = np.stack([t.fg_mask for t in target_list])
    center = np.stack([t.center_mask for t in target_list])
    if target_list[0].yaw_class is not None:
        yaw_cls = np.stack([t.yaw_class for t in target_list])
        yaw_off = np.stack([t.yaw_offset for t in target_list])
    else:
        yaw_cls = yaw_off = None
    return heat, box, yaw_cls, yaw_off, fg, center


def _zero_like_scalar(ref: Tensor):
    return Tensor(np.zeros((), dtype=ref.dtype))


def _masked_mean(values: Tensor, mask: np.ndarray):
    count = int(mask.sum())
    if count == 0:
        return _zero_like_scalar(values)
    weight = Tensor(mask.astype(values.dtype))
    return ops.sum_(ops.mul(values, weight)) * (1.0 / count)


def heat_loss(pred: Tensor, target: Tensor, fg_mask, w_fg, w_bg):
    """w_fg * MSE over foreground cells + w_bg * MSE over the rest."""
    if pred.shape != target.shape or pred.shape != fg_mask.shape:
        raise ValueError(
            f"heat_loss shapes differ: {pred.shape}, {target.shape}, {fg_mask.shape}")
    diff = ops.sub(pred, target)
    sq = ops.mul(diff, diff)
    fg = _masked_mean(sq, fg_mask)
    bg = _masked_mean(sq, ~fg_mask)
    return w_fg * fg + w_bg * bg


def smooth_l1(diff: Tensor, beta=1.0):
    """Elementwise smooth L1: quadratic below ``beta``, linear above."""
    a = ops.add(ops.relu(diff), ops.relu(ops.neg(diff)))      # |diff|
    beta_t = Tensor(np.asarray(beta, dtype=diff.dtype))
    m = ops.sub(beta_t, ops.relu(ops.sub(beta_t, a)))         # min(|diff|, beta)
    quad = ops.mul(ops.mul(m, m), Tensor(np.asarray(0.5 / beta, dtype=diff.dtype)))
    return ops.add(quad, ops.sub(a, m))


def box_loss(pred: Tensor, target: Tensor, center_mask):
    """Smooth L1 averaged over center cells and the 4 box channels."""
    if pred.shape != target.shape:
        raise ValueError(f"box_loss shapes differ: {pred.shape} vs {target.shape}")
    count = int(center_mask.sum())
    if count == 0:
        return _zero_like_scalar(pred)
    per_elem = smooth_l1(ops.sub(pred, target))
    weight = Tensor(center_mask[..., None].astype(pred.dtype))
    return ops.sum_(ops.mul(per_elem, weight)) * (1.0 / (count * 4))


def yaw_loss(pred_logits: Tensor, pred_offset: Tensor, cls_target, off_target,
             center_mask):
    """(cross-entropy over 8 bins, smooth L1 on offsets), both over centers."""
    count = int(center_mask.sum())
    if count == 0:
        zero = _zero_like_scalar(pred_logits)
        return zero, _zero_like_scalar(pred_offset)
    onehot = np.eye(pred_logits.shape[-1], dtype=pred_logits.data.dtype)[cls_target]
    onehot *= center_mask[..., None]
    logp = ops.log_softmax(pred_logits, axis=-1)
    ce = ops.neg(ops.sum_(ops.mul(logp, Tensor(onehot)))) * (1.0 / count)

    diff = ops.sub(pred_offset, Tensor(off_target[..., None].astype(pred_offset.dtype)))
    weight = Tensor(center_mask[..., None].astype(pred_offset.dtype))
    off = ops.sum_(ops.mul(smooth_l1(diff), weight)) * (1.0 / count)
    return ce, off


def task_loss(l_heat, l_bbox, l_theta_cls=None, l_theta_off=None, *,
              kind="bev", weights: LossWeights = None):
    """Per-head weighted sum; the yaw terms enter only for the BEV head."""
    weights = weights or LossWeights()
    if kind == "bev":
        if l_theta_cls is None or l_theta_off is None:
            raise ValueError("BEV task loss requires both yaw terms")
        return (weights.w_heat * l_heat + weights.w_bbox * l_bbox
                + weights.w_theta * (l_theta_cls + l_theta_off))
    if l_theta_cls is not None or l_theta_off is not None:
        raise ValueError("2D task loss takes no yaw terms")
    return weights.w_heat * l_heat + weights.w_bbox * l_bbox


def total_loss(l_bev, l_2d, w_bev, w_2d):
    """Final training loss; an absent task contributes zero."""
    if w_bev < 0 or w_2d < 0:
        raise ValueError(f"task weights must be >= 0, got ({w_bev}, {w_2d})")
    if l_bev is None:
        return w_2d * l_2d
    if l_2d is None:
        return w_bev * l_bev
    return w_bev * l_bev + w_2d * l_2d


@dataclass
class LossBreakdown:
    """Scalar values of every component, for logging."""

    total: float = 0.0
    parts: dict = field(default_factory=dict)
