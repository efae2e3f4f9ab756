"""CenterNet-style heads: per-cell heat maps, box regression, yaw binning.

The yaw angle is encoded as one of 8 classes (bin centers at 45-degree
multiples) plus a residual offset in [-pi/8, pi/8), avoiding the derivative
discontinuity of direct angle regression at the 0/360 wrap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import ShapeError, Tensor, ops
from .fusenet.nn import Conv2d, Module

NUM_YAW_BINS = 8
YAW_BIN_WIDTH = 2.0 * math.pi / NUM_YAW_BINS   # 45 degrees
HALF_BIN = YAW_BIN_WIDTH / 2.0                 # 22.5 degrees
# sigmoid(-2.19) ~= 0.1: background-dominated prior for the heat map
HEATMAP_BIAS_INIT = -2.19

CATEGORIES = ("vehicle", "pedestrian")


def encode_yaw(theta):
    """Map an angle to (bin index in 0..7, offset in [-pi/8, pi/8))."""
    if not math.isfinite(theta):
        raise ValueError(f"yaw must be finite, got {theta}")
    shifted = math.fmod(theta + HALF_BIN, 2.0 * math.pi)
    if shifted < 0.0:
        shifted += 2.0 * math.pi
    cls = int(shifted // YAW_BIN_WIDTH)
    if cls == NUM_YAW_BINS:  # guard against shifted == 2*pi after rounding
        cls = 0
        shifted = 0.0
    offset = shifted - cls * YAW_BIN_WIDTH - HALF_BIN
    return cls, offset


def decode_yaw(cls, offset):
    """Inverse of :func:`encode_yaw`; returns an angle in [0, 2*pi)."""
    if not 0 <= cls < NUM_YAW_BINS:
        raise ValueError(f"yaw class {cls} outside 0..{NUM_YAW_BINS - 1}")
    theta = math.fmod(cls * YAW_BIN_WIDTH + offset, 2.0 * math.pi)
    if theta < 0.0:
        theta += 2.0 * math.pi
    return theta


@dataclass
class GridGeometry:
    """Mapping between head-grid cells and metric (BEV) or pixel (2D) space.

    Cell (iy, ix) with in-cell offsets (dy, dx) sits at
    (origin_y + (iy + dy) * cell_size, origin_x + (ix + dx) * cell_size).
    """

    rows: int
    cols: int
    cell_size: float
    origin_y: float = 0.0
    origin_x: float = 0.0

    def cell_of(self, y, x):
        iy = int(math.floor((y - self.origin_y) / self.cell_size))
        ix = int(math.floor((x - self.origin_x) / self.cell_size))
        return iy, ix

    def contains_cell(self, iy, ix):
        return 0 <= iy < self.rows and 0 <= ix < self.cols


@dataclass
class HeadOutput:
    heatmap: Tensor                 # (N, Hg, Wg, K), sigmoid-activated
    box: Tensor                     # (N, Hg, Wg, 4): dx, dy, log l, log w
    yaw_class: Tensor = None        # (N, Hg, Wg, 8) logits, BEV only
    yaw_offset: Tensor = None       # (N, Hg, Wg, 1) radians, BEV only


@dataclass
class Detection:
    category: str
    score: float
    center: tuple                   # (x, y) meters for BEV, (u, v) pixels for 2D
    size: tuple                     # (l, w) meters or (w, h) pixels
    yaw: float = None               # radians, BEV only
    cell: tuple = None              # (iy, ix) grid cell of the peak


class _OutputStack(Module):
    """3x3 conv + ReLU + 1x1 conv onto one output tensor."""

    def __init__(self, rng, c_in, c_mid, c_out, bias_init=0.0):
        super().__init__()
        self.conv = Conv2d(rng, c_in, c_mid, kernel=3)
        self.proj = Conv2d(rng, c_mid, c_out, kernel=1, bias_init=bias_init)

    def __call__(self, x):
        return self.proj(ops.relu(self.conv(x)))


class DetectionHead(Module):
    """Per-cell prediction head; ``kind`` is "bev" or "2d"."""

    def __init__(self, rng, kind, c_in, num_categories=len(CATEGORIES), c_mid=32):
        super().__init__()
        if kind not in ("bev", "2d"):
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.c_in = c_in
        self.num_categories = num_categories
        self.heat = _OutputStack(rng, c_in, c_mid, num_categories,
                                 bias_init=HEATMAP_BIAS_INIT)
        self.box = _OutputStack(rng, c_in, c_mid, 4)
        if kind == "bev":
            self.yaw_cls = _OutputStack(rng, c_in, c_mid, NUM_YAW_BINS)
            self.yaw_off = _OutputStack(rng, c_in, c_mid, 1)

    def __call__(self, features):
        if features.ndim != 4 or features.shape[3] != self.c_in:
            raise ShapeError(
                f"{self.kind} head expects (N, H, W, {self.c_in}) features, "
                f"got {features.shape}")
        out = HeadOutput(
            heatmap=ops.sigmoid(self.heat(features)),
            box=self.box(features),
        )
        if self.kind == "bev":
            out.yaw_class = self.yaw_cls(features)
            out.yaw_offset = self.yaw_off(features)
        return out


def _local_maxima(heat):
    """Cells whose value equals the max of their 3x3 neighborhood."""
    padded = np.pad(heat, 1, constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    return heat >= win.max(axis=(2, 3))


def decode_detections(out: HeadOutput, geometry: GridGeometry, threshold=0.3,
                      top_k=64, categories=CATEGORIES):
    """Turn head outputs (batch size 1) into discrete detections.

    A cell is a peak iff its heat value is the 3x3 neighborhood max and
    exceeds ``threshold``.  Peaks are taken in descending score order up to
    ``top_k``; same-category peaks that are 8-neighbors of an already kept
    peak are suppressed.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    heat = np.asarray(out.heatmap.data)
    box = np.asarray(out.box.data)
    if heat.ndim == 4:
        if heat.shape[0] != 1:
            raise ValueError(f"decoding expects batch size 1, got {heat.shape}")
        heat, box = heat[0], box[0]
        yaw_cls = out.yaw_class.data[0] if out.yaw_class is not None else None
        yaw_off = out.yaw_offset.data[0] if out.yaw_offset is not None else None
    else:
        yaw_cls = out.yaw_class.data if out.yaw_class is not None else None
        yaw_off = out.yaw_offset.data if out.yaw_offset is not None else None

    peaks = []
    for k in range(heat.shape[2]):
        mask = _local_maxima(heat[:, :, k]) & (heat[:, :, k] > threshold)
        for iy, ix in zip(*np.nonzero(mask)):
            peaks.append((float(heat[iy, ix, k]), k, int(iy), int(ix)))
    peaks.sort(key=lambda p: (-p[0], p[1], p[2], p[3]))

    detections = []
    kept_cells = []
    for score, k, iy, ix in peaks:
        if len(detections) >= top_k:
            break
        if any(kk == k and abs(iy - py) <= 1 and abs(ix - px) <= 1
               for kk, py, px in kept_cells):
            continue
        dx, dy, log_a, log_b = box[iy, ix]
        x = geometry.origin_x + (ix + float(dx)) * geometry.cell_size
        y = geometry.origin_y + (iy + float(dy)) * geometry.cell_size
        size = (float(np.exp(log_a)), float(np.exp(log_b)))
        yaw = None
        if yaw_cls is not None:
            cls = int(np.argmax(yaw_cls[iy, ix]))
            yaw = decode_yaw(cls, float(yaw_off[iy, ix, 0]))
        detections.append(Detection(
            category=categories[k], score=score, center=(x, y), size=size,
            yaw=yaw, cell=(iy, ix)))
        kept_cells.append((k, iy, ix))
    return detections
