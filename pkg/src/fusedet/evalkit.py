"""Detection metrics and the attention-focus score.

BEV detections match ground truth by center distance at several thresholds
(meters); 2D detections by axis-aligned IoU.  AP interpolates precision at
40 equally spaced recall points.  The focus score compares attention mass
on the geometrically corresponding cross-view region against the uniform
baseline |region| / T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .heads import CATEGORIES
from .scenesynth import BEV_CELL_SIZE, BEV_CELLS, BEV_HALF_Y, correspondence_region

BEV_DISTANCE_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
IOU_THRESHOLD_2D = 0.5
NUM_RECALL_POINTS = 40


@dataclass
class MatchCriterion:
    kind: str                  # "center" | "iou"
    threshold: float

    def matches(self, det, gt):
        if self.kind == "center":
            dist = math.hypot(det.center[0] - gt.center[0],
                              det.center[1] - gt.center[1])
            return dist <= self.threshold, dist
        if self.kind == "iou":
            iou = _iou_2d(det, gt)
            return iou >= self.threshold, -iou
        raise ValueError(f"unknown criterion kind {self.kind!r}")


def _iou_2d(a, b):
    ax0, ax1 = a.center[0] - a.size[0] / 2, a.center[0] + a.size[0] / 2
    ay0, ay1 = a.center[1] - a.size[1] / 2, a.center[1] + a.size[1] / 2
    bx0, bx1 = b.center[0] - b.size[0] / 2, b.center[0] + b.size[0] / 2
    by0, by1 = b.center[1] - b.size[1] / 2, b.center[1] + b.size[1] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter
    return inter / union if union > 0 else 0.0


@dataclass
class GroundTruthBox:
    category: str
    center: tuple
    size: tuple
    yaw: float = None


def bev_ground_truth(annotations):
    """Ground-truth boxes (BEV metric frame) from scene annotations in-grid."""
    out = []
    for o in annotations:
        if 0.0 <= o.x < BEV_CELLS * BEV_CELL_SIZE and abs(o.y) < BEV_HALF_Y:
            out.append(GroundTruthBox(o.category, (o.x, o.y),
                                      (o.length, o.width), o.yaw))
    return out


def camera_ground_truth(boxes):
    return [GroundTruthBox(b.category, (b.u, b.v), (b.w, b.h)) for b in boxes]


@dataclass
class MatchResult:
    scores: list = field(default_factory=list)        # descending
    tp_flags: list = field(default_factory=list)
    matched_gt: list = field(default_factory=list)    # gt index or None, per det
    num_gt: int = 0
    yaw_errors: list = field(default_factory=list)    # radians, per TP with yaw


def match_detections(dets, gts, criterion: MatchCriterion) -> MatchResult:
    """Greedy matching in descending score; each ground truth claimed once."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    result = MatchResult(num_gt=len(gts))
    claimed = set()
    for i in order:
        det = dets[i]
        best = None
        best_quality = None
        for j, gt in enumerate(gts):
            if j in claimed:
                continue
            ok, quality = criterion.matches(det, gt)
            if ok and (best_quality is None or quality < best_quality):
                best, best_quality = j, quality
        result.scores.append(det.score)
        result.tp_flags.append(best is not None)
        result.matched_gt.append(best)
        if best is not None:
            claimed.add(best)
            gt = gts[best]
            if det.yaw is not None and getattr(gt, "yaw", None) is not None:
                diff = abs(det.yaw - gt.yaw) % (2.0 * math.pi)
                result.yaw_errors.append(min(diff, 2.0 * math.pi - diff))
    return result


def average_precision(match_results, total_gt=None):
    """40-point interpolated AP over pooled per-frame match results."""
    if total_gt is None:
        total_gt = sum(m.num_gt for m in match_results)
    if total_gt == 0:
        return 0.0
    pairs = []
    for m in match_results:
        pairs.extend(zip(m.scores, m.tp_flags))
    pairs.sort(key=lambda p: -p[0])
    tp = np.cumsum([1.0 if flag else 0.0 for _, flag in pairs])
    fp = np.cumsum([0.0 if flag else 1.0 for _, flag in pairs])
    recall = tp / total_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    ap = 0.0
    for j in range(1, NUM_RECALL_POINTS + 1):
        r = j / NUM_RECALL_POINTS
        reachable = precision[recall >= r - 1e-12]
        ap += float(reachable.max()) if reachable.size else 0.0
    return ap / NUM_RECALL_POINTS


def map_score(ap_table):
    """Mean over categories of each category's mean AP, scaled to [0, 100].

    ``ap_table`` maps (category, threshold) -> AP; BEV tables carry the four
    distance thresholds per category, 2D tables a single IoU entry.
    """
    if not ap_table:
        raise ValueError("map_score needs at least one AP entry")
    per_category = {}
    for (category, _), ap in ap_table.items():
        per_category.setdefault(category, []).append(ap)
    means = [sum(v) / len(v) for v in per_category.values()]
    return 100.0 * sum(means) / len(means)


@dataclass
class FocusScore:
    mass: float            # attention mass inside the correspondence region
    baseline: float        # |region| / T (uniform-attention expectation)
    ratio: float
    query_token: int
    region_size: int


def cross_view_mass(record, query_token, token_indices):
    """Attention mass from one query row onto a set of global token indices."""
    row = record.matrix[query_token]
    return float(row[list(token_indices)].sum()) if token_indices else 0.0


def attention_focus(records, scene, pool_size=None):
    """FocusScore per object-center query token at the final fusion stage.

    Averages attention over all heads and layers of the last fusion stage.
    Objects whose correspondence region is empty (outside the camera view)
    are skipped; an empty scene yields an empty list.
    """
    if not scene.objects or not records:
        return []
    final_stage = max(r.stage for r in records)
    final_records = [r for r in records if r.stage == final_stage]
    ranges = final_records[0].token_ranges
    bev_start, bev_end = ranges["bev"]
    cam_start, _ = ranges["camera"]
    total_tokens = final_records[0].num_tokens
    if pool_size is None:
        pool_size = int(round(math.sqrt(bev_end - bev_start)))
    block = BEV_CELLS // pool_size

    scores = []
    for obj in scene.objects:
        ix = int(obj.x / BEV_CELL_SIZE)
        iy = int((obj.y + BEV_HALF_Y) / BEV_CELL_SIZE)
        if not (0 <= iy < BEV_CELLS and 0 <= ix < BEV_CELLS):
            continue
        region_local = correspondence_region(scene, ("bev", iy, ix), pool_size)
        if not region_local:
            continue
        region = [cam_start + t for t in region_local]
        query = bev_start + (iy // block) * pool_size + ix // block
        mass = float(np.mean([cross_view_mass(r, query, region)
                              for r in final_records]))
        baseline = len(region) / total_tokens
        scores.append(FocusScore(mass=mass, baseline=baseline,
                                 ratio=mass / baseline, query_token=query,
                                 region_size=len(region)))
    return scores


def ap_table_bev(frames, categories=CATEGORIES,
                 thresholds=BEV_DISTANCE_THRESHOLDS):
    """(category, threshold) -> AP from per-frame (detections, gt) pairs."""
    table = {}
    yaw_errors = []
    for category in categories:
        for thr in thresholds:
            criterion = MatchCriterion("center", thr)
            results = []
            for dets, gts in frames:
                dsel = [d for d in dets if d.category == category]
                gsel = [g for g in gts if g.category == category]
                results.append(match_detections(dsel, gsel, criterion))
            table[(category, thr)] = average_precision(results)
            if thr == max(thresholds):
                for r in results:
                    yaw_errors.extend(r.yaw_errors)
    mean_yaw = float(np.mean(yaw_errors)) if yaw_errors else float("nan")
    return table, mean_yaw


def ap_table_2d(frames, categories=CATEGORIES, threshold=IOU_THRESHOLD_2D):
    table = {}
    criterion = MatchCriterion("iou", threshold)
    for category in categories:
        results = []
        for dets, gts in frames:
            dsel = [d for d in dets if d.category == category]
            gsel = [g for g in gts if g.category == category]
            results.append(match_detections(dsel, gsel, criterion))
        table[(category, threshold)] = average_precision(results)
    return table
