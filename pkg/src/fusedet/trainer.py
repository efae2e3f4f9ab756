"""Training, evaluation and ablation drivers.

Everything is deterministic in the master seed: scene seeds, parameter
initialization, batch order, augmentation draws and evaluation all derive
from it through independent named streams.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, format_config, parse_config
from .detector import BEV_HEAD_GEOMETRY, CAMERA_HEAD_GEOMETRY, Detector
from .diffcore import AdamW, Tensor
from .evalkit import (
    ap_table_2d,
    ap_table_bev,
    attention_focus,
    bev_ground_truth,
    camera_ground_truth,
    map_score,
)
from .fusenet import extract_attention_records
from .heads import HeadOutput, decode_detections
from . import losses as L
from .scenesynth import (
    DifficultyParams,
    augment_mirror,
    augment_rigid,
    dataset_projection,
    render_pair,
    sample_scene,
    scene_seed,
    write_manifest,
)


@dataclass
class TrainResult:
    checkpoint_path: str
    final_metrics: dict
    history: list = field(default_factory=list)


def _difficulty(config: RunConfig):
    return DifficultyParams(min_objects=config.data.min_objects,
                            max_objects=config.data.max_objects)


def build_detector(config: RunConfig, rng=None):
    rng = rng or np.random.default_rng([config.seed, 1])
    return Detector(config.fusion_config(), rng,
                    head_mid_channels=config.model.head_mid_channels)


class SceneCache:
    """Render-once cache of the scenes of one split."""

    def __init__(self, config: RunConfig, split, size):
        self.difficulty = _difficulty(config)
        self.projection = dataset_projection(config.seed)
        self.seeds = [scene_seed(config.seed, split, i) for i in range(size)]
        self._scenes = {}
        self._pairs = {}

    def __len__(self):
        return len(self.seeds)

    def scene(self, i):
        if i not in self._scenes:
            self._scenes[i] = sample_scene(self.seeds[i], self.difficulty,
                                           self.projection)
        return self._scenes[i]

    def pair(self, i):
        if i not in self._pairs:
            self._pairs[i] = render_pair(self.scene(i))
        return self._pairs[i]


def _batch_tensors(pairs, views):
    bev = Tensor(np.stack([p.bev for p in pairs])) if "bev" in views else None
    cam = Tensor(np.stack([p.camera for p in pairs])) if "camera" in views else None
    return bev, cam


def _batch_losses(det_out, pairs, weights, views):
    parts = {}
    l_bev = l_2d = None
    if "bev" in views:
        targets = [L.build_targets(L.bev_target_objects(p.bev_annotations),
                                   BEV_HEAD_GEOMETRY, "bev") for p in pairs]
        heat, box, yaw_cls, yaw_off, fg, center = L.stack_targets(targets)
        lh = L.heat_loss(det_out.bev.heatmap, Tensor(heat), fg,
                         weights.w_fg, weights.w_bg)
        lb = L.box_loss(det_out.bev.box, Tensor(box), center)
        lyc, lyo = L.yaw_loss(det_out.bev.yaw_class, det_out.bev.yaw_offset,
                              yaw_cls, yaw_off, center)
        l_bev = L.task_loss(lh, lb, lyc, lyo, kind="bev", weights=weights)
        parts.update(bev_heat=lh.item(), bev_box=lb.item(),
                     bev_yaw_cls=lyc.item(), bev_yaw_off=lyo.item(),
                     l_bev=l_bev.item())
    if "camera" in views:
        targets = [L.build_targets(L.camera_target_objects(p.boxes_2d),
                                   CAMERA_HEAD_GEOMETRY, "2d") for p in pairs]
        heat, box, _, _, fg, center = L.stack_targets(targets)
        lh = L.heat_loss(det_out.camera.heatmap, Tensor(heat), fg,
                         weights.w_fg, weights.w_bg)
        lb = L.box_loss(det_out.camera.box, Tensor(box), center)
        l_2d = L.task_loss(lh, lb, kind="2d", weights=weights)
        parts.update(heat_2d=lh.item(), box_2d=lb.item(), l_2d=l_2d.item())
    total = L.total_loss(l_bev, l_2d, weights.w_bev, weights.w_2d)
    parts["loss"] = total.item()
    return total, parts


def run_train(config: RunConfig, log=print) -> TrainResult:
    """Train per the config; returns the final checkpoint path and metrics."""
    config.loss.validate()
    out_dir = config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write(format_config(config))
    write_manifest(os.path.join(out_dir, "manifest.jsonl"), config.seed,
                   {"train": config.data.train_scenes,
                    "val": config.data.val_scenes},
                   _difficulty(config))

    views = config.fusion_config().active_views()
    detector = build_detector(config)
    params = detector.parameters()
    optimizer = AdamW(params, lr=config.optim.base_lr,
                      weight_decay=config.optim.weight_decay,
                      betas=(config.optim.beta1, config.optim.beta2),
                      eps=config.optim.eps, decay_factor=config.optim.lr_decay)

    train_cache = SceneCache(config, "train", config.data.train_scenes)
    val_cache = SceneCache(config, "val", config.data.val_scenes)
    batch_rng = np.random.default_rng([config.seed, 2])
    aug_rng = np.random.default_rng([config.seed, 3])

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    history = []
    with open(metrics_path, "w", encoding="utf-8") as metrics_fh:
        def emit(record):
            metrics_fh.write(json.dumps(record) + "\n")
            history.append(record)

        for step in range(1, config.train.steps + 1):
            idx = batch_rng.integers(0, len(train_cache), size=config.train.batch_size)
            pairs = []
            for i in idx:
                pair = train_cache.pair(int(i))
                if config.aug.max_rot_deg > 0 or config.aug.max_trans_m > 0:
                    pair = augment_rigid(pair, config.aug.max_rot_deg,
                                         config.aug.max_trans_m, aug_rng)
                if config.aug.mirror and aug_rng.random() < 0.5:
                    pair = augment_mirror(pair)
                pairs.append(pair)
            bev, cam = _batch_tensors(pairs, views)
            det_out = detector.forward(bev=bev, camera=cam)
            total, parts = _batch_losses(det_out, pairs, config.loss, views)
            if not math.isfinite(parts["loss"]):
                raise RuntimeError(
                    f"non-finite loss at step {step}: {parts}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            if step % config.train.log_interval == 0 or step == 1:
                record = {"kind": "train", "step": step,
                          "lr": optimizer.current_lr(), **parts}
                emit(record)
                log(f"step {step}: loss {parts['loss']:.4f}")
            if config.train.eval_interval and step % config.train.eval_interval == 0 \
                    and step < config.train.steps:
                summary = evaluate(detector, config, val_cache,
                                   limit=config.data.eval_scenes)
                emit({"kind": "eval", "step": step, "split": "val", **summary})
                log(f"step {step}: val {summary}")

        summary, ap_rows = evaluate(detector, config, val_cache,
                                    limit=config.data.eval_scenes,
                                    return_table=True)
        emit({"kind": "eval", "step": config.train.steps, "split": "val",
              **summary})
        for row in ap_rows:
            emit({"kind": "ap", "split": "val", **row})
        log(f"final: val {summary}")

    ckpt = Checkpoint(step=config.train.steps, config_text=format_config(config),
                      params={k: v.data for k, v in detector.named_parameters()},
                      opt_m={k: m for (k, _), m in
                             zip(detector.named_parameters(), optimizer.state.m)},
                      opt_v={k: v_ for (k, _), v_ in
                             zip(detector.named_parameters(), optimizer.state.v)})
    ckpt_path = os.path.join(out_dir, "final.lfck")
    save_checkpoint(ckpt, ckpt_path)
    return TrainResult(checkpoint_path=ckpt_path, final_metrics=summary,
                       history=history)


def _decode_frame(det_out, i, config: RunConfig, view):
    if view == "bev":
        head_out, geom = det_out.bev, BEV_HEAD_GEOMETRY
    else:
        head_out, geom = det_out.camera, CAMERA_HEAD_GEOMETRY
    sliced = HeadOutput(
        heatmap=Tensor(head_out.heatmap.data[i]),
        box=Tensor(head_out.box.data[i]),
        yaw_class=Tensor(head_out.yaw_class.data[i]) if head_out.yaw_class is not None else None,
        yaw_offset=Tensor(head_out.yaw_offset.data[i]) if head_out.yaw_offset is not None else None,
    )
    return decode_detections(sliced, geom, threshold=config.decode.threshold,
                             top_k=config.decode.top_k)


def evaluate(detector, config: RunConfig, cache: SceneCache, limit=None,
             rot_deg=0.0, trans_m=0.0, perturb_seed=7, return_table=False,
             focus_scenes=64):
    """Detection metrics (and focus ratio for fusion models) over a split."""
    views = detector.config.active_views()
    n = len(cache) if limit is None else min(limit, len(cache))
    bev_frames = []
    frames_2d = []
    focus_ratios = []
    batch = config.train.batch_size
    for start in range(0, n, batch):
        idx = list(range(start, min(start + batch, n)))
        pairs = []
        for i in idx:
            pair = cache.pair(i)
            if rot_deg > 0 or trans_m > 0:
                rng = np.random.default_rng([config.seed, perturb_seed,
                                             cache.seeds[i]])
                pair = augment_rigid(pair, rot_deg, trans_m, rng)
            pairs.append(pair)
        bev, cam = _batch_tensors(pairs, views)
        det_out = detector.forward(bev=bev, camera=cam)
        for j, i in enumerate(idx):
            pair = pairs[j]
            if "bev" in views:
                dets = _decode_frame(det_out, j, config, "bev")
                bev_frames.append((dets, bev_ground_truth(pair.bev_annotations)))
            if "camera" in views:
                dets = _decode_frame(det_out, j, config, "2d")
                frames_2d.append((dets, camera_ground_truth(pair.boxes_2d)))
            if len(views) == 2 and i < focus_scenes:
                records = extract_attention_records(det_out.model_output, example=j)
                for score in attention_focus(records, cache.scene(i)):
                    focus_ratios.append(score.ratio)

    summary = {}
    ap_rows = []
    if bev_frames:
        table, mean_yaw = ap_table_bev(bev_frames)
        summary["bev_map"] = map_score(table)
        summary["mean_yaw_err"] = mean_yaw
        ap_rows += [{"category": c, "threshold": t, "ap": ap}
                    for (c, t), ap in table.items()]
    if frames_2d:
        table2 = ap_table_2d(frames_2d)
        summary["map_2d"] = map_score(table2)
        ap_rows += [{"category": c, "threshold": t, "ap": ap}
                    for (c, t), ap in table2.items()]
    if focus_ratios:
        summary["focus_ratio_mean"] = float(np.mean(focus_ratios))
    if return_table:
        return summary, ap_rows
    return summary


def detector_from_checkpoint(ckpt: Checkpoint):
    config = parse_config(ckpt.config_text)
    detector = build_detector(config)
    detector.load_state(ckpt.params)
    return detector, config


def run_eval(checkpoint_path, split="val", rot_deg=0.0, trans_m=0.0,
             out_path=None, limit=None):
    """Evaluate a stored checkpoint, optionally with test-time perturbation."""
    ckpt = load_checkpoint(checkpoint_path)
    detector, config = detector_from_checkpoint(ckpt)
    size = {"train": config.data.train_scenes, "val": config.data.val_scenes,
            "test": config.data.test_scenes}[split]
    cache = SceneCache(config, split, size)
    summary, ap_rows = evaluate(detector, config, cache, limit=limit,
                                rot_deg=rot_deg, trans_m=trans_m,
                                return_table=True)
    lines = [{"kind": "eval", "split": split, "rot_deg": rot_deg,
              "trans_m": trans_m, **summary}]
    lines += [{"kind": "ap", "split": split, **row} for row in ap_rows]
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(json.dumps(line) + "\n")
    return summary, lines


ABLATION_AXES = {
    "fusion_stages": [(4,), (3, 4), (2, 3, 4), (1, 2, 3, 4)],
    "task_weights": [(0.2, 0.8), (0.5, 0.5), (0.8, 0.2), (0.9, 0.1),
                     (0.95, 0.05), (0.99, 0.01), (1.0, 0.0)],
    "loss_weights": [  # (w_fg, w_bg, w_heat, w_theta)
        (0.80, 0.20, 10.0, 0.2),
        (0.90, 0.10, 2.0, 0.2),
        (0.90, 0.10, 10.0, 0.2),
        (0.90, 0.10, 10.0, 1.0),
        (0.90, 0.10, 20.0, 0.2),
        (0.90, 0.10, 50.0, 0.2),
        (0.95, 0.05, 10.0, 0.2),
    ],
    "robustness": [  # (rot_deg, trans_m, mirror)
        (0.0, 0.0, False),
        (0.0, 0.0, True),
        (0.0, 0.5, True),
        (15.0, 0.5, True),
        (15.0, 5.5, True),
    ],
}


def ablation_config(base: RunConfig, axis, row) -> RunConfig:
    text = format_config(base)
    config = parse_config(text)           # deep copy through the text format
    if axis == "fusion_stages":
        config.model.fusion_stages = tuple(row)
    elif axis == "task_weights":
        config.loss.w_bev, config.loss.w_2d = row
    elif axis == "loss_weights":
        config.loss.w_fg, config.loss.w_bg, config.loss.w_heat, \
            config.loss.w_theta = row
    elif axis == "robustness":
        config.aug.max_rot_deg, config.aug.max_trans_m, config.aug.mirror = row
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return config


def run_ablation(base: RunConfig, axis, num_seeds=3, out_dir=None, log=print):
    """Train/eval every row of the axis over ``num_seeds`` seeds.

    Emits a CSV (axis,row,seed,bev_map,map_2d) and returns per-row summaries
    with mean and standard deviation of both mAP numbers.
    """
    rows = ABLATION_AXES[axis]
    out_dir = out_dir or base.out_dir
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"ablation_{axis}.csv")
    results = []
    with open(csv_path, "w", encoding="utf-8") as csv_fh:
        csv_fh.write("axis,row,seed,bev_map,map_2d\n")
        for row in rows:
            row_label = "/".join(str(v) for v in row)
            per_seed = []
            for s in range(num_seeds):
                config = ablation_config(base, axis, row)
                config.seed = base.seed + s
                config.out_dir = os.path.join(
                    out_dir, f"{axis}_{row_label.replace('/', '_')}_s{s}")
                result = run_train(config, log=lambda *_: None)
                if axis == "robustness":
                    # Table-4 protocol: the same perturbation at test time
                    summary, _ = run_eval(result.checkpoint_path, "val",
                                          rot_deg=row[0], trans_m=row[1],
                                          limit=config.data.eval_scenes)
                else:
                    summary = result.final_metrics
                bev_map = summary.get("bev_map", float("nan"))
                map_2d = summary.get("map_2d", float("nan"))
                per_seed.append((bev_map, map_2d))
                csv_fh.write(f"{axis},{row_label},{config.seed},"
                             f"{bev_map:.4f},{map_2d:.4f}\n")
                log(f"{axis} row {row_label} seed {config.seed}: "
                    f"bev {bev_map:.2f}, 2d {map_2d:.2f}")
            bev_vals = [v[0] for v in per_seed]
            map2_vals = [v[1] for v in per_seed]
            results.append({
                "row": row_label,
                "bev_map_mean": float(np.mean(bev_vals)),
                "bev_map_std": float(np.std(bev_vals)),
                "map_2d_mean": float(np.mean(map2_vals)),
                "map_2d_std": float(np.std(map2_vals)),
            })
    return results
