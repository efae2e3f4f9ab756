"""Attention-map export as binary PGM images."""

from __future__ import annotations

import os

import numpy as np

from .checkpoint import load_checkpoint
from .diffcore import Tensor, ops
from .scenesynth import BEV_CELLS, CAMERA_SHAPE
from .trainer import SceneCache, detector_from_checkpoint


def write_pgm(path, image):
    """8-bit binary PGM (P5).  ``image`` is a 2-D float array, any range."""
    arr = np.asarray(image, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        scaled = (arr - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(arr)       # degenerate range renders as black
    data = scaled.round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ValueError(f"{path} is not a binary PGM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w)
    return data, maxval


def _stage_mean_attention(det_out, stage):
    """Head- and layer-averaged attention matrix (T, T) of one stage."""
    weights = det_out.model_output.attention[stage]
    stacked = np.stack([w.data[0] for w in weights])   # (layers, heads, T, T)
    return stacked.mean(axis=(0, 1))


def viz_attention(checkpoint_path, scene_index, query_cells, out_dir,
                  split="val"):
    """Write full attention matrices per fusion stage plus per-query maps.

    ``query_cells`` is a list of (iy, ix) BEV grid cells; each produces one
    image per stage showing the cross-view attention over the camera view.
    Returns the list of written paths.
    """
    ckpt = load_checkpoint(checkpoint_path)
    detector, config = detector_from_checkpoint(ckpt)
    cache = SceneCache(config, split, max(scene_index + 1, 1))
    pair = cache.pair(scene_index)
    det_out = detector.forward_pair(pair)

    os.makedirs(out_dir, exist_ok=True)
    written = []
    for stage in sorted(det_out.model_output.attention):
        mean_attn = _stage_mean_attention(det_out, stage)
        path = os.path.join(out_dir, f"attn_stage{stage}_full.pgm")
        write_pgm(path, mean_attn)
        written.append(path)

        ranges = det_out.model_output.token_ranges[stage]
        bev_start, bev_end = ranges["bev"]
        cam_start, cam_end = ranges["camera"]
        pool = int(round(np.sqrt(bev_end - bev_start)))
        block = BEV_CELLS // pool
        for iy, ix in query_cells:
            if not (0 <= iy < BEV_CELLS and 0 <= ix < BEV_CELLS):
                raise ValueError(f"query cell ({iy}, {ix}) outside the BEV grid")
            query = bev_start + (iy // block) * pool + ix // block
            row = mean_attn[query, cam_start:cam_end].reshape(pool, pool)
            up = ops.upsample2d_bilinear(
                Tensor(row[None, :, :, None].astype(np.float32)),
                (CAMERA_SHAPE[0] // pool, CAMERA_SHAPE[1] // pool))
            path = os.path.join(out_dir,
                                f"attn_stage{stage}_query_y{iy}_x{ix}.pgm")
            write_pgm(path, up.data[0, :, :, 0])
            written.append(path)
    return written
