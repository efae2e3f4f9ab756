"""Full detector: fusion backbone plus the per-view prediction heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor
from .fusenet import FusionConfig, FusionModel, Module, extract_attention_records
from .heads import CATEGORIES, DetectionHead, GridGeometry, HeadOutput
from .scenesynth import (
    BEV_CELL_SIZE,
    BEV_CELLS,
    BEV_HALF_Y,
    BEV_SHAPE,
    CAMERA_SHAPE,
    IMAGE_H,
    IMAGE_W,
)

# head grids: half the input resolution (4 encoder halvings, 3 upsamplings)
BEV_HEAD_GEOMETRY = GridGeometry(
    rows=BEV_CELLS // 2, cols=BEV_CELLS // 2, cell_size=2 * BEV_CELL_SIZE,
    origin_y=-BEV_HALF_Y, origin_x=0.0)
CAMERA_HEAD_GEOMETRY = GridGeometry(
    rows=IMAGE_H // 2, cols=IMAGE_W // 2, cell_size=2.0)


@dataclass
class DetectorOutput:
    bev: HeadOutput = None
    camera: HeadOutput = None
    model_output: object = None

    @property
    def attention(self):
        return self.model_output.attention


class Detector(Module):
    """Backbone + heads for the modalities enabled by the fusion config."""

    def __init__(self, config: FusionConfig, rng, head_mid_channels=32,
                 num_categories=len(CATEGORIES)):
        super().__init__()
        self.config = config
        self.net = FusionModel(config, rng, bev_shape=BEV_SHAPE,
                               camera_shape=CAMERA_SHAPE)
        c = self.net.feature_channels
        if "bev" in config.active_views():
            self.bev_head = DetectionHead(rng, "bev", c, num_categories,
                                          c_mid=head_mid_channels)
        if "camera" in config.active_views():
            self.head_2d = DetectionHead(rng, "2d", c, num_categories,
                                         c_mid=head_mid_channels)

    def forward(self, bev=None, camera=None, collect_stages=False):
        net_out = self.net.forward(bev=bev, camera=camera,
                                   collect_stages=collect_stages)
        out = DetectorOutput(model_output=net_out)
        if net_out.bev_features is not None:
            out.bev = self.bev_head(net_out.bev_features)
        if net_out.camera_features is not None:
            out.camera = self.head_2d(net_out.camera_features)
        return out

    def forward_pair(self, pair, collect_stages=False):
        """Single SensorPair convenience wrapper (adds the batch axis)."""
        views = self.config.active_views()
        bev = Tensor(pair.bev[None]) if "bev" in views else None
        camera = Tensor(pair.camera[None]) if "camera" in views else None
        return self.forward(bev=bev, camera=camera, collect_stages=collect_stages)

    def attention_records(self, pair):
        out = self.forward_pair(pair)
        return extract_attention_records(out.model_output)

    def state_dict(self):
        return dict(self.named_parameters())

    def load_state(self, arrays):
        """Assign parameter values by name; shapes must match exactly."""
        own = dict(self.named_parameters())
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise ValueError(
                f"parameter name mismatch: missing {sorted(missing)[:4]}, "
                f"extra {sorted(extra)[:4]}")
        for name, param in own.items():
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != param.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs {param.data.shape}")
            param.data = arr.copy()
