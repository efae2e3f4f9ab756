"""Two-branch encoder with calibration-free transformer fusion.

Each branch runs a stack of residual downsampling stages.  After configured
stages, both views are pooled to a square token grid, concatenated, run
through transformer encoder layers, split back, upsampled and added to the
branch features.  No projection between views exists anywhere: the only
cross-view pathway is attention over the concatenated token sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..diffcore import ShapeError, Tensor, ops
from .attention import AttentionRecord, TransformerLayer
from .nn import Conv2d, Linear, Module, ModuleList

VIEW_ORDER = ("bev", "camera")

MODALITIES = ("fusion", "lidar_only", "camera_only")


@dataclass(frozen=True)
class FusionConfig:
    modality: str = "fusion"
    fusion_stages: tuple = (3, 4)
    pool_size: int = 8
    d_model: int = 64
    num_heads: int = 4
    num_layers_per_fusion: int = 2
    positional_embedding: bool = True
    stage_channels: tuple = (16, 32, 64, 64)
    decoder_channels: tuple = (64, 48, 32)

    @property
    def num_stages(self):
        return len(self.stage_channels)

    def validate(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality != "fusion" and self.fusion_stages:
            raise ValueError(
                f"fusion_stages must be empty for modality {self.modality!r}")
        if self.d_model % self.num_heads:
            raise ValueError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.d_model != self.stage_channels[-1]:
            raise ValueError(
                f"d_model {self.d_model} must equal the last stage channel count "
                f"{self.stage_channels[-1]}")
        if len(self.decoder_channels) != self.num_stages - 1:
            raise ValueError(
                f"need {self.num_stages - 1} decoder channel counts, "
                f"got {self.decoder_channels}")
        for s in self.fusion_stages:
            if not 1 <= s <= self.num_stages:
                raise ValueError(f"fusion stage {s} outside 1..{self.num_stages}")
            if self.stage_channels[s - 1] % self.num_heads:
                raise ValueError(
                    f"stage {s} channels {self.stage_channels[s - 1]} not divisible "
                    f"by num_heads {self.num_heads}")
        if self.pool_size < 1:
            raise ValueError(f"pool_size must be positive, got {self.pool_size}")

    def active_views(self):
        if self.modality == "fusion":
            return VIEW_ORDER
        return ("bev",) if self.modality == "lidar_only" else ("camera",)


def attention_cost(h, w, c):
    """Cost-model entry count for a single-view attention map: H^2 W^2 C."""
    if h < 1 or w < 1 or c < 1:
        raise ValueError(f"dimensions must be positive, got ({h}, {w}, {c})")
    return h * h * w * w * c


class EncoderStage(Module):
    """Residual block (two 3x3 convs + skip) followed by 2x2 downsampling."""

    def __init__(self, rng, c_in, c_out):
        super().__init__()
        self.conv1 = Conv2d(rng, c_in, c_out, kernel=3)
        self.conv2 = Conv2d(rng, c_out, c_out, kernel=3)
        self.skip = Conv2d(rng, c_in, c_out, kernel=1) if c_in != c_out else None

    def __call__(self, x):
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise ShapeError(f"encoder stage needs even spatial dims, got {x.shape}")
        h = self.conv2(ops.relu(self.conv1(x)))
        s = self.skip(x) if self.skip is not None else x
        return ops.avg_pool2d(ops.relu(ops.add(h, s)), 2)


class FusionBlock(Module):
    """pool -> flatten -> concat -> transformer -> split -> upsample -> add."""

    def __init__(self, rng, view_shapes, channels, pool_size, num_heads,
                 num_layers, positional_embedding):
        super().__init__()
        self.view_shapes = dict(view_shapes)   # tag -> (H, W)
        self.channels = channels
        self.pool_size = pool_size
        self.positional_embedding = positional_embedding
        for tag, (h, w) in self.view_shapes.items():
            if pool_size > h or pool_size > w:
                raise ShapeError(
                    f"pool size {pool_size} exceeds view {tag!r} spatial dims ({h}, {w})")
            if h % pool_size or w % pool_size:
                raise ShapeError(
                    f"view {tag!r} dims ({h}, {w}) not divisible by pool size {pool_size}")
        t_per_view = pool_size * pool_size
        self.tokens_per_view = t_per_view
        self.token_ranges = {
            tag: (i * t_per_view, (i + 1) * t_per_view)
            for i, tag in enumerate(self.view_shapes)
        }
        for tag in self.view_shapes:
            pos = rng.normal(0.0, 0.02, size=(t_per_view, channels)).astype(np.float32)
            seg = rng.normal(0.0, 0.02, size=(1, channels)).astype(np.float32)
            setattr(self, f"pos_{tag}", Tensor(pos, requires_grad=True))
            setattr(self, f"seg_{tag}", Tensor(seg, requires_grad=True))
        self.layers = ModuleList(
            TransformerLayer(rng, channels, num_heads)
            for _ in range(num_layers))
        # zero-init so the whole block starts as the identity on the views
        self.out_proj = Linear(rng, channels, channels, zero_init=True)
        self.last_attention_entries = []

    def __call__(self, views):
        """views: dict tag -> (N, H, W, C) Tensor.  Returns (views, weights)."""
        p = self.pool_size
        tokens = []
        for tag in self.view_shapes:
            x = views[tag]
            h, w = self.view_shapes[tag]
            if x.shape[1] != h or x.shape[2] != w or x.shape[3] != self.channels:
                raise ShapeError(
                    f"fusion block built for {tag!r} shape ({h}, {w}, {self.channels}), "
                    f"got {x.shape}")
            pooled = ops.avg_pool2d(x, (h // p, w // p))
            tok = ops.reshape(pooled, (x.shape[0], p * p, self.channels))
            if self.positional_embedding:
                tok = ops.add(tok, getattr(self, f"pos_{tag}"))
                tok = ops.add(tok, getattr(self, f"seg_{tag}"))
            tokens.append(tok)
        seq = ops.concat(tokens, axis=1)
        weights_per_layer = []
        self.last_attention_entries = []
        for layer in self.layers:
            seq, weights = layer(seq)
            weights_per_layer.append(weights)
            t = weights.shape[-1]
            self.last_attention_entries.extend([t * t] * weights.shape[1])
        seq = self.out_proj(seq)
        parts = ops.split(seq, [p * p] * len(self.view_shapes), axis=1)
        out = {}
        for tag, part in zip(self.view_shapes, parts):
            h, w = self.view_shapes[tag]
            grid = ops.reshape(part, (part.shape[0], p, p, self.channels))
            up = ops.upsample2d_bilinear(grid, (h // p, w // p))
            out[tag] = ops.add(views[tag], up)
        return out, weights_per_layer


class UpsampleMerge(Module):
    """Bilinear x2 on the deep map, channel-concat with the skip, 1x1 conv."""

    def __init__(self, rng, c_deep, c_skip, c_out):
        super().__init__()
        self.proj = Conv2d(rng, c_deep + c_skip, c_out, kernel=1)

    def __call__(self, deep, skip):
        if skip.shape[1] != 2 * deep.shape[1] or skip.shape[2] != 2 * deep.shape[2]:
            raise ShapeError(
                f"upsample merge: skip {skip.shape} is not twice deep {deep.shape}")
        up = ops.upsample2d_bilinear(deep, 2)
        return self.proj(ops.concat([up, skip], axis=-1))


@dataclass
class ModelOutput:
    bev_features: Tensor = None
    camera_features: Tensor = None
    attention: dict = field(default_factory=dict)      # stage -> list of (N,h,T,T)
    token_ranges: dict = field(default_factory=dict)   # stage -> {tag: (start, end)}
    stage_features: dict = field(default_factory=dict)  # (tag, stage) -> pre-fusion np

    def features(self, tag):
        return self.bev_features if tag == "bev" else self.camera_features


class FusionModel(Module):
    """Encoder branches + fusion blocks + upsampling decoders (Fig-style stack)."""

    def __init__(self, config: FusionConfig, rng,
                 bev_shape=(64, 64, 2), camera_shape=(32, 96, 3)):
        super().__init__()
        config.validate()
        self.config = config
        self.input_shapes = {"bev": bev_shape, "camera": camera_shape}
        views = config.active_views()
        chans = config.stage_channels

        for tag in views:
            c_in = self.input_shapes[tag][2]
            stages = []
            for c_out in chans:
                stages.append(EncoderStage(rng, c_in, c_out))
                c_in = c_out
            setattr(self, f"{tag}_stages", ModuleList(stages))

        # spatial dims after each stage (1-indexed by stage)
        self.stage_dims = {}
        for tag in views:
            h, w, _ = self.input_shapes[tag]
            dims = []
            for _ in chans:
                h, w = h // 2, w // 2
                dims.append((h, w))
            self.stage_dims[tag] = dims

        self.fusion_pool = {}
        blocks = {}
        for s in sorted(config.fusion_stages):
            shapes = {tag: self.stage_dims[tag][s - 1] for tag in views}
            min_dim = min(min(hw) for hw in shapes.values())
            p_eff = min(config.pool_size, min_dim)
            self.fusion_pool[s] = p_eff
            blocks[s] = FusionBlock(
                rng, shapes, chans[s - 1], p_eff, config.num_heads,
                config.num_layers_per_fusion, config.positional_embedding)
        self.fusion_blocks = ModuleList([blocks[s] for s in sorted(blocks)])
        self._fusion_by_stage = {s: b for s, b in zip(sorted(blocks), self.fusion_blocks)}

        for tag in views:
            merges = []
            c_deep = chans[-1]
            for i, c_out in enumerate(config.decoder_channels):
                c_skip = chans[len(chans) - 2 - i]
                merges.append(UpsampleMerge(rng, c_deep, c_skip, c_out))
                c_deep = c_out
            setattr(self, f"{tag}_decoder", ModuleList(merges))
        self.feature_channels = config.decoder_channels[-1]

    def output_shape(self, tag):
        h, w, _ = self.input_shapes[tag]
        return (h // 2, w // 2, self.feature_channels)

    def forward(self, bev=None, camera=None, collect_stages=False):
        config = self.config
        inputs = {"bev": bev, "camera": camera}
        views = config.active_views()
        for tag in views:
            if inputs[tag] is None:
                raise ValueError(f"modality {config.modality!r} requires {tag!r} input")
            expected = self.input_shapes[tag]
            if tuple(inputs[tag].shape[1:]) != tuple(expected):
                raise ShapeError(
                    f"{tag} input {inputs[tag].shape} does not match configured {expected}")
        for tag, x in inputs.items():
            if tag not in views and x is not None:
                raise ValueError(f"modality {config.modality!r} takes no {tag!r} input")

        out = ModelOutput()
        current = {tag: inputs[tag] for tag in views}
        skips = {tag: [] for tag in views}
        for s in range(1, config.num_stages + 1):
            for tag in views:
                current[tag] = getattr(self, f"{tag}_stages")[s - 1](current[tag])
                if collect_stages:
                    out.stage_features[(tag, s)] = current[tag].data.copy()
            if s in self._fusion_by_stage:
                block = self._fusion_by_stage[s]
                current, weights = block({tag: current[tag] for tag in views})
                out.attention[s] = weights
                out.token_ranges[s] = dict(block.token_ranges)
            for tag in views:
                skips[tag].append(current[tag])

        feats = {}
        for tag in views:
            deep = skips[tag][-1]
            decoder = getattr(self, f"{tag}_decoder")
            for i, merge in enumerate(decoder):
                deep = merge(deep, skips[tag][len(skips[tag]) - 2 - i])
            feats[tag] = deep
        out.bev_features = feats.get("bev")
        out.camera_features = feats.get("camera")
        return out


def extract_attention_records(output: ModelOutput, example=0):
    """Flatten a forward's attention weights into per-head AttentionRecords."""
    records = []
    for stage in sorted(output.attention):
        ranges = output.token_ranges[stage]
        for layer_idx, weights in enumerate(output.attention[stage]):
            w = weights.data[example]            # (heads, T, T)
            for head in range(w.shape[0]):
                records.append(AttentionRecord(
                    stage=stage, layer=layer_idx, head=head,
                    matrix=w[head].copy(), token_ranges=dict(ranges)))
    return records
