"""Run configuration with a flat ``key = value`` text format.

Dotted keys address nested sections (``loss.w_heat = 10``); ``#`` starts a
comment.  Serialization round-trips exactly: ``parse(format(cfg)) == cfg``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .fusenet import FusionConfig
from .losses import LossWeights


@dataclass
class ModelSection:
    modality: str = "fusion"
    fusion_stages: tuple = (3, 4)
    pool_size: int = 8
    d_model: int = 64
    num_heads: int = 4
    num_layers_per_fusion: int = 2
    positional_embedding: bool = True
    stage_channels: tuple = (16, 32, 64, 64)
    decoder_channels: tuple = (64, 48, 32)
    head_mid_channels: int = 32


@dataclass
class OptimSection:
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.99996


@dataclass
class AugSection:
    mirror: bool = True
    max_rot_deg: float = 0.0
    max_trans_m: float = 0.0


@dataclass
class DataSection:
    train_scenes: int = 2000
    val_scenes: int = 500
    test_scenes: int = 500
    min_objects: int = 1
    max_objects: int = 8
    eval_scenes: int = 128        # val subset used for mid-training evals


@dataclass
class TrainSection:
    steps: int = 5000
    batch_size: int = 8
    eval_interval: int = 1000
    log_interval: int = 50


@dataclass
class DecodeSection:
    threshold: float = 0.3
    top_k: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimSection = field(default_factory=OptimSection)
    aug: AugSection = field(default_factory=AugSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)

    def fusion_config(self) -> FusionConfig:
        m = self.model
        return FusionConfig(
            modality=m.modality,
            fusion_stages=tuple(m.fusion_stages),
            pool_size=m.pool_size,
            d_model=m.d_model,
            num_heads=m.num_heads,
            num_layers_per_fusion=m.num_layers_per_fusion,
            positional_embedding=m.positional_embedding,
            stage_channels=tuple(m.stage_channels),
            decoder_channels=tuple(m.decoder_channels),
        )

    def replace(self, **kwargs):
        return dataclasses.replace(self, **kwargs)


_SECTIONS = ("model", "loss", "optim", "aug", "data", "train", "decode")


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text, template):
    text = text.strip()
    if isinstance(template, bool):
        if text not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text == "true"
    if isinstance(template, tuple):
        if not text:
            return ()
        return tuple(int(v) for v in text.split(","))
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text


def format_config(config: RunConfig) -> str:
    lines = [f"seed = {config.seed}", f"out_dir = {config.out_dir}"]
    for section in _SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    config = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ValueError(f"line {lineno}: unknown section {section!r}")
            obj = getattr(config, section)
            if not hasattr(obj, name):
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            setattr(obj, name, _parse_value(value, getattr(obj, name)))
        elif key == "seed":
            config.seed = int(value)
        elif key == "out_dir":
            config.out_dir = value.strip()
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return config


def save_config(config: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(config))


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
