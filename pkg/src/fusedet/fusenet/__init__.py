"""Two-branch fusion architecture: encoders, attention fusion, decoders."""

from .attention import AttentionRecord, MultiHeadAttention, TransformerLayer, attention
from .model import (
    MODALITIES,
    VIEW_ORDER,
    EncoderStage,
    FusionBlock,
    FusionConfig,
    FusionModel,
    ModelOutput,
    UpsampleMerge,
    attention_cost,
    extract_attention_records,
)
from .nn import Conv2d, LayerNorm, Linear, Module, ModuleList

__all__ = [
    "attention", "AttentionRecord", "MultiHeadAttention", "TransformerLayer",
    "FusionConfig", "FusionModel", "FusionBlock", "EncoderStage",
    "UpsampleMerge", "ModelOutput", "attention_cost", "extract_attention_records",
    "Module", "ModuleList", "Conv2d", "Linear", "LayerNorm",
    "VIEW_ORDER", "MODALITIES",
]
