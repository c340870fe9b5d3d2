"""Modular multilingual encoder-decoder with per-language bottleneck adapters."""

from .freezing import CONFIG_NAMES, FreezeConfig, Phase, build_mask, config_from_name, verify_frozen
from .model import ModelConfig, Seq2SeqModel, adapter_apply, param_counts
from .synth import VocabLayout, lid, make_languages, meaning_match, render, span_corrupt

__all__ = [
    "CONFIG_NAMES", "FreezeConfig", "ModelConfig", "Phase", "Seq2SeqModel", "VocabLayout", "adapter_apply",
    "build_mask", "config_from_name", "lid", "make_languages", "meaning_match", "param_counts", "render",
    "span_corrupt", "verify_frozen",
]
