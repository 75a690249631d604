"""Masked-diffusion language modelling with variable-length block decoding."""

from .inference import DecodeConfig, GenerationResult, generate_fixed, generate_variable
from .masking import NoisedBatch, Role, apply_forward_masking, sample_noise_level
from .model import (
    DiffusionTransformer,
    ModelConfig,
    PrefixCache,
    extend_cache,
    forward_cached,
    forward_full,
    init_params,
    loss_and_gradients,
)
from .packing import DialoguePair, PackedSequence, batch_iterator, pack_samples
from .tokenizer import CharTokenizer, SpecialTokens, build_tokenizer

__version__ = "0.1.0"
