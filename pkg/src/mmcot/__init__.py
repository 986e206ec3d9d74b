"""mmcot: desk-scale interleaved text+image token modeling on a synthetic
shapes world - exact oracles, composite training loss, grammar-constrained
decoding with multi-condition guidance, and directional experiments."""

from .codec import Codebook, VisualTokenBlock, decode_tokens, encode_image
from .model import ModelConfig, TinyMultimodalLM, load_checkpoint, save_checkpoint
from .sampler import CfgScales, PRESETS, SampleParams, generate_trace
from .traces import ThoughtTrace, assemble_trace, parse_sequence
from .vocab import UnifiedVocab, default_vocab
from .world import (
    GenevalCategory,
    ImageGrid,
    ObjectSpec,
    SceneSpec,
    describe_scene,
    detect_objects,
    render_scene,
    score_geneval,
)

__version__ = "0.1.0"

__all__ = [
    "Codebook", "VisualTokenBlock", "decode_tokens", "encode_image",
    "ModelConfig", "TinyMultimodalLM", "load_checkpoint", "save_checkpoint",
    "CfgScales", "PRESETS", "SampleParams", "generate_trace",
    "ThoughtTrace", "assemble_trace", "parse_sequence",
    "UnifiedVocab", "default_vocab",
    "GenevalCategory", "ImageGrid", "ObjectSpec", "SceneSpec",
    "describe_scene", "detect_objects", "render_scene", "score_geneval",
    "__version__",
]
