from .checkpoint import CheckpointError, load_model, read_container, save_model, write_container
from .config import ModelConfig, tiny_config
from .diagnostics import causality_check
from .layers import AlignBlock, AlignState, LearnableDecoder, LearnableEncoder, MaskHead, TemporalBlock, align_attention
from .network import PseAecModel, build_model, forward_bypass, forward_full, param_breakdown, param_count
from .streaming import StreamingSession, enhance_streaming

__all__ = [
    "AlignBlock", "AlignState", "CheckpointError", "LearnableDecoder", "LearnableEncoder", "MaskHead",
    "ModelConfig", "PseAecModel", "StreamingSession", "TemporalBlock", "align_attention", "build_model",
    "causality_check", "enhance_streaming", "forward_bypass", "forward_full", "load_model",
    "param_breakdown", "param_count", "read_container", "save_model", "tiny_config", "write_container",
]
