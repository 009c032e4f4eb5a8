"""Dynamic contextual compression for decoder-only transformers.

A scorer picks "nugget" tokens whose all-layer hidden states stand in for the
full context; the library covers the autodiff engine, the transformer, nugget
selection, compressor and streaming LM modes, baselines and evaluation.
"""

from .autodiff import Tensor, no_grad, stop_grad
from .compressor import CompressorBundle, autoencode_loss, decode_conditional, encode, new_bundle, train_compressor
from .config import ConfigError, ModelConfig
from .model import LayerStates, Memory, ParamSet, forward_full, forward_with_memory, init_stack
from .scorer import score, select_probability
from .selection import NuggetState, Selection, calibrate_threshold, nugget_compress, select_threshold, select_topk
from .streaming import DodoLM, StreamState, chunked_lm_loss, new_lm, step

dodo_compress = nugget_compress

__all__ = [
    "Tensor", "no_grad", "stop_grad", "ModelConfig", "ConfigError", "ParamSet", "LayerStates", "Memory",
    "init_stack", "forward_full", "forward_with_memory", "score", "select_probability", "Selection",
    "NuggetState", "select_topk", "select_threshold", "calibrate_threshold", "nugget_compress",
    "dodo_compress", "CompressorBundle", "new_bundle", "encode", "decode_conditional", "autoencode_loss",
    "train_compressor", "DodoLM", "StreamState", "new_lm", "step", "chunked_lm_loss",
]
