"""Per-token nugget scorer.

Features come from a frozen copy of the first ``score_layer`` blocks of the
initial decoder stack, run with a causal window of ``feature_window`` tokens.
The scorer itself is a two-layer feedforward head (hidden width d) applied to
the layer-normalised feature of each position independently.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ConfigError, ModelConfig
from .model import LayerStates, Memory, ParamSet, run_stack


def init_scorer(config: ModelConfig, rng: np.random.Generator) -> ParamSet:
    d = config.d_model
    t = {
        "w1": rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)),
        "b1": np.zeros(d),
        "w2": rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, 1)),
        "b2": np.zeros(1),
    }
    return ParamSet("scorer", {k: Tensor(v, requires_grad=True, name=k) for k, v in t.items()})


def make_feature_stack(decoder: ParamSet, config: ModelConfig) -> ParamSet:
    """Frozen copy of the embeddings and first ``score_layer`` blocks of ``decoder``."""
    keep = {"tok_emb", "pos_emb"}
    for i in range(config.score_layer):
        keep.update(k for k in decoder.tensors if k.startswith(f"blocks.{i}."))
    return ParamSet("features", {k: Tensor(decoder[k].data.copy(), name=k) for k in sorted(keep)})


def feature_states(features: ParamSet, config: ModelConfig, tokens, start_pos: int = 0, memory: Optional[Memory] = None) -> LayerStates:
    """Frozen-stack states; ``layers[score_layer]`` is the scorer input.

    Without ``memory`` every position attends to at most ``feature_window``
    tokens (itself included); with ``memory`` the caller supplies that window.
    """
    with ad.no_grad():
        band = None if memory is not None else config.feature_window
        states, _ = run_stack(features, config, tokens, start_pos=start_pos, memory=memory,
                              n_blocks=config.score_layer, band=band, head=False)
    return LayerStates(states.layers + [states.final], states.positions, states.final)


def score(scorer: ParamSet, states: LayerStates, config: ModelConfig) -> Tensor:
    """Scalar score per position from layer ``score_layer`` of ``states``; shape (B, T)."""
    if not 1 <= config.score_layer < config.n_layers:
        raise ConfigError(f"score_layer {config.score_layer} outside [1, {config.n_layers})")
    if len(states.layers) <= config.score_layer:
        raise ConfigError(f"states hold {len(states.layers)} layers, scorer needs layer {config.score_layer}")
    return score_features(scorer, states.layers[config.score_layer])


def score_features(scorer: ParamSet, f) -> Tensor:
    """Scores from raw layer features (..., d); the input never receives gradient."""
    f = Tensor(np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64))
    d = f.shape[-1]
    f = ad.layer_norm(f, Tensor(np.ones(d)), Tensor(np.zeros(d)))
    h = ad.gelu(ad.linear(f, scorer["w1"], scorer["b1"]))
    s = ad.linear(h, scorer["w2"], scorer["b2"])
    return ad.reshape(s, s.shape[:-1])


def feature_input(features: ParamSet, config: ModelConfig, tokens) -> np.ndarray:
    """Layer ``score_layer`` features for a (B, T) batch; cacheable since the stack is frozen."""
    tokens = np.asarray(tokens, dtype=np.int64)
    return feature_states(features, config, tokens).layers[config.score_layer].data


def score_tokens(scorer: ParamSet, features: ParamSet, config: ModelConfig, tokens) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    squeeze = tokens.ndim == 1
    batch = tokens[None] if squeeze else tokens
    s = score(scorer, feature_states(features, config, batch), config)
    return ad.reshape(s, s.shape[1:]) if squeeze else s


def select_probability(s) -> np.ndarray:
    """Bernoulli selection probability sigmoid(s)."""
    x = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
