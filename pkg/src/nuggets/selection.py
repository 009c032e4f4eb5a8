"""Deterministic nugget selection and the compression operator.

Two rules turn scores into a selection:

* ``select_topk`` for fully observed inputs: k = ceil(n / r), the last token
  is always kept and the remaining k - 1 slots go to the highest scores
  among the first n - 1 positions (ties favour the smaller index).
* ``select_threshold`` for streams: keep i iff s_i > threshold. The decision
  for position i never looks at later tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .model import LayerStates, Memory, ParamSet, run_stack
from .scorer import feature_input, score_features


class EmptyInputError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


MIN_CALIBRATION_TOKENS = 100


@dataclass
class Selection:
    indices: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.indices.size > 1 and np.any(np.diff(self.indices) <= 0):
            raise ValueError("selection indices must be strictly increasing")

    @property
    def k(self) -> int:
        return int(self.indices.size)

    def as_set(self) -> set:
        return set(int(i) for i in self.indices)


@dataclass
class NuggetState(Memory):
    """Memory built from selected tokens; ``layers[l][b, j]`` is a copy of the source state."""

    selections: list = field(default_factory=list)
    source_length: int = 0


def _as_scores(s) -> np.ndarray:
    return np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64).reshape(-1)


def topk_count(n: int, r: float) -> int:
    return max(1, math.ceil(n / r))


def select_topk(s, r: float, n: Optional[int] = None) -> Selection:
    scores = _as_scores(s)
    n = scores.size if n is None else n
    if n != scores.size:
        raise ValueError(f"length {n} does not match {scores.size} scores")
    if n == 0:
        raise EmptyInputError("cannot select from an empty sequence")
    if r < 1:
        raise ValueError(f"ratio must be >= 1, got {r}")
    k = topk_count(n, r)
    head = np.argsort(-scores[: n - 1], kind="stable")[: k - 1]
    idx = np.sort(np.concatenate([head, [n - 1]]))
    return Selection(idx, scores[idx])


def select_threshold(s, threshold: float) -> Selection:
    scores = _as_scores(s)
    idx = np.flatnonzero(scores > threshold)
    return Selection(idx, scores[idx])


def threshold_for_ratio(scores, r: float) -> float:
    """Cutoff whose strict exceedance rate over ``scores`` is about 1/r."""
    pooled = _as_scores(scores)
    if pooled.size < MIN_CALIBRATION_TOKENS:
        raise CalibrationError(f"calibration needs >= {MIN_CALIBRATION_TOKENS} tokens, got {pooled.size}")
    if r < 1:
        raise CalibrationError(f"ratio must be >= 1, got {r}")
    if r == 1:
        return float(np.nextafter(pooled.min(), -np.inf))
    return float(np.quantile(pooled, 1.0 - 1.0 / r))


def calibrate_threshold(score_fn: Callable, sample: Iterable, r: float) -> float:
    """Pool ``score_fn(tokens)`` over the sample and match the selected fraction to 1/r."""
    pooled = [_as_scores(score_fn(np.asarray(doc))) for doc in sample]
    if not pooled:
        raise CalibrationError("empty calibration sample")
    return threshold_for_ratio(np.concatenate(pooled), r)


def gather_nuggets(states: LayerStates, scores: Optional[Tensor], selections: Sequence[Selection], start: int = 0) -> NuggetState:
    """Copy per-layer states of the selected positions; rows are right-padded and masked.

    ``start`` is the absolute position of column 0 of ``states``.
    """
    B = states.layers[0].shape[0]
    kmax = max((sel.k for sel in selections), default=0)
    idx = np.zeros((B, kmax), dtype=np.int64)
    mask = np.zeros((B, kmax), dtype=bool)
    for b, sel in enumerate(selections):
        idx[b, : sel.k] = sel.indices
        mask[b, : sel.k] = True
    layers = [ad.gather(x, idx) for x in states.layers]
    sc = ad.gather(scores, idx) if scores is not None else None
    positions = np.where(mask, idx + start, -1)
    T = states.layers[0].shape[1]
    return NuggetState(layers, positions, None if mask.all() else mask, sc, list(selections), start + T)


def nugget_compress(
    encoder: ParamSet,
    scorer: ParamSet,
    features: ParamSet,
    config: ModelConfig,
    tokens,
    mode: str = "topk",
    ratio: Optional[float] = None,
    threshold: Optional[float] = None,
    features_cache: Optional[np.ndarray] = None,
    st_mode: str = "stopgrad",
) -> NuggetState:
    """Encode tokens with ``encoder``, score them, select per ``mode`` and keep the selected states.

    ``mode`` is ``"topk"`` (k = ceil(n / ratio), last token forced) or
    ``"threshold"`` (s_i > threshold). ``features_cache`` holds precomputed
    scorer features for ``tokens`` (the feature stack is frozen).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.shape[1] == 0:
        raise EmptyInputError("cannot compress an empty sequence")
    states, _ = run_stack(encoder, config, tokens, head=False, st_mode=st_mode)
    f = feature_input(features, config, tokens) if features_cache is None else features_cache
    s = score_features(scorer, f)
    if mode == "topk":
        r = config.ratio if ratio is None else ratio
        sels = [select_topk(row, r) for row in s.data]
    elif mode == "threshold":
        lam = config.threshold if threshold is None else threshold
        sels = [select_threshold(row, lam) for row in s.data]
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return gather_nuggets(states, s, sels)
