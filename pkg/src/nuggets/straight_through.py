"""Score-to-attention gradient path.

Attention logits towards a nugget are augmented with ``s - stop_grad(s)``:
the added term is exactly zero in the forward pass while the backward pass
hands every logit gradient to the nugget's score, so that

    dl/ds_i = sum over layers, heads and queries of dl/dxi_i.

``mode="additive"`` adds the raw score instead (forward changes), and
``mode="off"`` disables the path.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

MODES = ("stopgrad", "additive", "off")


def score_delta(scores: Tensor, mode: str = "stopgrad") -> Tensor:
    if mode == "stopgrad":
        return ad.sub(scores, ad.stop_grad(scores))
    if mode == "additive":
        return scores
    raise ValueError(f"unknown straight-through mode {mode!r}")


def attach_scores(logits: Tensor, scores: Tensor, mode: str = "stopgrad") -> Tensor:
    """Augment (B, H, Tq, Tk) logits with (B, K) scores on the first K key columns."""
    if mode not in MODES:
        raise ValueError(f"unknown straight-through mode {mode!r}")
    if logits.ndim != 4 or scores.ndim != 2 or scores.shape[0] != logits.shape[0] or scores.shape[1] > logits.shape[-1]:
        raise DimensionError(f"attach_scores: scores {scores.shape} do not align with logits {logits.shape}")
    if mode == "off":
        return logits
    if mode == "stopgrad" and not (scores.requires_grad and ad.is_grad_enabled()):
        # the delta is identically zero and carries no gradient
        return logits
    B, _, _, Tk = logits.shape
    K = scores.shape[1]
    delta = score_delta(scores, mode)
    if K < Tk:
        delta = ad.concat([delta, Tensor(np.zeros((B, Tk - K)))], axis=1)
    delta = ad.broadcast_to(ad.reshape(delta, (B, 1, 1, Tk)), logits.shape)
    return ad.add(logits, delta)
