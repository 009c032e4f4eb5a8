"""Fixed-context compression: an encoder stack turns w into k nuggets, a decoder stack generates from them.

The encoder (phi) and decoder (theta) are independent parameter sets. The
decoder's sequence starts with a reserved start token (the soft prompt, the
last vocabulary id) placed right after the compressed span, so decoder
position p attends to [nuggets ; its own causal prefix].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .model import Memory, ParamSet, init_stack, run_stack
from .optim import Adam, CosineSchedule, DivergenceError, TrainSettings, clip_grad_norm
from .scorer import feature_input, init_scorer, make_feature_stack
from .selection import EmptyInputError, NuggetState, nugget_compress


@dataclass
class CompressorBundle:
    config: ModelConfig
    encoder: ParamSet
    decoder: ParamSet
    scorer: ParamSet
    features: ParamSet
    st_mode: str = "stopgrad"

    @property
    def soft_id(self) -> int:
        return self.config.vocab_size - 1

    def parameters(self) -> list:
        return self.encoder.parameters() + self.decoder.parameters() + self.scorer.parameters()


def new_bundle(config: ModelConfig, seed: int = 0, st_mode: str = "stopgrad") -> CompressorBundle:
    """Fresh bundle; the encoder starts as an independent copy of the decoder."""
    rng = np.random.default_rng(seed)
    decoder = init_stack(config, rng, "decoder")
    encoder = decoder.clone("encoder")
    scorer = init_scorer(config, rng)
    return CompressorBundle(config, encoder, decoder, scorer, make_feature_stack(decoder, config), st_mode)


def _batch(tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    return tokens[None] if tokens.ndim == 1 else tokens


def encode(bundle: CompressorBundle, w, r: Optional[float] = None, features_cache=None) -> NuggetState:
    """TopK compression of w with the encoder stack: k = ceil(n / r), last token forced."""
    w = _batch(w)
    if w.shape[1] < 1:
        raise EmptyInputError("cannot encode an empty sequence")
    return nugget_compress(bundle.encoder, bundle.scorer, bundle.features, bundle.config, w,
                           mode="topk", ratio=bundle.config.ratio if r is None else r,
                           features_cache=features_cache)


def decode_conditional(bundle: CompressorBundle, nuggets: Memory, y, start_pos: Optional[int] = None, trace=None) -> Tensor:
    """Decoder logits (B, m, V) for inputs y attending to the nuggets at every block."""
    y = _batch(y)
    if start_pos is None:
        start_pos = getattr(nuggets, "source_length", 0) or int(nuggets.positions.max()) + 1
    _, logits = run_stack(bundle.decoder, bundle.config, y, start_pos=start_pos, memory=nuggets,
                          st_mode=bundle.st_mode, trace=trace)
    return logits


def decoder_inputs(bundle: CompressorBundle, y) -> np.ndarray:
    """[start, y_1 .. y_{m-1}] for targets y_1 .. y_m."""
    y = _batch(y)
    start = np.full((y.shape[0], 1), bundle.soft_id, dtype=np.int64)
    return np.concatenate([start, y[:, :-1]], axis=1)


def pair_loss(bundle: CompressorBundle, w, y, r: Optional[float] = None, features_cache=None) -> Tensor:
    """Mean NLL of y given the nuggets of w."""
    w, y = _batch(w), _batch(y)
    nug = encode(bundle, w, r, features_cache)
    logits = decode_conditional(bundle, nug, decoder_inputs(bundle, y), start_pos=w.shape[1])
    return ad.cross_entropy(logits, y)


def autoencode_loss(bundle: CompressorBundle, w, r: Optional[float] = None, features_cache=None) -> Tensor:
    """Reconstruction loss: decode [soft, w_1 .. w_{n-1}] against targets w_1 .. w_n."""
    w = _batch(w)
    if w.shape[1] < 2:
        raise ValueError("autoencoding needs at least 2 tokens")
    return pair_loss(bundle, w, w, r, features_cache)


def greedy_generate(bundle: CompressorBundle, nuggets: Memory, start_pos: int, length: int) -> np.ndarray:
    """Greedy decoding of ``length`` tokens after the start token; returns (B, length)."""
    B = nuggets.batch
    seq = np.full((B, 1), bundle.soft_id, dtype=np.int64)
    with ad.no_grad():
        for _ in range(length):
            logits = decode_conditional(bundle, nuggets, seq, start_pos=start_pos).data
            seq = np.concatenate([seq, logits[:, -1].argmax(-1)[:, None]], axis=1)
    return seq[:, 1:]


def reconstruct(bundle: CompressorBundle, w, r: Optional[float] = None) -> np.ndarray:
    w = _batch(w)
    with ad.no_grad():
        nug = encode(bundle, w, r)
    return greedy_generate(bundle, nug, w.shape[1], w.shape[1])


def reconstruct_all(bundle: CompressorBundle, docs: Sequence[np.ndarray], r: Optional[float] = None, batch_size: int = 64) -> List[np.ndarray]:
    """Reconstruct every document, batching documents of equal length."""
    out: List[Optional[np.ndarray]] = [None] * len(docs)
    for idx in bucket_indices([len(d) for d in docs], batch_size):
        rec = reconstruct(bundle, np.stack([docs[i] for i in idx]), r)
        for i, row in zip(idx, rec):
            out[i] = row
    return out


def bucket_indices(lengths: Sequence, batch_size: int) -> List[List[int]]:
    """Group indices by equal length key, chunked to ``batch_size``, in first-seen order."""
    groups: dict = {}
    for i, n in enumerate(lengths):
        groups.setdefault(n, []).append(i)
    out = []
    for idx in groups.values():
        out.extend(idx[j: j + batch_size] for j in range(0, len(idx), batch_size))
    return out


def split_continuation(doc: np.ndarray, max_context: int = 64, max_target: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    """Split a document into (context, continuation) for continuation pretraining."""
    doc = np.asarray(doc, dtype=np.int64)
    if doc.size < 2:
        raise ValueError("document too short to split")
    m = min(max_target, max(1, doc.size // 4))
    n = min(max_context, doc.size - m)
    return doc[doc.size - m - n: doc.size - m], doc[doc.size - m:]


def train_compressor(
    bundle: CompressorBundle,
    pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
    settings: TrainSettings,
    r: Optional[float] = None,
    on_epoch: Optional[Callable[[int, CompressorBundle], None]] = None,
    on_step: Optional[Callable[[int, float], Optional[bool]]] = None,
) -> List[float]:
    """Maximise log p(y | nuggets(w)) over the pairs with Adam and a cosine schedule.

    Batches draw pairs with equal (|w|, |y|). ``on_epoch`` is called after each
    pass-worth of steps (checkpointing hook); ``on_step`` returning True stops
    training. A non-finite loss raises DivergenceError. Returns losses.
    """
    if not pairs:
        raise ValueError("empty training corpus")
    w_all = [np.asarray(w, dtype=np.int64) for w, _ in pairs]
    y_all = [np.asarray(y, dtype=np.int64) for _, y in pairs]
    keys = [(len(w), len(y)) for w, y in zip(w_all, y_all)]
    groups: dict = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    group_list = list(groups.values())
    weights = np.array([len(g) for g in group_list], dtype=np.float64)
    weights /= weights.sum()
    with ad.no_grad():
        feats = [feature_input(bundle.features, bundle.config, np.stack([w_all[i] for i in g])) for g in group_list]
    params = bundle.parameters()
    opt = Adam(params, lr=settings.lr)
    sched = CosineSchedule(settings.lr, settings.warmup, settings.steps, settings.min_lr_frac)
    rng = np.random.default_rng(settings.seed)
    steps_per_epoch = max(1, math.ceil(len(pairs) / settings.batch_size))
    history = []
    for step in range(settings.steps):
        gi = int(rng.choice(len(group_list), p=weights))
        g = group_list[gi]
        pick = rng.choice(len(g), size=min(settings.batch_size, len(g)), replace=False)
        w = np.stack([w_all[g[j]] for j in pick])
        y = np.stack([y_all[g[j]] for j in pick])
        opt.zero_grad()
        loss = pair_loss(bundle, w, y, r, feats[gi][pick])
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {step}")
        loss.backward()
        clip_grad_norm(params, settings.clip)
        opt.step(sched(step))
        history.append(value)
        stop = on_step is not None and on_step(step, value)
        if on_epoch is not None and ((step + 1) % steps_per_epoch == 0 or stop or step + 1 == settings.steps):
            on_epoch((step + 1) // steps_per_epoch, bundle)
        if stop:
            break
    return history
