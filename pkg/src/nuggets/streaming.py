"""Streaming language modelling over [nuggets ; recent window], plus the Compressive and Full baselines.

Training is segment-parallel. For the segment [a, b) every target shares the
split index ``max(0, a - tau)``: tokens before the split are compressed,
tokens from the split on are attended raw. When the split moves forward the
newly evicted block is encoded by the encoder stack, attending to the
nuggets collected so far plus its own causal prefix, and the tokens whose
score exceeds the threshold join the nugget memory with their encoder states.

``step`` replays exactly this schedule one token at a time, so streaming
and segment-parallel logits agree to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .model import LayerStates, Memory, ParamSet, init_stack, run_stack
from .optim import Adam, CosineSchedule, DivergenceError, TrainSettings, clip_grad_norm
from .scorer import feature_input, init_scorer, make_feature_stack, score_features
from .selection import gather_nuggets, select_threshold, threshold_for_ratio

KINDS = ("dodo", "compressive", "full")


@dataclass
class DodoLM:
    """A streaming LM of one of three kinds.

    ``dodo`` compresses with the encoder stack and threshold selection;
    ``compressive`` mean-pools blocks of ``pool`` decoder states;
    ``full`` attends to the most recent ``budget`` states only.
    """

    config: ModelConfig
    decoder: ParamSet
    encoder: Optional[ParamSet] = None
    scorer: Optional[ParamSet] = None
    features: Optional[ParamSet] = None
    kind: str = "dodo"
    pool: int = 4
    budget: int = 64
    st_mode: str = "stopgrad"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "dodo" and (self.encoder is None or self.scorer is None or self.features is None):
            raise ValueError("a dodo model needs encoder, scorer and feature stacks")
        if self.pool < 1 or self.budget < 1:
            raise ValueError("pool and budget must be >= 1")

    @property
    def threshold(self) -> float:
        return self.config.threshold

    def parameters(self) -> list:
        out = self.decoder.parameters()
        if self.kind == "dodo":
            out += self.encoder.parameters() + self.scorer.parameters()
        return out


def new_lm(config: ModelConfig, kind: str = "dodo", seed: int = 0, **kw) -> DodoLM:
    rng = np.random.default_rng(seed)
    decoder = init_stack(config, rng, "decoder")
    if kind != "dodo":
        return DodoLM(config, decoder, kind=kind, **kw)
    scorer = init_scorer(config, rng)
    return DodoLM(config, decoder, decoder.clone("encoder"), scorer, make_feature_stack(decoder, config), kind, **kw)


def _batch(tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    return tokens[None] if tokens.ndim == 1 else tokens


def append_memory(a: Optional[Memory], b: Optional[Memory]) -> Optional[Memory]:
    """Concatenate memories along the entry axis, scores included."""
    if a is None or a.size == 0:
        return b
    if b is None or b.size == 0:
        return a
    layers = [ad.concat([x, y], axis=1) for x, y in zip(a.layers, b.layers)]
    mask = None
    if a.mask is not None or b.mask is not None:
        mask = np.concatenate([a.valid(), b.valid()], axis=1)
    scores = None
    if a.scores is not None and b.scores is not None:
        scores = ad.concat([a.scores, b.scores], axis=1)
    elif a.scores is not None:
        scores = a.scores
    return Memory(layers, np.concatenate([a.positions, b.positions], axis=1), mask, scores)


def segment_splits(n: int, seg: int, tau: int) -> List[tuple]:
    """(start, stop, split) for every segment of an n-token sequence."""
    if seg < 1 or tau < 0:
        raise ValueError("seg must be >= 1 and tau >= 0")
    return [(a, min(a + seg, n), max(0, a - tau)) for a in range(0, n, seg)]


def mean_pool_blocks(x, seg_c: int, axis: int = -2):
    """Mean of each contiguous ``seg_c``-block along ``axis`` (last block may be short).

    Works on numpy arrays and (B, T, d) Tensors.
    """
    if seg_c < 1:
        raise ValueError("seg_c must be >= 1")
    if isinstance(x, Tensor):
        B, T, d = x.shape
        P = _pool_matrix(T, seg_c)
        y = ad.matmul(ad.transpose(x, (0, 2, 1)), Tensor(P.T))
        return ad.transpose(y, (0, 2, 1))
    x = np.asarray(x, dtype=np.float64)
    xm = np.moveaxis(x, axis, -1)
    out = xm @ _pool_matrix(xm.shape[-1], seg_c).T
    return np.moveaxis(out, -1, axis)


def _pool_matrix(T: int, seg_c: int) -> np.ndarray:
    G = math.ceil(T / seg_c)
    P = np.zeros((G, T))
    for g in range(G):
        lo, hi = g * seg_c, min(T, (g + 1) * seg_c)
        P[g, lo:hi] = 1.0 / (hi - lo)
    return P


def compressive_memory(states: LayerStates, seg_c: int, start: int = 0) -> Memory:
    """Pooled memory; each pooled entry is placed at the last position of its block."""
    T = states.layers[0].shape[1]
    B = states.layers[0].shape[0]
    layers = [mean_pool_blocks(x, seg_c) for x in states.layers]
    last = np.minimum(np.arange(seg_c - 1, T + seg_c - 1, seg_c), T - 1)[: layers[0].shape[1]] + start
    return Memory(layers, np.broadcast_to(last, (B, last.size)).copy())


def token_scores(model: DodoLM, tokens, features_cache=None) -> Tensor:
    tokens = _batch(tokens)
    f = feature_input(model.features, model.config, tokens) if features_cache is None else features_cache
    return score_features(model.scorer, f)


@dataclass
class ChunkedOutput:
    logits: Tensor
    states_per_position: np.ndarray
    compressed_per_position: np.ndarray
    selections: list = field(default_factory=list)


def _compress_block(model, tokens, Z, lo, hi, scores):
    cfg = model.config
    if model.kind == "dodo":
        st, _ = run_stack(model.encoder, cfg, tokens[:, lo:hi], start_pos=lo, memory=Z, head=False, st_mode=model.st_mode)
        sl = ad.slice_axis(scores, lo, hi, axis=1)
        sels = [select_threshold(row, cfg.threshold) for row in sl.data]
        if max(s.k for s in sels) == 0:
            return None, sels
        return gather_nuggets(st, sl, sels, start=lo), sels
    st, _ = run_stack(model.decoder, cfg, tokens[:, lo:hi], start_pos=lo, memory=Z, head=False)
    return compressive_memory(st, model.pool, lo), []


def chunked_forward(model: DodoLM, tokens, features_cache=None) -> ChunkedOutput:
    """Segment-parallel logits (B, N, V) for every position of the batch."""
    tokens = _batch(tokens)
    cfg = model.config
    B, N = tokens.shape
    if model.kind == "full":
        _, logits = run_stack(model.decoder, cfg, tokens, band=model.budget)
        cnt = np.broadcast_to(np.minimum(np.arange(N) + 1, model.budget), (B, N)).copy()
        return ChunkedOutput(logits, cnt, np.zeros((B, N), dtype=np.int64))
    scores = token_scores(model, tokens, features_cache) if model.kind == "dodo" else None
    Z: Optional[Memory] = None
    done = 0
    pieces = []
    states_cnt = np.zeros((B, N), dtype=np.int64)
    comp_cnt = np.zeros((B, N), dtype=np.int64)
    all_sels = [[] for _ in range(B)]
    for a, b, split in segment_splits(N, cfg.segment, cfg.tau):
        if split > done:
            new, sels = _compress_block(model, tokens, Z, done, split, scores)
            for r, s in enumerate(sels):
                all_sels[r].extend((s.indices + done).tolist())
            Z = append_memory(Z, new)
            done = split
        _, logits = run_stack(model.decoder, cfg, tokens[:, split:b], start_pos=split, memory=Z, st_mode=model.st_mode)
        pieces.append(ad.slice_axis(logits, a - split, b - split, axis=1))
        nz = Z.valid().sum(axis=1) if Z is not None and Z.size else np.zeros(B, dtype=np.int64)
        states_cnt[:, a:b] = nz[:, None] + (np.arange(a, b) - split + 1)[None, :]
        comp_cnt[:, a:b] = split
    logits = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=1)
    return ChunkedOutput(logits, states_cnt, comp_cnt, all_sels)


def next_token_loss(logits: Tensor, tokens, eval_from: int = 0) -> Tensor:
    """Mean NLL of tokens[:, t + 1] given logits[:, t] for t >= eval_from."""
    tokens = _batch(tokens)
    N = tokens.shape[1]
    if N < 2 or eval_from >= N - 1:
        raise ValueError("need at least one predicted position")
    return ad.cross_entropy(ad.slice_axis(logits, eval_from, N - 1, axis=1), tokens[:, eval_from + 1:])


def chunked_lm_loss(model: DodoLM, tokens, features_cache=None, eval_from: int = 0) -> Tensor:
    tokens = _batch(tokens)
    if tokens.shape[1] < 2:
        raise ValueError("need at least 2 tokens")
    return next_token_loss(chunked_forward(model, tokens, features_cache).logits, tokens, eval_from)


def plain_lm_loss(params: ParamSet, config: ModelConfig, tokens) -> Tensor:
    tokens = _batch(tokens)
    _, logits = run_stack(params, config, tokens)
    return next_token_loss(logits, tokens)


@dataclass
class StreamState:
    """Single-stream decoding state.

    ``nuggets`` holds the compressed history (all positions < ``split``);
    ``window`` holds decoder states for the raw tokens [split, position).
    """

    position: int = 0
    split: int = 0
    nuggets: Optional[Memory] = None
    window_tokens: list = field(default_factory=list)
    window: Optional[Memory] = None
    window_scores: list = field(default_factory=list)
    feature_cache: Optional[Memory] = None

    def stored_positions(self) -> int:
        n = int(self.nuggets.valid().sum()) if self.nuggets is not None and self.nuggets.size else 0
        return n + len(self.window_tokens)

    def nugget_positions(self) -> np.ndarray:
        if self.nuggets is None or self.nuggets.size == 0:
            return np.zeros(0, dtype=np.int64)
        return self.nuggets.positions[self.nuggets.valid()]


def _states_memory(states: LayerStates, layers_only: int) -> Memory:
    B, T = states.layers[0].shape[:2]
    return Memory(list(states.layers[:layers_only]), np.broadcast_to(states.positions, (B, T)).copy())


def _keep_last(mem: Optional[Memory], n: int) -> Optional[Memory]:
    if mem is None or n <= 0:
        return None
    if mem.size <= n:
        return mem
    lo = mem.size - n
    return Memory([Tensor(x.data[:, lo:]) for x in mem.layers], mem.positions[:, lo:])


def _stream_score(model: DodoLM, state: StreamState, token: int) -> float:
    cfg = model.config
    t = state.position
    st, _ = run_stack(model.features, cfg, [[token]], start_pos=t, memory=state.feature_cache,
                      n_blocks=cfg.score_layer, head=False)
    s = float(score_features(model.scorer, st.final).data[0, 0])
    state.feature_cache = _keep_last(append_memory(state.feature_cache, _states_memory(st, cfg.score_layer)), cfg.feature_window - 1)
    return s


def step(model: DodoLM, state: StreamState, token: int):
    """Consume one token; returns (next-token logits (V,), state). The state is updated in place."""
    cfg = model.config
    t = state.position
    with ad.no_grad():
        if model.kind == "full":
            st, logits = run_stack(model.decoder, cfg, [[token]], start_pos=t, memory=state.window)
            state.window = _keep_last(append_memory(state.window, _states_memory(st, cfg.n_layers)), model.budget - 1)
            state.window_tokens = (state.window_tokens + [token])[-(model.budget - 1):] if model.budget > 1 else []
            state.position += 1
            return logits.data[0, 0], state
        if model.kind == "dodo":
            state.window_scores.append(_stream_score(model, state, token))
        if t > 0 and t % cfg.segment == 0:
            new_split = max(0, t - cfg.tau)
            if new_split > state.split:
                n_ev = new_split - state.split
                ev = np.array([state.window_tokens[:n_ev]], dtype=np.int64)
                if model.kind == "dodo":
                    sc = Tensor(np.array([state.window_scores[:n_ev]]))
                    new, _ = _evict_dodo(model, ev, state, sc)
                else:
                    st, _ = run_stack(model.decoder, cfg, ev, start_pos=state.split, memory=state.nuggets, head=False)
                    new = compressive_memory(st, model.pool, state.split)
                state.nuggets = append_memory(state.nuggets, new)
                state.window_tokens = state.window_tokens[n_ev:]
                state.window_scores = state.window_scores[n_ev:]
                state.split = new_split
            state.window = None
            if state.window_tokens:
                st, _ = run_stack(model.decoder, cfg, [state.window_tokens], start_pos=state.split, memory=state.nuggets, head=False)
                state.window = _states_memory(st, cfg.n_layers)
        mem = append_memory(state.nuggets, state.window)
        st, logits = run_stack(model.decoder, cfg, [[token]], start_pos=t, memory=mem)
        state.window = append_memory(state.window, _states_memory(st, cfg.n_layers))
        state.window_tokens.append(token)
        state.position += 1
    return logits.data[0, 0], state


def _evict_dodo(model: DodoLM, ev: np.ndarray, state: StreamState, scores: Tensor):
    cfg = model.config
    st, _ = run_stack(model.encoder, cfg, ev, start_pos=state.split, memory=state.nuggets, head=False)
    sel = select_threshold(scores.data[0], cfg.threshold)
    if sel.k == 0:
        return None, [sel]
    return gather_nuggets(st, scores, [sel], start=state.split), [sel]


def stream_logits(model: DodoLM, tokens) -> np.ndarray:
    """Logits (N, V) from feeding ``tokens`` one at a time."""
    state = StreamState()
    out = []
    for tok in np.asarray(tokens, dtype=np.int64):
        logits, state = step(model, state, int(tok))
        out.append(logits)
    return np.stack(out)


def plan_budget(total_states: int, r: float) -> dict:
    """Matched-budget layout: Full sees all states raw; compressing models split them in half.

    Half the budget is raw context, the other half holds the compressed
    history of ``half * r`` tokens.
    """
    if total_states < 2:
        raise ValueError("total_states must be >= 2")
    ctx = total_states // 2
    comp_states = total_states - ctx
    return {
        "full": {"total_states": total_states, "compressed_tokens": 0, "context_tokens": total_states},
        "compressive": {"total_states": total_states, "compressed_tokens": int(round(comp_states * r)), "context_tokens": ctx},
        "dodo": {"total_states": total_states, "compressed_tokens": int(round(comp_states * r)), "context_tokens": ctx},
    }


def lm_feature_cache(model: DodoLM, docs: np.ndarray) -> Optional[np.ndarray]:
    if model.kind != "dodo":
        return None
    with ad.no_grad():
        return np.concatenate([feature_input(model.features, model.config, docs[i: i + 64]) for i in range(0, len(docs), 64)])


def recalibrate(model: DodoLM, docs: np.ndarray, r: float, features_cache=None) -> float:
    """Set the threshold to the (1 - 1/r) quantile of scores over ``docs``."""
    with ad.no_grad():
        f = lm_feature_cache(model, docs) if features_cache is None else features_cache
        lam = threshold_for_ratio(score_features(model.scorer, f).data, r)
    model.config = model.config.replace(threshold=lam)
    return lam


def train_lm(
    model: DodoLM,
    docs: np.ndarray,
    settings: TrainSettings,
    ratio: Optional[float] = None,
    recalibrate_every: int = 0,
    calib_docs: Optional[np.ndarray] = None,
    on_step: Optional[Callable[[int, float], Optional[bool]]] = None,
) -> List[float]:
    """Train on equal-length documents (D, N) with the segment-parallel loss.

    For dodo models the threshold is re-estimated every ``recalibrate_every``
    steps so the selected fraction tracks 1 / ratio while the scorer moves.
    """
    docs = np.asarray(docs, dtype=np.int64)
    cache = lm_feature_cache(model, docs)
    r = model.config.ratio if ratio is None else ratio
    if model.kind == "dodo" and recalibrate_every:
        cd = docs[:64] if calib_docs is None else calib_docs
        ccache = cache[:64] if calib_docs is None else None
    params = model.parameters()
    opt = Adam(params, lr=settings.lr)
    sched = CosineSchedule(settings.lr, settings.warmup, settings.steps, settings.min_lr_frac)
    rng = np.random.default_rng(settings.seed)
    history = []
    for stepno in range(settings.steps):
        if model.kind == "dodo" and recalibrate_every and stepno % recalibrate_every == 0:
            recalibrate(model, cd, r, ccache)
        pick = rng.choice(len(docs), size=min(settings.batch_size, len(docs)), replace=False)
        opt.zero_grad()
        loss = chunked_lm_loss(model, docs[pick], None if cache is None else cache[pick])
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {stepno}")
        loss.backward()
        clip_grad_norm(params, settings.clip)
        opt.step(sched(stepno))
        history.append(value)
        if on_step is not None and on_step(stepno, value):
            break
    return history


@dataclass
class LMEval:
    model: str
    total_states: float
    compressed_tokens: float
    context_tokens: float
    subword_ppl: float
    word_ppl: float
    nll: np.ndarray = field(repr=False, default=None)


def evaluate_lm(model: DodoLM, docs: np.ndarray, eval_from: int = 0, word_lengths_fn=None, batch_size: int = 32) -> LMEval:
    """Per-position NLL over positions > eval_from plus mean state accounting.

    ``word_lengths_fn(doc) -> list of word lengths`` partitions each document
    for word perplexity; without it word perplexity equals subword perplexity.
    """
    from .metrics import word_log_probs

    docs = np.asarray(docs, dtype=np.int64)
    nll_rows, states, comp = [], [], []
    with ad.no_grad():
        for i in range(0, len(docs), batch_size):
            toks = docs[i: i + batch_size]
            out = chunked_forward(model, toks)
            lp = ad.log_softmax_np(out.logits.data[:, :-1])
            nll_rows.append(-np.take_along_axis(lp, toks[:, 1:, None], axis=2)[..., 0])
            states.append(out.states_per_position[:, eval_from: -1])
            comp.append(out.compressed_per_position[:, eval_from: -1])
    nll = np.concatenate(nll_rows)
    st = np.concatenate(states).astype(np.float64)
    cp = np.concatenate(comp).astype(np.float64)
    sub = float(np.exp(nll[:, eval_from:].mean()))
    word_lp, n_words = 0.0, 0
    for d, row in zip(docs, nll):
        lengths = word_lengths_fn(d) if word_lengths_fn is not None else [1] * len(d)
        lps = word_log_probs(-row, lengths, first_predicted=eval_from + 1)
        word_lp += float(np.sum(lps))
        n_words += len(lps)
    word = float(np.exp(-word_lp / max(1, n_words)))
    return LMEval(model.kind, float(st.mean()), float(cp.mean()), float(_context_mean(model, st, cp, docs, eval_from)), sub, word, nll)


def _context_mean(model, st, cp, docs, eval_from):
    if model.kind == "full":
        return st.mean()
    N = docs.shape[1]
    pos = np.arange(eval_from, N - 1)[None, :]
    return (pos - cp + 1).mean()


def budget_table(rows: Sequence[LMEval]) -> str:
    """Tab-separated table: model, total states, compressed tokens, context tokens, subword ppl, word ppl."""
    lines = ["model\ttotal_states\tcompressed_tokens\tcontext_tokens\tsubword_ppl\tword_ppl"]
    for r in rows:
        lines.append(f"{r.model}\t{r.total_states:.2f}\t{r.compressed_tokens:.2f}\t{r.context_tokens:.2f}\t{r.subword_ppl:.4f}\t{r.word_ppl:.4f}")
    return "\n".join(lines) + "\n"
