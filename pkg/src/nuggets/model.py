"""Decoder-only transformer with attention over an external memory.

Pre-layer-norm residual blocks, learned absolute positions, tanh-approximate
GELU feedforward (width 4d), attention logits scaled by 1/sqrt(head_dim).

``LayerStates.layers[l]`` is the input of block ``l`` (so ``layers[0]`` is the
embedding). A memory entry stores exactly these per-block inputs, which is
what block ``l`` projects into keys and values; memory entries therefore keep
the positional information of the position they were computed at.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .straight_through import attach_scores


class SequenceLengthError(ValueError):
    pass


class PositionError(ValueError):
    pass


ROLES = ("decoder", "encoder", "scorer", "features")


@dataclass
class ParamSet:
    """Named tensors for one role: decoder (theta), encoder (phi), scorer, or frozen features."""

    role: str
    tensors: dict

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown parameter role {self.role!r}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def parameters(self) -> list:
        return [t for t in self.tensors.values() if t.requires_grad]

    def clone(self, role: Optional[str] = None, trainable: Optional[bool] = None) -> "ParamSet":
        out = {}
        for k, t in self.tensors.items():
            rg = t.requires_grad if trainable is None else trainable
            out[k] = Tensor(t.data.copy(), requires_grad=rg, name=k)
        return ParamSet(role or self.role, out)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def shapes(self) -> dict:
        return {k: t.shape for k, t in self.tensors.items()}

    def n_blocks(self) -> int:
        return sum(1 for k in self.tensors if k.endswith(".attn.wq"))


@dataclass
class Memory:
    """Per-block hidden states of remembered tokens.

    ``layers[l]`` has shape (B, K, d). ``mask`` flags valid (non-padding)
    entries; ``scores`` (B, K_s) are attached to the first K_s key columns
    for the straight-through path.
    """

    layers: list
    positions: np.ndarray
    mask: Optional[np.ndarray] = None
    scores: Optional[Tensor] = None

    @property
    def size(self) -> int:
        return self.layers[0].shape[1] if self.layers else 0

    @property
    def batch(self) -> int:
        return self.layers[0].shape[0]

    def valid(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.positions.shape, dtype=bool)
        return self.mask


@dataclass
class LayerStates:
    layers: list
    positions: np.ndarray
    final: Optional[Tensor] = None

    def __len__(self):
        return len(self.layers)


def init_stack(config: ModelConfig, rng: np.random.Generator, role: str = "decoder") -> ParamSet:
    d, V, L = config.d_model, config.vocab_size, config.n_layers
    std = 0.02
    out_std = std / np.sqrt(2 * L)

    def normal(shape, s=std):
        return rng.normal(0.0, s, size=shape)

    t = {"tok_emb": normal((V, d)), "pos_emb": normal((config.max_pos, d))}
    for i in range(L):
        p = f"blocks.{i}."
        t[p + "ln1.g"] = np.ones(d)
        t[p + "ln1.b"] = np.zeros(d)
        t[p + "attn.wq"] = normal((d, d))
        t[p + "attn.wk"] = normal((d, d))
        t[p + "attn.wv"] = normal((d, d))
        t[p + "attn.wo"] = normal((d, d), out_std)
        t[p + "ln2.g"] = np.ones(d)
        t[p + "ln2.b"] = np.zeros(d)
        t[p + "mlp.w1"] = normal((d, 4 * d))
        t[p + "mlp.b1"] = np.zeros(4 * d)
        t[p + "mlp.w2"] = normal((4 * d, d), out_std)
        t[p + "mlp.b2"] = np.zeros(d)
    t["ln_f.g"] = np.ones(d)
    t["ln_f.b"] = np.zeros(d)
    t["head"] = normal((d, V))
    return ParamSet(role, {k: Tensor(v, requires_grad=True, name=k) for k, v in t.items()})


def _attention_mask(B, T, K, mem_mask, band):
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    cur = j <= i
    if band is not None:
        cur &= (i - j) < band
    if K == 0:
        return cur[None, None]
    mem = np.ones((B, K), dtype=bool) if mem_mask is None else mem_mask
    full = np.concatenate([np.broadcast_to(mem[:, None, :], (B, T, K)), np.broadcast_to(cur, (B, T, T))], axis=2)
    return full[:, None]


def _block(p, i, x, cfg, mem_x, mem_scores, mask, st_mode, probe, trace):
    pre = f"blocks.{i}."
    B, T, d = x.shape
    H, dh = cfg.n_heads, cfg.head_dim

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, t.shape[1], H, dh)), (0, 2, 1, 3))

    g1, b1 = p[pre + "ln1.g"], p[pre + "ln1.b"]
    wq, wk, wv = p[pre + "attn.wq"], p[pre + "attn.wk"], p[pre + "attn.wv"]
    h = ad.layer_norm(x, g1, b1)
    q = heads(ad.matmul(h, wq))
    k = heads(ad.matmul(h, wk))
    v = heads(ad.matmul(h, wv))
    K = 0
    if mem_x is not None and mem_x.shape[1]:
        K = mem_x.shape[1]
        hm = ad.layer_norm(mem_x, g1, b1)
        k = ad.concat([heads(ad.matmul(hm, wk)), k], axis=2)
        v = ad.concat([heads(ad.matmul(hm, wv)), v], axis=2)
    logits = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / np.sqrt(dh))
    if K and mem_scores is not None:
        logits = attach_scores(logits, mem_scores, mode=st_mode)
    if probe is not None:
        pr = np.zeros(logits.shape)
        pr[..., : probe.shape[-1]] = probe
        logits = ad.add(logits, Tensor(pr))
    a = ad.softmax_rows(logits, mask)
    if trace is not None:
        trace.append(a.data)
    o = ad.reshape(ad.transpose(ad.matmul(a, v), (0, 2, 1, 3)), (B, T, d))
    x = ad.add(x, ad.matmul(o, p[pre + "attn.wo"]))
    h2 = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
    m = ad.linear(ad.gelu(ad.linear(h2, p[pre + "mlp.w1"], p[pre + "mlp.b1"])), p[pre + "mlp.w2"], p[pre + "mlp.b2"])
    return ad.add(x, m)


def run_stack(
    params: ParamSet,
    config: ModelConfig,
    tokens,
    start_pos: int = 0,
    memory: Optional[Memory] = None,
    n_blocks: Optional[int] = None,
    band: Optional[int] = None,
    head: bool = True,
    st_mode: str = "stopgrad",
    probe: Optional[dict] = None,
    trace: Optional[list] = None,
):
    """Run the transformer over a (B, T) batch of token ids.

    Returns ``(LayerStates, logits)``; logits is None when ``head`` is False.
    ``probe`` maps block index to a constant (B, H, T, K_s) array added to the
    attention logits of the scored memory columns (finite-difference hook).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (batch, length), got shape {tokens.shape}")
    B, T = tokens.shape
    if start_pos < 0 or start_pos + T > config.max_pos:
        raise SequenceLengthError(f"positions {start_pos}..{start_pos + T - 1} exceed max_pos={config.max_pos}")
    nb = config.n_layers if n_blocks is None else n_blocks
    K = 0
    if memory is not None and memory.size:
        K = memory.size
        if memory.batch != B:
            raise ValueError(f"memory batch {memory.batch} != token batch {B}")
        pos = memory.positions[memory.valid()]
        if pos.size and pos.max() >= start_pos:
            raise PositionError(f"memory position {int(pos.max())} does not precede start_pos {start_pos}")
        if len(memory.layers) < nb:
            raise ValueError(f"memory has {len(memory.layers)} layers, need {nb}")
    positions = np.arange(start_pos, start_pos + T)
    x = ad.add(ad.embedding(params["tok_emb"], tokens), ad.broadcast_to(ad.embedding(params["pos_emb"], positions), (B, T, config.d_model)))
    mask = _attention_mask(B, T, K, memory.mask if K else None, band)
    states = []
    for i in range(nb):
        states.append(x)
        mem_x = memory.layers[i] if K else None
        mem_s = memory.scores if K else None
        x = _block(params, i, x, config, mem_x, mem_s, mask, st_mode, None if probe is None else probe.get(i), trace)
    logits = None
    if head:
        logits = ad.matmul(ad.layer_norm(x, params["ln_f.g"], params["ln_f.b"]), params["head"])
    return LayerStates(states, positions, final=x), logits


def _as_batch(tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    return (tokens[None], True) if tokens.ndim == 1 else (tokens, False)


def forward_full(params: ParamSet, config: ModelConfig, tokens, **kw):
    """Causal forward over the whole sequence; 1-D input gives unbatched output."""
    batch, squeeze = _as_batch(tokens)
    states, logits = run_stack(params, config, batch, **kw)
    if squeeze:
        return _squeeze_states(states), ad.reshape(logits, logits.shape[1:])
    return states, logits


def forward_with_memory(params: ParamSet, config: ModelConfig, tokens, memory: Optional[Memory], start_pos: int, **kw):
    """Forward where every block also attends to ``memory`` (all positions < start_pos)."""
    batch, squeeze = _as_batch(tokens)
    states, logits = run_stack(params, config, batch, start_pos=start_pos, memory=memory, **kw)
    if squeeze:
        return _squeeze_states(states), ad.reshape(logits, logits.shape[1:])
    return states, logits


def _squeeze_states(states: LayerStates) -> LayerStates:
    layers = [ad.reshape(x, x.shape[1:]) for x in states.layers]
    final = ad.reshape(states.final, states.final.shape[1:])
    return LayerStates(layers, states.positions, final)


def states_as_memory(states: LayerStates, batch_positions: Optional[np.ndarray] = None) -> Memory:
    """Treat every position of a (batched) forward as memory."""
    B, T = states.layers[0].shape[:2]
    pos = np.broadcast_to(states.positions, (B, T)).copy() if batch_positions is None else batch_positions
    return Memory(list(states.layers), pos)


def concat_memory(a: Optional[Memory], b: Optional[Memory]) -> Optional[Memory]:
    """Concatenate two memories along the entry axis; scores are kept only for ``a``'s prefix."""
    if a is None or a.size == 0:
        return b
    if b is None or b.size == 0:
        return a
    layers = [ad.concat([x, y], axis=1) for x, y in zip(a.layers, b.layers)]
    mask = None
    if a.mask is not None or b.mask is not None:
        mask = np.concatenate([a.valid(), b.valid()], axis=1)
    return Memory(layers, np.concatenate([a.positions, b.positions], axis=1), mask, a.scores)


def copy_params(p: ParamSet) -> ParamSet:
    return copy.deepcopy(p)
