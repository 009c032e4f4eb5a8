"""Search for the nugget selection that minimises downstream perplexity.

``greedy_optimal_selection`` starts from the scorer's choice and, slot by
slot, tries every index that was unchosen when the slot was reached; a swap
is kept only if it strictly lowers perplexity. ``exhaustive_selection``
enumerates all C(n, k) subsets for small n and serves as its reference.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np

from . import autodiff as ad
from .compressor import CompressorBundle, decode_conditional, decoder_inputs
from .model import run_stack
from .scorer import feature_input, score_features
from .selection import Selection, gather_nuggets, select_topk

EvalFn = Callable[[Tuple[int, ...]], float]


@dataclass
class OracleReport:
    initial: Tuple[int, ...]
    final: Tuple[int, ...]
    initial_ppl: float
    final_ppl: float
    swaps: List[tuple] = field(default_factory=list)
    evaluations: int = 0

    @property
    def k(self) -> int:
        return len(self.initial)

    @property
    def overlap(self) -> float:
        if not self.initial:
            return 1.0
        return len(set(self.initial) & set(self.final)) / self.k

    @property
    def replaced_fraction(self) -> float:
        return 1.0 - self.overlap

    @property
    def ppl_delta(self) -> float:
        return self.final_ppl - self.initial_ppl

    def to_dict(self) -> dict:
        return {
            "initial": list(self.initial),
            "final": list(self.final),
            "initial_ppl": self.initial_ppl,
            "final_ppl": self.final_ppl,
            "overlap": self.overlap,
            "replaced_fraction": self.replaced_fraction,
            "ppl_delta": self.ppl_delta,
            "swaps": [list(s) for s in self.swaps],
            "evaluations": self.evaluations,
        }


def _key(indices) -> Tuple[int, ...]:
    return tuple(sorted(int(i) for i in indices))


def greedy_optimal_selection(n: int, initial, eval_fn: EvalFn) -> OracleReport:
    """Greedy swap search over selections of size k from range(n).

    ``eval_fn`` receives a sorted index tuple and returns its perplexity.
    Each swap (slot, old, new, ppl_before, ppl_after) is recorded.
    """
    init = list(initial.indices if isinstance(initial, Selection) else initial)
    init = [int(i) for i in sorted(init)]
    if not 0 < len(init) <= n or len(set(init)) != len(init) or min(init) < 0 or max(init) >= n:
        raise ValueError(f"initial selection {init} is not a valid subset of range({n})")
    current = list(init)
    best = float(eval_fn(_key(current)))
    first = best
    swaps = []
    evals = 1
    for slot in range(len(init)):
        unchosen = [j for j in range(n) if j not in current]
        for cand in unchosen:
            trial = list(current)
            trial[slot] = cand
            ppl = float(eval_fn(_key(trial)))
            evals += 1
            if ppl < best:
                swaps.append((slot, current[slot], cand, best, ppl))
                best, current = ppl, trial
    return OracleReport(tuple(init), _key(current), first, best, swaps, evals)


def exhaustive_selection(n: int, k: int, eval_fn: EvalFn) -> dict:
    """Perplexity of every k-subset; returns the arg-min, min, max and the full table."""
    if not 0 < k <= n:
        raise ValueError("need 0 < k <= n")
    table = {c: float(eval_fn(c)) for c in itertools.combinations(range(n), k)}
    best = min(table, key=lambda c: (table[c], c))
    return {"best": best, "min": table[best], "max": max(table.values()), "table": table}


def compressor_eval_fn(bundle: CompressorBundle, w, y=None) -> EvalFn:
    """Perplexity of y (default w) decoded from the encoder states of w at any index set."""
    w = np.asarray(w, dtype=np.int64)[None]
    y = w if y is None else np.asarray(y, dtype=np.int64)[None]
    with ad.no_grad():
        states, _ = run_stack(bundle.encoder, bundle.config, w, head=False)
    inputs = decoder_inputs(bundle, y)

    def fn(indices) -> float:
        idx = np.array(sorted(indices), dtype=np.int64)
        with ad.no_grad():
            nug = gather_nuggets(states, None, [Selection(idx, np.zeros(idx.size))])
            logits = decode_conditional(bundle, nug, inputs, start_pos=w.shape[1])
            return math.exp(ad.cross_entropy(logits, y).item())

    return fn


def scorer_selection(bundle: CompressorBundle, w, r: float) -> Selection:
    with ad.no_grad():
        s = score_features(bundle.scorer, feature_input(bundle.features, bundle.config, np.asarray(w)[None])).data[0]
    return select_topk(s, r)


def oracle_report(bundle: CompressorBundle, w, r: float, y=None, exhaustive: bool = False) -> dict:
    """Greedy report for one document, optionally with the exhaustive reference."""
    w = np.asarray(w, dtype=np.int64)
    fn = compressor_eval_fn(bundle, w, y)
    sel = scorer_selection(bundle, w, r)
    rep = greedy_optimal_selection(len(w), sel, fn)
    out = rep.to_dict()
    if exhaustive:
        ex = exhaustive_selection(len(w), sel.k, fn)
        out["exhaustive_best"] = list(ex["best"])
        out["exhaustive_min_ppl"] = ex["min"]
        out["exhaustive_max_ppl"] = ex["max"]
        out["gap_to_exhaustive"] = rep.final_ppl - ex["min"]
    return out
