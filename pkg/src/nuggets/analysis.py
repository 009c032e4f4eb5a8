"""Which tokens get selected: frequency statistics and per-token dumps."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .selection import select_threshold, select_topk


@dataclass
class FrequencyStats:
    """Token-type frequencies among selected tokens and in the whole sample."""

    selected: Counter
    corpus: Counter

    @property
    def n_selected(self) -> int:
        return sum(self.selected.values())

    @property
    def n_tokens(self) -> int:
        return sum(self.corpus.values())

    def selected_freq(self) -> dict:
        n = self.n_selected
        return {t: c / n for t, c in self.selected.items()} if n else {}

    def corpus_freq(self) -> dict:
        n = self.n_tokens
        return {t: c / n for t, c in self.corpus.items()} if n else {}

    def rows(self) -> List[tuple]:
        """(token, selected freq, corpus freq) sorted by selected frequency, then token."""
        sf, cf = self.selected_freq(), self.corpus_freq()
        return sorted(((t, sf.get(t, 0.0), cf[t]) for t in self.corpus), key=lambda r: (-r[1], r[0]))

    def top_coverage(self, n: int = 10) -> float:
        """Share of all selections taken by the ``n`` most selected token types."""
        return float(sum(f for _, f, _ in self.rows()[:n]))

    def to_tsv(self, token_text: Optional[Callable[[int], str]] = None) -> str:
        lines = ["token\tselected_freq\tcorpus_freq"]
        for t, sf, cf in self.rows():
            name = escape(token_text(t)) if token_text else str(t)
            lines.append(f"{name}\t{sf:.6f}\t{cf:.6f}")
        return "\n".join(lines) + "\n"


def selection_frequency_stats(score_fn: Callable, sample: Sequence, r: float = 1.0, mode: str = "topk", threshold: Optional[float] = None) -> FrequencyStats:
    """Count selected token types over the sample.

    ``score_fn(tokens) -> scores`` scores one document; selection follows
    ``mode`` (TopK at ratio ``r`` or strict threshold).
    """
    if not len(sample):
        raise ValueError("empty sample")
    if mode == "threshold" and threshold is None:
        raise ValueError("threshold mode needs a threshold")
    sel, cor = Counter(), Counter()
    for doc in sample:
        doc = np.asarray(doc, dtype=np.int64)
        s = np.asarray(score_fn(doc), dtype=np.float64).reshape(-1)
        chosen = select_topk(s, r) if mode == "topk" else select_threshold(s, threshold)
        cor.update(int(t) for t in doc)
        sel.update(int(doc[i]) for i in chosen.indices)
    return FrequencyStats(sel, cor)


def escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def inspection_dump(tokens: Sequence[int], scores, selected, token_text: Callable[[int], str]) -> str:
    """One line per token: text, score, selected flag (0/1), tab-separated."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    flags = np.zeros(len(tokens), dtype=bool)
    flags[np.asarray(list(selected), dtype=np.int64)] = True
    lines = [f"{escape(token_text(int(t)))}\t{s:.6f}\t{int(f)}" for t, s, f in zip(tokens, scores, flags)]
    return "\n".join(lines) + "\n"
