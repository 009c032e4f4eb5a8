"""Perplexities, BLEU and answer normalisation."""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, log_softmax_np

BLEU_EPS = 1e-9


class PartitionError(ValueError):
    pass


def _logits_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def token_log_probs(forward_fn: Callable, tokens) -> np.ndarray:
    """log p(tokens[t + 1] | tokens[: t + 1]) for t = 0 .. n - 2.

    ``forward_fn(tokens)`` returns (n, V) next-token logits.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 2:
        raise ValueError("perplexity needs at least 2 tokens")
    logits = _logits_array(forward_fn(tokens))
    lp = log_softmax_np(logits[:-1])
    return lp[np.arange(tokens.size - 1), tokens[1:]]


def subword_ppl(forward_fn: Callable, tokens) -> float:
    return float(np.exp(-token_log_probs(forward_fn, tokens).mean()))


def word_log_probs(token_lp, lengths: Sequence[int], first_predicted: int = 1, exclude: Optional[Iterable[int]] = None) -> List[float]:
    """Per-word log probabilities: the sum of its subword log probabilities.

    ``token_lp[j]`` scores token j + 1; ``lengths`` partitions all n tokens into
    words. Words containing a token before ``first_predicted`` are incomplete
    and skipped, as are word indices listed in ``exclude``.
    """
    token_lp = np.asarray(token_lp, dtype=np.float64)
    n = token_lp.size + 1
    lengths = [int(x) for x in lengths]
    if any(x < 1 for x in lengths) or sum(lengths) != n:
        raise PartitionError(f"word lengths {lengths} do not partition {n} tokens")
    skip = set(exclude or ())
    out, start = [], 0
    for w, m in enumerate(lengths):
        if start >= first_predicted and w not in skip:
            out.append(float(token_lp[start - 1: start - 1 + m].sum()))
        start += m
    return out


def word_ppl(forward_fn: Callable, tokens, lengths: Sequence[int], exclude: Optional[Iterable[int]] = None) -> float:
    """exp of the mean negative word log probability over complete, non-excluded words."""
    lps = word_log_probs(token_log_probs(forward_fn, tokens), lengths, 1, exclude)
    if not lps:
        raise PartitionError("no scorable words")
    return float(np.exp(-np.mean(lps)))


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i: i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(candidates: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU with uniform weights and brevity penalty.

    Orders with no candidate n-grams at all are left out (weights renormalised);
    an order with candidate n-grams but no matches uses BLEU_EPS matches.
    """
    if len(candidates) != len(references):
        raise ValueError("candidate and reference counts differ")
    if any(len(r) == 0 for r in references):
        raise ValueError("empty reference")
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    if c_len == 0:
        return 0.0
    logs = []
    for n in range(1, max_n + 1):
        match = total = 0
        for c, r in zip(candidates, references):
            cn, rn = _ngrams(list(c), n), _ngrams(list(r), n)
            match += sum(min(v, rn[g]) for g, v in cn.items())
            total += sum(cn.values())
        if total == 0:
            continue
        logs.append(math.log(max(match, BLEU_EPS) / total))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return float(bp * math.exp(sum(logs) / len(logs)))


def bleu(candidate: Sequence, reference: Sequence, max_n: int = 4) -> float:
    return corpus_bleu([candidate], [reference], max_n)


_UNITS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
          "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
          "nineteen", "twenty"]
_TENS = {"thirty": 30, "forty": 40, "fifty": 50, "sixty": 60, "seventy": 70, "eighty": 80, "ninety": 90}
NUMBER_WORDS = {w: i for i, w in enumerate(_UNITS)}
NUMBER_WORDS.update(_TENS)
NUMBER_WORDS.update({"hundred": 100, "thousand": 1000})

_NUM_ALT = "|".join(sorted(NUMBER_WORDS, key=len, reverse=True))
_NUM_RE = re.compile(rf"\b({_NUM_ALT})\b", re.IGNORECASE)
_COMPOUND_RE = re.compile(rf"\b(?:{_NUM_ALT})(?:(?:\s+and\s+|\s+|-)(?:{_NUM_ALT})\b)+", re.IGNORECASE)
_PUNCT_RE = re.compile("[" + re.escape(string.punctuation) + "]")


def normalize_answer_report(text: str) -> Tuple[str, List[str]]:
    """Normalise and also return the multi-word number phrases left unconverted."""
    compounds = [m.group(0) for m in _COMPOUND_RE.finditer(text)]
    spans = [(m.start(), m.end()) for m in _COMPOUND_RE.finditer(text)]

    def conv(m):
        if any(a <= m.start() < b for a, b in spans):
            return m.group(0)
        return str(NUMBER_WORDS[m.group(0).lower()])

    out = _NUM_RE.sub(conv, text)
    out = _PUNCT_RE.sub(" ", out)
    out = out.strip().lower()
    return out, compounds


def normalize_answer(text: str) -> str:
    """Single-word English numerals to digits, punctuation to spaces, ends trimmed, lowercased."""
    return normalize_answer_report(text)[0]


def answer_correct(output: str, gold: str) -> bool:
    """True if the normalised gold answer occurs in the normalised output."""
    return normalize_answer(gold) in normalize_answer(output)


def accuracy(outputs: Sequence[str], golds: Sequence[str]) -> float:
    if len(outputs) != len(golds):
        raise ValueError("output and gold counts differ")
    if not outputs:
        return 0.0
    return sum(answer_correct(o, g) for o, g in zip(outputs, golds)) / len(outputs)
