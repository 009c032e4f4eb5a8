import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nuggets import autodiff as ad
from nuggets.metrics import (BLEU_EPS, PartitionError, accuracy, answer_correct, bleu, corpus_bleu, normalize_answer,
                             normalize_answer_report, subword_ppl, word_log_probs, word_ppl)


def _const_model(logits_row):
    return lambda toks: np.tile(np.asarray(logits_row, dtype=float), (len(toks), 1))


def test_uniform_model_ppl_equals_vocab():
    assert abs(subword_ppl(_const_model(np.zeros(4)), [0, 1, 2, 3, 1]) - 4.0) < 1e-12


def test_perfect_model_ppl_one():
    toks = np.array([0, 1, 2, 3, 0, 1])

    def fwd(t):
        out = np.full((len(t), 4), -200.0)
        for i in range(len(t) - 1):
            out[i, t[i + 1]] = 200.0
        return out

    assert abs(subword_ppl(fwd, toks) - 1.0) < 1e-12


def test_ppl_matches_cross_entropy():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(9, 7)) * 2
    toks = rng.integers(0, 7, size=9)
    ce = ad.cross_entropy(ad.Tensor(z[:-1]), toks[1:]).item()
    assert abs(subword_ppl(lambda t: z, toks) - math.exp(ce)) < 1e-10


def test_ppl_needs_two_tokens():
    with pytest.raises(ValueError):
        subword_ppl(_const_model(np.zeros(3)), [1])


def test_word_ppl_degenerate_partition_equals_subword():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(8, 5))
    toks = rng.integers(0, 5, size=8)
    fwd = lambda t: z
    assert abs(word_ppl(fwd, toks, [1] * 8) - subword_ppl(fwd, toks)) < 1e-12


def test_word_product_rule():
    lp = np.log([0.5, 0.5])
    assert word_log_probs(lp, [1, 2]) == [pytest.approx(math.log(0.25), abs=1e-15)]
    assert math.exp(-word_log_probs(lp, [1, 2])[0]) == pytest.approx(4.0, abs=1e-12)


def test_word_ppl_hand_computed():
    # tokens: t0 | t1 t2 | t3 | t4 t5 ; probabilities of t1..t5
    p = [0.5, 0.25, 0.8, 0.1, 0.5]
    lps = word_log_probs(np.log(p), [1, 2, 1, 2])
    assert len(lps) == 3  # first word contains the unpredicted token 0
    expected = [math.log(0.5 * 0.25), math.log(0.8), math.log(0.1 * 0.5)]
    assert np.allclose(lps, expected, atol=1e-14)
    assert word_log_probs(np.log(p), [1, 2, 1, 2], exclude=[2]) == pytest.approx([expected[0], expected[2]])


def test_word_partition_errors():
    with pytest.raises(PartitionError):
        word_log_probs(np.zeros(4), [2, 2])
    with pytest.raises(PartitionError):
        word_log_probs(np.zeros(4), [3, 0, 2])


def _brute_bleu(c, r, max_n=4):
    logs = []
    for n in range(1, max_n + 1):
        cg = [tuple(c[i:i + n]) for i in range(len(c) - n + 1)]
        rg = [tuple(r[i:i + n]) for i in range(len(r) - n + 1)]
        if not cg:
            continue
        used = [False] * len(rg)
        m = 0
        for g in cg:
            for j, h in enumerate(rg):
                if not used[j] and h == g:
                    used[j] = True
                    m += 1
                    break
        logs.append(math.log(max(m, BLEU_EPS) / len(cg)))
    bp = 1.0 if len(c) > len(r) else math.exp(1 - len(r) / len(c))
    return bp * math.exp(sum(logs) / len(logs))


def test_bleu_examples():
    assert bleu([1, 2, 3, 4, 5], [1, 2, 3, 4, 5]) == 1.0
    assert bleu([1, 2, 3, 4], [5, 6, 7, 8]) < 1e-8
    c, r = "the cat sat".split(), "the cat sat down".split()
    assert bleu(c, r) == pytest.approx(math.exp(1 - 4 / 3), abs=1e-12)
    assert bleu(c, r) == pytest.approx(_brute_bleu(c, r), abs=1e-12)
    assert bleu([], [1, 2]) == 0.0
    with pytest.raises(ValueError):
        bleu([1], [])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=12), st.lists(st.integers(0, 4), min_size=1, max_size=12))
def test_bleu_matches_brute_force(c, r):
    b = bleu(c, r)
    assert 0.0 <= b <= 1.0
    assert b == pytest.approx(_brute_bleu(c, r), rel=1e-9, abs=1e-15)


def test_bleu_permutation_sensitive():
    a = [1, 2, 3, 4, 5, 6]
    assert bleu(a[::-1], a) < bleu(a, a)


def test_corpus_bleu_pools_counts():
    cands = [[1, 2, 3, 4], [5, 6, 7, 8]]
    assert corpus_bleu(cands, cands) == 1.0
    with pytest.raises(ValueError):
        corpus_bleu(cands, cands[:1])


def test_normalize_answer_examples():
    assert normalize_answer("Two.") == "2"
    assert normalize_answer("  The Answer!  ") == "the answer"
    assert answer_correct("the answer is 2 meters", "2")
    assert answer_correct("It is two meters", "Two.")
    assert not answer_correct("it is 3", "2")
    assert accuracy(["a 2", "b"], ["two", "c"]) == 0.5


def test_normalize_answer_numerals():
    assert normalize_answer("Twenty") == "20"
    assert normalize_answer("ninety") == "90"
    assert normalize_answer("one thousand") == "one thousand"
    out, compounds = normalize_answer_report("It was twenty-one or one hundred.")
    assert compounds == ["twenty-one", "one hundred"]
    assert "twentyone" not in out and "21" not in out
    # whole words only
    assert normalize_answer("Someone") == "someone"
