"""One test per acceptance criterion; each prints a PASS/FAIL line with its measurements."""

import math
import time

import numpy as np
import pytest

from nuggets import autodiff as ad
from nuggets.checkpoint import load_model, save_model
from nuggets.cli import main
from nuggets.compressor import autoencode_loss, decode_conditional, encode, new_bundle, reconstruct_all, train_compressor
from nuggets.config import ModelConfig
from nuggets.data import alphabet_vocab, planted_key_documents, planted_vocab, synthetic_documents
from nuggets.metrics import answer_correct, bleu, corpus_bleu, normalize_answer, subword_ppl, word_log_probs, word_ppl
from nuggets.model import forward_full
from nuggets.optim import TrainSettings
from nuggets.oracle import compressor_eval_fn, exhaustive_selection, greedy_optimal_selection, scorer_selection
from nuggets.selection import calibrate_threshold, select_threshold, select_topk
from nuggets.streaming import (StreamState, budget_table, chunked_forward, evaluate_lm, new_lm, recalibrate, step, stream_logits,
                               token_scores, train_lm)

from gradcheck_util import rel_err
from model_util import sharpen, tiny_config
from st_util import analytic_score_grad, fd_xi_gradients, memory_problem


def report(n: int, ok: bool, detail: str):
    print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


def test_acceptance_01_straight_through_forward_invariance():
    t0 = time.time()
    mismatches = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        b = new_bundle(tiny_config(), seed=seed)
        sharpen(b.decoder, 3.0)
        w = rng.integers(1, 19, size=(3, int(rng.integers(4, 16))))
        r = float(rng.choice([1, 2, 4]))
        with ad.no_grad():
            b.st_mode = "stopgrad"
            on = autoencode_loss(b, w, r).item()
            b.st_mode = "off"
            off = autoencode_loss(b, w, r).item()
        mismatches += on != off
    dt = time.time() - t0
    report(1, mismatches == 0 and dt < 60, f"20 batches, bit-exact mismatches={mismatches}, {dt:.1f}s")


def test_acceptance_02_straight_through_gradient_aggregation():
    t0 = time.time()
    worst = 0.0
    for seed in range(10):
        cfg, s0, loss = memory_problem(seed, n_layers=2, n_heads=2, d_model=16, K=4, T=5)
        fd = fd_xi_gradients(cfg, 4, 5, loss)
        worst = max(worst, rel_err(analytic_score_grad(s0, loss), fd.sum(axis=(0, 1, 2))))
    dt = time.time() - t0
    report(2, worst < 1e-5 and dt < 300, f"10 seeds, max relative error={worst:.2e} (tol 1e-5), {dt:.1f}s")


def test_acceptance_03_r1_reduction():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        b = new_bundle(tiny_config(), seed=seed)
        sharpen(b.decoder, 4.0)
        b.encoder = b.decoder.clone("encoder")
        n = int(rng.integers(1, 48))
        m = int(rng.integers(1, 64 - n + 1))
        w, y = rng.integers(1, 19, size=n), rng.integers(1, 19, size=m)
        with ad.no_grad():
            logits = decode_conditional(b, encode(b, w, 1), y).data[0]
            _, ref = forward_full(b.decoder, b.config, np.concatenate([w, y]))
        worst = max(worst, float(np.max(np.abs(logits - ref.data[n:]))))
    report(3, worst < 1e-8, f"10 sequences (total length <= 64), max |diff|={worst:.2e} (tol 1e-8)")


def _sort_oracle(s, r):
    n = len(s)
    k = math.ceil(n / r)
    order = sorted(range(n - 1), key=lambda i: (-s[i], i))
    return sorted(order[: k - 1] + [n - 1])


def test_acceptance_04_selection_correctness():
    rng = np.random.default_rng(0)
    cases = bad = 0
    for n in range(1, 65):
        for r in (1, 2, 5, 10, 20):
            for trial in range(4):
                s = rng.integers(-2, 3, size=n).astype(float) if trial % 2 else rng.normal(size=n)
                sel = select_topk(s, r)
                cases += 1
                bad += sel.k != math.ceil(n / r) or sel.indices.tolist() != _sort_oracle(list(s), r)
    report(4, bad == 0, f"{cases} cases over n<=64, r in {{1,2,5,10,20}}, mismatches={bad}")


def test_acceptance_05_causality():
    cfg = tiny_config(max_pos=64, tau=4, segment=8)
    m = new_lm(cfg, "dodo", seed=0)
    sharpen(m.decoder, 3.0)
    m.encoder = m.decoder.clone("encoder")
    recalibrate(m, np.random.default_rng(99).integers(1, 19, size=(8, 40)), 3.0)
    rng = np.random.default_rng(1)
    violations = 0
    for _ in range(100):
        doc = rng.integers(1, 19, size=32)
        t = int(rng.integers(1, 31))
        other = doc.copy()
        other[t:] = rng.integers(1, 19, size=32 - t)
        with ad.no_grad():
            s_a = token_scores(m, doc).data[0]
            s_b = token_scores(m, other).data[0]
        sel_a = select_threshold(s_a[:t], m.threshold).indices
        sel_b = select_threshold(s_b[:t], m.threshold).indices
        sa, sb = StreamState(), StreamState()
        outs_a, outs_b = [], []
        for i in range(t):
            la, sa = step(m, sa, int(doc[i]))
            lb, sb = step(m, sb, int(other[i]))
            outs_a.append(la)
            outs_b.append(lb)
        violations += (not np.array_equal(sel_a, sel_b)) or (not np.array_equal(np.stack(outs_a), np.stack(outs_b)))
    report(5, violations == 0, f"100 random prefix/suffix trials, violations={violations}")


def test_acceptance_06_streaming_offline_consistency():
    cfg = tiny_config(max_pos=200, tau=16, segment=32)
    worst = 0.0
    for seed in range(10):
        kind = ("dodo", "compressive", "full")[seed % 3]
        m = new_lm(cfg, kind, seed=seed, budget=40)
        sharpen(m.decoder, 3.0)
        doc = np.random.default_rng(seed).integers(1, 19, size=200)
        if kind == "dodo":
            m.encoder = m.decoder.clone("encoder")
            recalibrate(m, doc[None], 4.0)
        with ad.no_grad():
            off = chunked_forward(m, doc).logits.data[0]
            on = stream_logits(m, doc)
        worst = max(worst, float(np.max(np.abs(off - on))))
    report(6, worst < 1e-8, f"10 streams of length 200 (seg=32, tau=16), max |diff|={worst:.2e} (tol 1e-8)")


def test_acceptance_07_greedy_oracle():
    t0 = time.time()
    b = new_bundle(tiny_config(), seed=3)
    sharpen(b.decoder, 3.0)
    sharpen(b.encoder, 3.0)
    rng = np.random.default_rng(3)
    problems, gaps = 0, []
    for n in range(2, 9):
        for r in (2, 3, 4):
            if math.ceil(n / r) > 3:
                continue
            w = rng.integers(1, 19, size=n)
            fn = compressor_eval_fn(b, w)
            rep = greedy_optimal_selection(n, scorer_selection(b, w, r), fn)
            ex = exhaustive_selection(n, rep.k, fn)
            problems += any(after >= before for *_, before, after in rep.swaps)
            problems += not (ex["min"] <= rep.final_ppl <= ex["max"]) or rep.final_ppl > rep.initial_ppl
            gaps.append(rep.final_ppl - ex["min"])
    dt = time.time() - t0
    report(7, problems == 0 and dt < 600,
           f"{len(gaps)} documents, violations={problems}, gap to exhaustive min: mean={np.mean(gaps):.4g} max={np.max(gaps):.4g}, "
           f"greedy optimal in {sum(g == 0 for g in gaps)}/{len(gaps)}, {dt:.1f}s")


def _bleu_at(bundle, docs, r):
    rec = reconstruct_all(bundle, docs, r)
    return corpus_bleu([list(x) for x in rec], [list(d) for d in docs])


@pytest.mark.slow
def test_acceptance_08_toy_autoencoding():
    t0 = time.time()
    voc = alphabet_vocab()
    n = 32
    cfg = ModelConfig(n_layers=4, d_model=64, n_heads=4, vocab_size=len(voc), max_pos=2 * n + 2, ratio=2.0)
    docs = [voc.encode(t) for t in synthetic_documents(200, n, np.random.default_rng(0))]
    held = [voc.encode(t) for t in synthetic_documents(50, n, np.random.default_rng(1))]
    bundle = new_bundle(cfg, seed=0)
    curve = []

    def on_step(s, loss):
        if (s + 1) % 500 == 0:
            curve.append((s + 1, _bleu_at(bundle, docs, 2)))
            return curve[-1][1] >= 0.95

    train_compressor(bundle, [(d, d) for d in docs], TrainSettings(steps=20_000, lr=1e-3, warmup=200, batch_size=16), on_step=on_step)
    steps, b2 = curve[-1]
    train = {r: _bleu_at(bundle, docs, r) for r in (2, 4, 8)}
    heldout = {r: _bleu_at(bundle, held, r) for r in (2, 4, 8)}
    dt = time.time() - t0
    ok = train[2] >= 0.95 and train[2] >= train[4] >= train[8] and dt < 7200
    report(8, ok, f"r=2 training BLEU {b2:.4f} after {steps} steps; training BLEU by ratio "
           + ", ".join(f"r={r}: {v:.4f}" for r, v in train.items())
           + "; held-out " + ", ".join(f"r={r}: {v:.4f}" for r, v in heldout.items()) + f"; {dt / 60:.1f} min")


def _mean_full_states(budget, n, eval_from=0):
    return float(np.mean(np.minimum(np.arange(eval_from, n - 1) + 1, budget)))


@pytest.mark.slow
def test_acceptance_09_toy_lm_budget_comparison():
    t0 = time.time()
    voc = planted_vocab()
    n, r = 64, 4.0
    cfg = ModelConfig(vocab_size=len(voc), max_pos=2 * n + 2, ratio=r, tau=8, segment=8, feature_window=8)
    train = np.stack([voc.encode(t) for t in planted_key_documents(400, n, np.random.default_rng(0))])
    test = np.stack([voc.encode(t) for t in planted_key_documents(100, n, np.random.default_rng(1))])
    # the compressor stage gives all three models the same warm start
    base = new_bundle(cfg, seed=0)
    window = train[:, :32]
    train_compressor(base, [(w, w) for w in window], TrainSettings(steps=1000, lr=1e-3, warmup=100, batch_size=16))

    def init(kind, **kw):
        m = new_lm(cfg, kind, seed=0, **kw)
        m.decoder = base.decoder.clone("decoder")
        if kind == "dodo":
            m.encoder = base.encoder.clone("encoder")
            m.scorer = base.scorer.clone("scorer")
            m.features = base.features.clone("features", trainable=False)
        return m

    settings = TrainSettings(steps=1000, lr=1e-3, warmup=100, batch_size=16)
    dodo = init("dodo")
    recalibrate(dodo, train[:64], r)
    train_lm(dodo, train, settings, ratio=r, recalibrate_every=200)
    ev_dodo = evaluate_lm(dodo, test)
    # smallest truncation window whose mean state count is at least the dodo model's
    budget = next(b for b in range(1, n + 1) if _mean_full_states(b, n) >= ev_dodo.total_states)
    full = init("full", budget=budget)
    train_lm(full, train, settings)
    comp = init("compressive", pool=int(r))
    train_lm(comp, train, settings)
    rows = [evaluate_lm(full, test), evaluate_lm(comp, test), ev_dodo]
    print("\n" + budget_table(rows), end="")
    key = slice(n - 8, n - 4)
    for row in rows:
        print(f"{row.model}: mean NLL on key tokens after the query {row.nll[:, key].mean():.4f}")
    dt = time.time() - t0
    ev_full, ev_comp = rows[0], rows[1]
    ok = ev_dodo.subword_ppl < ev_full.subword_ppl and ev_full.total_states >= ev_dodo.total_states and dt < 7200
    report(9, ok, f"subword PPL dodo={ev_dodo.subword_ppl:.4f} full={ev_full.subword_ppl:.4f} compressive={ev_comp.subword_ppl:.4f}; "
           f"mean states dodo={ev_dodo.total_states:.2f} full={ev_full.total_states:.2f} (budget {budget}) "
           f"compressive={ev_comp.total_states:.2f}; {dt / 60:.1f} min")


def test_acceptance_10_metric_correctness():
    failures = []
    uniform = lambda t: np.zeros((len(t), 4))
    if abs(subword_ppl(uniform, [0, 1, 2, 3]) - 4) > 1e-12:
        failures.append("uniform ppl")
    perfect = lambda t: np.where(np.arange(4)[None] == np.r_[t[1:], 0][:, None], 100.0, -100.0)
    if abs(subword_ppl(perfect, np.array([1, 2, 3, 0, 1])) - 1) > 1e-12:
        failures.append("perfect ppl")
    rng = np.random.default_rng(0)
    z, toks = rng.normal(size=(6, 5)), rng.integers(0, 5, size=6)
    ce = ad.cross_entropy(ad.Tensor(z[:-1]), toks[1:]).item()
    if abs(subword_ppl(lambda t: z, toks) - math.exp(ce)) > 1e-10:
        failures.append("ppl vs cross entropy")
    if abs(word_ppl(lambda t: z, toks, [1] * 6) - subword_ppl(lambda t: z, toks)) > 1e-12:
        failures.append("degenerate word ppl")
    if abs(math.exp(-word_log_probs(np.log([0.5, 0.5]), [1, 2])[0]) - 4) > 1e-12:
        failures.append("product rule")
    p = [0.5, 0.25, 0.8, 0.1, 0.5]
    if not np.allclose(word_log_probs(np.log(p), [1, 2, 1, 2]), [math.log(0.125), math.log(0.8), math.log(0.05)], atol=1e-14):
        failures.append("hand-built word ppl")
    if bleu([1, 2, 3], [1, 2, 3]) != 1.0 or bleu([1, 2, 3, 4], [5, 6, 7, 8]) > 1e-8:
        failures.append("bleu identity/disjoint")
    if abs(bleu("the cat sat".split(), "the cat sat down".split()) - math.exp(1 - 4 / 3)) > 1e-12:
        failures.append("bleu brevity")
    if normalize_answer("Two.") != "2" or normalize_answer("  The Answer!  ") != "the answer":
        failures.append("normalize_answer")
    if not answer_correct("the answer is 2 meters", "2"):
        failures.append("containment")
    m = new_lm(tiny_config(max_pos=64), "dodo", seed=0)
    sharpen(m.decoder, 3.0)
    m.encoder = m.decoder.clone("encoder")
    docs = np.random.default_rng(5).integers(1, 19, size=(40, 48))
    fn = lambda d: token_scores(m, d).data[0]
    fractions = {}
    for r in (2, 4, 10):
        lam = calibrate_threshold(fn, docs[:20], r)
        frac = float(np.mean(np.concatenate([fn(d) for d in docs[20:]]) > lam))
        fractions[r] = frac
        if abs(frac * r - 1) > 0.2:
            failures.append(f"calibration r={r}")
    report(10, not failures, f"failures={failures or 'none'}, held-out selected fraction x r: "
           + ", ".join(f"r={r}: {f * r:.3f}" for r, f in fractions.items()))


def test_acceptance_11_determinism_and_persistence(tmp_path):
    rng = np.random.default_rng(0)
    (tmp_path / "corpus.txt").write_text("\n".join("".join(rng.choice(list("abcde "), size=20)) for _ in range(8)) + "\n")
    (tmp_path / "run.cfg").write_text("n_layers = 2\nd_model = 16\nn_heads = 2\nscore_layer = 1\nfeature_window = 8\n"
                                      "batch_size = 4\nwarmup = 2\nmax_len = 16\n")
    blobs = []
    for _ in range(2):
        code = main(["train-compressor", "--config", str(tmp_path / "run.cfg"), "--corpus", str(tmp_path / "corpus.txt"),
                     "--out", str(tmp_path / "o"), "--steps", "10", "--seed", "7"])
        assert code == 0
        blobs.append((tmp_path / "o" / "summary.json").read_bytes())
    same_summary = blobs[0] == blobs[1]
    model = load_model(tmp_path / "o" / "compressor.ckpt")
    save_model(tmp_path / "copy.ckpt", model)
    back = load_model(tmp_path / "copy.ckpt")
    w = np.array([[3, 4, 5, 6, 7, 3]])
    with ad.no_grad():
        a = decode_conditional(model, encode(model, w, 2), w).data
        c = decode_conditional(back, encode(back, w, 2), w).data
    lm = new_lm(tiny_config(max_pos=64), "dodo", seed=1)
    save_model(tmp_path / "lm.ckpt", lm)
    with ad.no_grad():
        la = chunked_forward(lm, np.arange(1, 30) % 19 + 1).logits.data
        lb = chunked_forward(load_model(tmp_path / "lm.ckpt"), np.arange(1, 30) % 19 + 1).logits.data
    ok = same_summary and a.tobytes() == c.tobytes() and la.tobytes() == lb.tobytes()
    report(11, ok, f"summaries byte-identical={same_summary}, compressor logits bit-exact={a.tobytes() == c.tobytes()}, "
           f"LM logits bit-exact={la.tobytes() == lb.tobytes()}")
