import numpy as np
import pytest

from nuggets import autodiff as ad
from nuggets.autodiff import DimensionError, Tensor
from nuggets.model import run_stack
from nuggets.scorer import feature_input, init_scorer, make_feature_stack, score_features
from nuggets.selection import gather_nuggets, select_topk
from nuggets.straight_through import attach_scores

from gradcheck_util import rel_err
from model_util import sharp_stack, tiny_config
from st_util import analytic_score_grad, fd_xi_gradients, memory_problem


def test_attach_scores_forward_exact():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(2, 3, 4, 6)))
    s = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    out = attach_scores(logits, s)
    assert np.max(np.abs(out.data - logits.data)) == 0.0


def test_attach_scores_gradient_sums_over_heads_and_queries():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(1, 2, 3, 5)), requires_grad=True)
    s = Tensor(rng.normal(size=(1, 2)), requires_grad=True)
    w = rng.normal(size=(1, 2, 3, 5))
    (attach_scores(logits, s) * Tensor(w)).sum().backward()
    assert np.allclose(s.grad[0], w[0, :, :, :2].sum(axis=(0, 1)), atol=1e-14)
    assert np.array_equal(logits.grad, w)


def test_attach_scores_axis_mismatch():
    with pytest.raises(DimensionError):
        attach_scores(Tensor(np.zeros((1, 2, 3, 2))), Tensor(np.zeros((1, 3))))
    with pytest.raises(DimensionError):
        attach_scores(Tensor(np.zeros((2, 2, 3, 4))), Tensor(np.zeros((1, 3))))


def test_modes():
    rng = np.random.default_rng(2)
    logits = Tensor(rng.normal(size=(1, 1, 2, 3)))
    s = Tensor(rng.normal(size=(1, 2)), requires_grad=True)
    add = attach_scores(logits, s, mode="additive")
    assert np.allclose(add.data[..., :2] - logits.data[..., :2], s.data[:, None, None, :])
    assert attach_scores(logits, s, mode="off") is logits
    with pytest.raises(ValueError):
        attach_scores(logits, s, mode="bogus")


def test_single_layer_head_query_matches_fd():
    cfg, s0, loss = memory_problem(3, n_layers=2, n_heads=1, d_model=8, K=3, T=1)
    fd = fd_xi_gradients(cfg, 3, 1, loss)
    g = analytic_score_grad(s0, loss)
    for l in range(cfg.n_layers):
        assert np.any(fd[l] != 0)
    assert rel_err(g, fd.sum(axis=(0, 1, 2))) < 1e-5


def test_two_layer_sum_of_per_layer_gradients():
    cfg, s0, loss = memory_problem(4)
    fd = fd_xi_gradients(cfg, 4, 5, loss)
    g = analytic_score_grad(s0, loss)
    per_layer = fd.sum(axis=(1, 2))
    assert rel_err(g, per_layer.sum(axis=0)) < 1e-5
    assert rel_err(g, per_layer[0]) > 1e-3


def test_forward_invariance_end_to_end():
    cfg, s0, loss = memory_problem(5)
    s = Tensor(s0.copy(), requires_grad=True)
    assert loss(scores=s, mode="stopgrad").item() == loss(scores=s, mode="off").item()
    assert loss(scores=s, mode="additive").item() != loss(scores=s, mode="off").item()


def test_unselected_tokens_get_zero_gradient():
    cfg = tiny_config()
    rng = np.random.default_rng(6)
    dec = sharp_stack(cfg, 6, factor=4.0)
    enc = dec.clone("encoder")
    sc = init_scorer(cfg, rng)
    fe = make_feature_stack(dec, cfg)
    toks = rng.integers(0, cfg.vocab_size, size=(1, 10))
    s = score_features(sc, feature_input(fe, cfg, toks))
    sel = select_topk(s.data[0], 3)
    states, _ = run_stack(enc, cfg, toks, head=False)
    nug = gather_nuggets(states, s, [sel])
    _, logits = run_stack(dec, cfg, toks[:, :4], start_pos=10, memory=nug)
    ad.cross_entropy(logits, toks[:, 1:5]).backward()
    unselected = np.setdiff1d(np.arange(10), sel.indices)
    assert np.all(s.grad[0, unselected] == 0.0)
    assert np.any(s.grad[0, sel.indices] != 0.0)
    assert sc["w1"].grad is not None and np.abs(sc["w1"].grad).sum() > 0


def test_gradient_is_same_function_in_additive_mode_at_zero_scores():
    cfg, s0, loss = memory_problem(7)
    z = np.zeros_like(s0)
    a = analytic_score_grad(z, loss, "stopgrad")
    b = analytic_score_grad(z, loss, "additive")
    assert np.allclose(a, b, atol=1e-13)
