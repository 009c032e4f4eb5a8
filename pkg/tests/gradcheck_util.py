"""Central finite differences for gradient tests."""

import numpy as np

from nuggets.autodiff import Tensor


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """d f / d x by central differences; ``f`` maps an array to a float."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def check_op(op, *shapes, rng=None, weights=None, tol=1e-5, positive=False, **kw):
    """Compare analytic and numeric gradients of sum(w * op(*inputs)) for every input.

    Differences below the central-difference roundoff level (about
    eps_machine * |f| / h) are not counted, so near-zero gradients are not
    judged by roundoff noise.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [rng.normal(size=s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts, **kw)
    w = rng.normal(size=out.shape) if weights is None else weights
    loss = (out * Tensor(w)).sum()
    loss.backward()
    errs = []
    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = [Tensor(x if j == k else arrays[j]) for j in range(len(arrays))]
            return float((op(*args, **kw).data * w).sum())
        num = numeric_grad(f, a.copy())
        noise = 10 * np.finfo(np.float64).eps * max(1.0, float(np.abs(out.data * w).sum())) / 1e-6
        diff = float(np.max(np.abs(ts[k].grad - num)))
        errs.append(0.0 if diff <= noise else rel_err(ts[k].grad, num))
    assert max(errs) < tol, errs
    return errs
