import numpy as np

from prefixmerge import autodiff as ad


def assert_grads_close(analytic, numeric, rtol=1e-5, atol=1e-8, label=""):
    """Elementwise |a-b| <= max(rtol*max(|a|,|b|), atol)."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    assert a.shape == b.shape, f"{label}: shape {a.shape} vs {b.shape}"
    diff = np.abs(a - b)
    bound = np.maximum(rtol * np.maximum(np.abs(a), np.abs(b)), atol)
    worst = (diff - bound).max() if diff.size else 0.0
    assert (diff <= bound).all(), f"{label}: gradient mismatch, excess {worst:.3e}"


def check_param_grads(loss_fn, params, rtol=1e-5, atol=1e-8, eps=1e-6):
    """Compare backward() against finite differences for every param tensor.

    loss_fn() must rebuild the forward graph from the params' current data
    and return a scalar Tensor.
    """
    gm = ad.backward(loss_fn(), params=list(params.values()))
    for name, p in params.items():
        fd = ad.finite_diff_grad(lambda _t: loss_fn(), p, eps=eps)
        assert_grads_close(gm.get(p), fd, rtol=rtol, atol=atol, label=name)
