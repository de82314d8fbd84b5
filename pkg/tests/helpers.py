"""Shared test utilities: tape-vs-finite-difference gradient checks."""

import numpy as np

from hdmoe import autodiff as ad


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    # floor the scale so FD roundoff against an exactly-zero gradient does
    # not register as a huge relative error
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-6)
    return float(np.abs(a - b).max(initial=0.0)) / scale


def rel_close(a: np.ndarray, b: np.ndarray, rtol: float) -> bool:
    return max_rel_err(a, b) < rtol


def check_grads(f_tape, arrays, rtol=1e-4, eps=1e-5):
    """f_tape(*nodes) must return a 1x1 node. Checks every input's gradient
    against the central-difference oracle; returns the worst relative error."""
    leaves = [ad.leaf(a, requires_grad=True) for a in arrays]
    out = f_tape(*leaves)
    ad.backward(out)
    worst = 0.0
    for i, arr in enumerate(arrays):

        def value_at(x, i=i):
            probe = [ad.leaf(a) for a in arrays]
            probe[i] = ad.leaf(x)
            return float(f_tape(*probe).value[0, 0])

        fd = ad.finite_diff_gradient(value_at, arr, eps)
        g = leaves[i].grad
        if g is None:
            g = np.zeros_like(arr)
        err = max_rel_err(g, fd)
        assert err < rtol, f"input {i}: tape/fd mismatch {err:.3e} (rtol {rtol})"
        worst = max(worst, err)
    return worst
