"""Central finite-difference oracle used throughout the test suite.

Kept independent of the autodiff path: it only calls forward functions and
perturbs raw numpy buffers.
"""

import numpy as np

from peft_forge import tensor as T


def finite_diff(f, tensors, h=1e-3):
    """Central finite-difference gradients of scalar f() w.r.t. each tensor.

    f is a zero-argument callable returning a float and reading the current
    contents of `tensors`.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def assert_grads_close(f, loss_fn, params, h=1e-3, rtol=1e-3, atol=1e-4, subsample=None, seed=0):
    """Check autodiff grads of loss_fn against finite differences of f.

    loss_fn builds the graph and returns the scalar Tensor; f returns the
    same scalar as a float without touching the graph. `subsample` limits
    the number of coordinates checked per parameter (deterministic choice).
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    for p in params:
        assert p.grad is not None, f"no gradient reached {p.name or p.shape}"
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        idxs = np.arange(flat.size)
        if subsample is not None and flat.size > subsample:
            idxs = rng.choice(flat.size, size=subsample, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            ad = float(gflat[i])
            err = abs(ad - fd)
            if abs(fd) > 1e-1:
                assert err / abs(fd) < rtol, (
                    f"grad mismatch at {p.name}[{i}]: autodiff={ad}, fd={fd}"
                )
            else:
                assert err < max(atol, rtol * abs(fd)), (
                    f"grad mismatch at {p.name}[{i}]: autodiff={ad}, fd={fd}"
                )
