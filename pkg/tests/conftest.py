"""Shared test utilities."""

import numpy as np


def fd_coord(loss_fn, arr, idx, eps=1e-5):
    """Central finite difference of loss_fn() w.r.t. arr[idx] (arr mutated in place)."""
    orig = arr[idx]
    arr[idx] = orig + eps
    hi = loss_fn()
    arr[idx] = orig - eps
    lo = loss_fn()
    arr[idx] = orig
    return (hi - lo) / (2 * eps)


def grad_close(analytic, fd, rtol=1e-4, atol=1e-7):
    return abs(analytic - fd) <= max(rtol * max(abs(analytic), abs(fd)), atol)


def check_gradients(build_loss, params, names=None, coords_per_tensor=5, seed=0,
                    eps=1e-5):
    """Compare analytic gradients against finite differences.

    ``build_loss(params)`` must return a loss Node on a fresh graph.  Returns
    a list of (name, idx, analytic, fd) mismatches.
    """
    rng = np.random.default_rng(seed)
    node = build_loss(params)
    grads = node.graph.backward(node)

    def loss_value():
        return float(build_loss(params).value)

    mismatches = []
    for name in names or params.names():
        arr = params[name]
        size = arr.size
        n = min(coords_per_tensor, size)
        flat_ids = rng.choice(size, size=n, replace=False)
        for flat in flat_ids:
            idx = np.unravel_index(flat, arr.shape)
            fd = fd_coord(loss_value, arr, idx, eps)
            a = float(grads[name][idx])
            if not grad_close(a, fd):
                mismatches.append((name, idx, a, fd))
    return mismatches
