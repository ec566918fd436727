"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np


def rel_error(analytic, numeric, floor=1e-10):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def fd_floor(loss_value, h, tol):
    """Gradient magnitude below which a central difference cannot resolve ``tol`` relative error.

    Rounding in a float64 loss evaluation is about eps * |L|, so the difference
    quotient carries absolute noise of eps * |L| / h.
    """
    return np.finfo(np.float64).eps * max(abs(loss_value), 1.0) / (h * tol)


def numeric_grad(f, x, h=1e-5, indices=None):
    """d f / d x by central differences, perturbing ``x`` in place and restoring it."""
    g = np.zeros_like(x)
    it = indices if indices is not None else list(np.ndindex(x.shape))
    for idx in it:
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def check_params(loss_fn, params, grads, h=1e-5, max_per_tensor=None, seed=0):
    """Largest relative error over (a sample of) every parameter tensor."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, w in params.items():
        idx = list(np.ndindex(w.shape))
        if max_per_tensor is not None and len(idx) > max_per_tensor:
            idx = [idx[i] for i in rng.choice(len(idx), max_per_tensor, replace=False)]
        num = numeric_grad(loss_fn, w, h, idx)
        for i in idx:
            worst = max(worst, float(rel_error(grads[name][i], num[i])))
    return worst
