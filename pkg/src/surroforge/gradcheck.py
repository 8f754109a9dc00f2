"""Central finite-difference oracle for the autodiff engine."""

import numpy as np

from . import tensor as T


def relative_error(analytic, numeric, floor=1e-6):
    """Max-norm relative error between two gradient arrays.

    ``floor`` keeps finite-difference roundoff on near-zero gradients from
    dominating: below it the comparison is effectively absolute.
    """
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def _evaluate(loss_fn):
    with T.record_patterns() as patterns:
        value = float(loss_fn().data)
    return value, patterns


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(loss_fn, leaf, h=1e-5, indices=None, with_smoothness=False):
    """d loss_fn() / d leaf by central differences, at ``indices`` (flat) or everywhere.

    With ``with_smoothness`` also returns, per coordinate, whether the activation
    pattern was identical at both probe points and at the base point.
    """
    flat = leaf.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    out = np.zeros(idx.size)
    smooth = np.ones(idx.size, dtype=bool)
    with T.no_grad():
        _, base = _evaluate(loss_fn)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up, pu = _evaluate(loss_fn)
            flat[i] = old - h
            down, pd = _evaluate(loss_fn)
            flat[i] = old
            out[j] = (up - down) / (2.0 * h)
            smooth[j] = _same_pattern(base, pu) and _same_pattern(base, pd)
    return (out, smooth) if with_smoothness else out


def check_gradients(loss_fn, leaves, h=1e-5, max_coords=None, rng=None, max_redraws=20):
    """Largest per-leaf relative error between reverse-mode and finite-difference gradients.

    ``loss_fn`` must rebuild the graph on every call. With ``max_coords`` only that
    many coordinates per leaf (drawn by ``rng``) are differenced. A coordinate
    whose +-h probes land in a different ReLU/max-pool pattern straddles a
    non-differentiable point; it is replaced by a fresh draw (when sampling) or
    dropped (exhaustive mode). Returns ``(worst_error, n_straddling)``.
    """
    for leaf in leaves:
        leaf.zero_grad()
    T.backward(loss_fn())
    worst, straddling = 0.0, 0
    for leaf in leaves:
        n = leaf.size
        analytic = np.zeros(n) if leaf.grad is None else leaf.grad.reshape(-1)
        exhaustive = max_coords is None or n <= max_coords
        order = np.arange(n) if exhaustive else rng.permutation(n)
        want = n if exhaustive else max_coords
        taken, cursor = [], 0
        while len(taken) < want and cursor < len(order):
            batch = order[cursor:cursor + (want - len(taken))]
            cursor += len(batch)
            num, smooth = numeric_grad(loss_fn, leaf, h, batch, with_smoothness=True)
            straddling += int((~smooth).sum())
            taken += [(i, v) for i, v, ok in zip(batch, num, smooth) if ok]
            if not exhaustive and cursor >= want + max_redraws:
                break
        if taken:
            idx = np.array([i for i, _ in taken])
            worst = max(worst, relative_error(analytic[idx], np.array([v for _, v in taken])))
    return worst, straddling


def jitter_params(model, rng, scale=0.1):
    """Move a freshly built model to a generic point (nonzero biases) for checking.

    Zero biases put dead ReLU units exactly on their kink, where the
    derivative is not defined and differencing disagrees with any subgradient.
    """
    for name, p in model.params.items():
        p.data = p.data + scale * rng.child(name).normal(p.size).reshape(p.shape)
    return model
