"""Shared test utilities."""

import numpy as np

from implicit_nbv import diff as d


def param_grad_check(store, group, loss, picks, eps=1e-5):
    """Max relative error of taped parameter gradients against central differences.

    ``loss(tape)`` builds the scalar on ``tape`` (or evaluates values when the
    tape is None); ``picks`` is a list of (array name, flat index).
    """
    store.zero_grad(group)
    tape = d.Tape()
    out = loss(tape)
    tape.backward(out)
    worst = 0.0
    for name, i in picks:
        arr = store.params[name].reshape(-1)
        analytic = store.grads[name].reshape(-1)[i]
        keep = arr[i]
        arr[i] = keep + eps
        up = float(d.value_of(loss(None)))
        arr[i] = keep - eps
        down = float(d.value_of(loss(None)))
        arr[i] = keep
        fd = (up - down) / (2 * eps)
        worst = max(worst, abs(analytic - fd) / max(1e-8, abs(fd)))
    store.zero_grad(group)
    return worst


def sensitive_picks(store, group, loss, count, rng, floor=1e-6):
    """``count`` random (name, index) pairs whose gradient magnitude exceeds ``floor``.

    Hash-table entries that no sample touches have exactly zero gradient and
    make a vacuous check, so picks are drawn among the entries that matter.
    """
    store.zero_grad(group)
    tape = d.Tape()
    tape.backward(loss(tape))
    pool = []
    for name in store.names(group):
        idx = np.flatnonzero(np.abs(store.grads[name]) > floor)
        pool += [(name, int(i)) for i in idx]
    store.zero_grad(group)
    choice = rng.choice(len(pool), size=min(count, len(pool)), replace=False)
    return [pool[c] for c in choice]
