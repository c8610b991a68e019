"""Shared test utilities: central finite-difference gradient checking."""

import numpy as np

from handmesh import autograd as ag


def fd_gradcheck(fn, tensors, step=1e-5, rng=None, max_checks=64):
    """Max relative error between tape gradients and central differences.

    fn maps the tensors to a scalar Tensor. Analytic gradients come from
    one taped forward/backward; finite differences re-run fn outside any
    tape. Relative error is |analytic - fd| / max(1, |fd|) so near-zero
    gradients are compared absolutely.
    """
    for t in tensors:
        assert t.dtype == np.float64, "gradcheck needs float64 inputs"
    with ag.Tape() as tape:
        loss = fn(*tensors)
        tape.backward(loss)
    grads = [None if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, analytic in zip(tensors, grads):
        if not t.requires_grad:
            continue
        if analytic is None:
            analytic = np.zeros_like(t.data)
        if t.size <= max_checks or rng is None:
            flat_idxs = np.arange(t.size)
        else:
            flat_idxs = rng.choice(t.size, size=max_checks, replace=False)
        for i in flat_idxs:
            idx = np.unravel_index(i, t.data.shape)
            keep = t.data[idx]
            t.data[idx] = keep + step
            hi = float(fn(*tensors).data)
            t.data[idx] = keep - step
            lo = float(fn(*tensors).data)
            t.data[idx] = keep
            fd = (hi - lo) / (2.0 * step)
            rel = abs(analytic[idx] - fd) / max(1.0, abs(fd))
            worst = max(worst, rel)
    return worst
