"""Central finite-difference verification of backward passes."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    scale_floor: float = 1e-3,
) -> float:
    """Max relative error between analytic and numeric gradients.

    ``f`` is re-evaluated from scratch for every probe and must read its
    inputs through the given tensors.  Per coordinate the error is
    ``|a - n| / max(|a|, |n|, floor, scale_floor * max|a|)``, the maximum of
    ``|a|`` taken over the whole input tensor.  The floors stop coordinates
    with (near) zero gradient from dividing finite-difference rounding noise
    by almost nothing.  With
    ``max_coords`` each input is probed at that many random coordinates.
    """
    for t in inputs:
        t.grad = None
    out = f()
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng if rng is not None else np.random.default_rng(0)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.values.reshape(-1)
        denom_floor = max(floor, scale_floor * float(np.abs(a).max(initial=0.0)))
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            ai = a.reshape(-1)[i]
            err = abs(ai - numeric) / max(abs(ai), abs(numeric), denom_floor)
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
