"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from charseq.tensor.autograd import Tape, Tensor, backward


def numerical_grad(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-5,
                   coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``t`` (perturbed in place)."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |a|, |n|): relative for large entries, absolute near zero."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Return the worst relative error between backprop and finite differences.

    ``f`` must rebuild the graph from ``inputs`` on each call and return a
    scalar. With ``max_coords`` only a random subset of each input's entries
    is probed.
    """
    for t in inputs:
        t.grad = None
    with Tape():
        loss = f()
        backward(loss)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        numeric = numerical_grad(f, t, eps, coords)
        if coords is not None:
            analytic = analytic.reshape(-1)[coords]
            numeric = numeric.reshape(-1)[coords]
        worst = max(worst, relative_error(analytic, numeric))
    return worst
