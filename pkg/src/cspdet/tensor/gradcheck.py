"""Central finite-difference gradient checks (run in 64-bit)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, index: tuple, eps: float = 1e-6) -> float:
    old = t.data[index]
    t.data[index] = old + eps
    fp = float(fn().data)
    t.data[index] = old - eps
    fm = float(fn().data)
    t.data[index] = old
    return (fp - fm) / (2 * eps)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], n_samples: int = 20,
                    eps: float = 1e-6, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between tape gradients and finite differences.

    ``fn`` must rebuild the scalar loss from the current contents of
    ``tensors`` each call.  Coordinates are sampled uniformly over all
    elements of all tensors.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    fn().backward()
    sizes = np.array([t.size for t in tensors])
    picks = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[k - 1] if k else 0))
        t = tensors[k]
        idx = np.unravel_index(local, t.shape)
        analytic = 0.0 if t.grad is None else float(t.grad[idx])
        worst = max(worst, relative_error(analytic, numerical_grad(fn, t, idx, eps)))
    return worst
