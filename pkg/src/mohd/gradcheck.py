"""Central-difference gradient verification for the autodiff engine.

This is the independent oracle for every backward pass in the package: it
never touches the recorded graph, only re-evaluates the forward function at
perturbed parameter values.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    n_samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of ``f(params)`` against central differences.

    ``f`` must be deterministic and return a scalar tensor. Returns the
    maximum over sampled coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    When ``n_samples`` is given, that many coordinates are drawn uniformly
    (without replacement) from the concatenated parameter space; otherwise
    every coordinate is checked.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step size h={h} outside [1e-6, 1e-3]")
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError("all checked parameters must require gradients")
        p.grad = None

    loss = f(params)
    if not math.isfinite(loss.item()):
        raise FloatingPointError("loss is not finite at the evaluation point")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = [p.data.size for p in params]
    offsets = np.cumsum([0] + sizes)
    total = offsets[-1]
    if n_samples is None or n_samples >= total:
        coords = np.arange(total)
    else:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(total, size=n_samples, replace=False)

    max_rel = 0.0
    for c in coords:
        pi = int(np.searchsorted(offsets, c, side="right") - 1)
        flat = params[pi].data.reshape(-1)
        k = int(c - offsets[pi])
        orig = flat[k]
        with no_grad():
            flat[k] = orig + h
            up = f(params).item()
            flat[k] = orig - h
            down = f(params).item()
        flat[k] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise FloatingPointError("loss is not finite at a perturbed point")
        numeric = (up - down) / (2.0 * h)
        a = float(analytic[pi].reshape(-1)[k])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
