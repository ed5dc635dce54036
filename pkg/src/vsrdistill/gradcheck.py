"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, get_tape


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    # coordinates far below the gradient's scale are compared against a floor
    floor = max(1e-3 * scale, 1e-10)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               wrt: Optional[Sequence[Tensor]] = None, max_coords: Optional[int] = None,
               seed: int = 0) -> float:
    """Return the max relative error between tape and finite-difference gradients.

    ``f`` maps ``x`` to a single-element tensor. Gradients are checked for ``x``
    and for every tensor in ``wrt`` (typically a module's parameters, captured
    by ``f``). ``max_coords`` caps how many coordinates per tensor are probed.
    Tensors should be 64-bit; 32-bit round-off swamps the differences.
    """
    targets = [x] + list(wrt or [])
    for t in targets:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    tape = get_tape()
    tape.clear()
    base = f(x)
    if base.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    again = f(x).data.copy()
    tape.clear()
    if not np.array_equal(again, base.data):
        raise RuntimeError("function is not deterministic; finite differences are meaningless")

    base = f(x)
    if base._node is None:
        analytic = [np.zeros_like(t.data) for t in targets]
        tape.clear()
    else:
        tape.backward(base)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in targets]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(targets, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            tape.clear()
            flat[i] = orig - eps
            fm = f(x).item()
            tape.clear()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * eps)
        worst = max(worst, _relative_error(a.reshape(-1)[coords], numeric))
    return worst
