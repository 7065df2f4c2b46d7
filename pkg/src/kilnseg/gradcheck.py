"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError
from .tensor import Tape, Tensor


def _scalar(fn: Callable[[], Tensor]) -> float:
    out = fn()
    if out.data.size != 1:
        raise ShapeError(f"checked function must return a scalar, got {out.shape}")
    value = float(out.data.reshape(()))
    if not np.isfinite(value):
        raise NonFiniteError("checked function returned a non-finite value")
    return value


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    seed: int = 0,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` recomputes a scalar from ``inputs`` (which it closes over); every
    input must be float64 and have ``requires_grad`` set. When ``max_coords``
    is given, that many coordinates per input are sampled with ``seed``.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks run in float64")
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            plus = _scalar(fn)
            flat[k] = orig - eps
            minus = _scalar(fn)
            flat[k] = orig
            numeric = (plus - minus) / (2 * eps)
            an = a.reshape(-1)[k]
            err = abs(an - numeric) / max(1e-8, abs(an) + abs(numeric))
            worst = max(worst, err)
    return worst
