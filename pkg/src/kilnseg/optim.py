"""Parameter initialisation and the Adam optimiser."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ShapeError
from .tensor import DEFAULT_DTYPE, Tensor

_U64 = (1 << 64) - 1


def _fans(shape: tuple) -> tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def init_params(shape, scheme="he", seed: int = 0, dtype=DEFAULT_DTYPE,
                requires_grad: bool = True) -> Tensor:
    """Draw a parameter tensor.

    ``scheme`` is one of ``"he"`` (normal, std sqrt(2/fan_in)), ``"glorot"``
    (uniform, limit sqrt(6/(fan_in+fan_out))), ``"zeros"``, or
    ``("constant", v)``. Shapes follow the (out, in, kh, kw) convention.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ShapeError(f"invalid parameter shape {shape}")
    rng = np.random.default_rng(int(seed) & _U64)
    if scheme == "he":
        fan_in, _ = _fans(shape)
        data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    elif scheme == "glorot":
        fan_in, fan_out = _fans(shape)
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-limit, limit, size=shape)
    elif scheme == "zeros":
        data = np.zeros(shape)
    elif isinstance(scheme, tuple) and scheme[0] == "constant":
        data = np.full(shape, float(scheme[1]))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data.astype(dtype), requires_grad=requires_grad)


@dataclass
class Adam:
    """Adam with bias correction. Moment buffers are keyed by parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor]) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    @staticmethod
    def zero_grad(params: Mapping[str, Tensor]) -> None:
        for p in params.values():
            p.grad = None


def adam_step(state: Adam, params: Mapping[str, Tensor]) -> None:
    state.step(params)
