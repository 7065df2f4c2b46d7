"""The full finite-difference gradient suite: every differentiable op, loss and model.

Each case builds float64 inputs, reduces the output to a scalar with a fixed
random projection, and reports the worst relative error from
:func:`kilnseg.gradcheck.grad_check`.
"""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

from . import ops
from .gradcheck import grad_check
from .losses import binary_cross_entropy, cross_entropy_loss, dice_loss, tanimoto_loss
from .models import ModelConfig, build_pspnet, build_unet_mini, init_lstm_variant_from_base
from .occlusion import DiscriminatorConfig, OcclusionDiscriminator
from .tensor import Tensor, exp, log

TOLERANCE = 1e-4


def _rng(name: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([zlib.crc32(name.encode()), seed])


def _spread(rng, shape) -> Tensor:
    # distinct, spread-out values keep relu and max-pool away from their kinks
    size = int(np.prod(shape))
    data = rng.normal(size=shape) + 0.1 * rng.permutation(size).reshape(shape) / max(size, 1) * 10
    return Tensor(data, requires_grad=True, dtype=np.float64)


_STATS = ops.RunningStats(np.array([0.3, -0.2]), np.array([1.5, 0.7]))

OP_CASES: dict[str, tuple[Callable, list]] = {
    "add_sub_mul_div": (lambda a, b: (a + b) * (a - b) / (b * b + 1.0), [(2, 3), (2, 3)]),
    "broadcast_add": (lambda a, b: a * b + b, [(2, 3, 4), (3, 1)]),
    "power": (lambda a: (a * a + 1.0) ** 1.5, [(3, 4)]),
    "exp_log": (lambda a: log(exp(a) + 1.0), [(3, 4)]),
    "sum_mean_reshape": (lambda a: a.sum(axis=1).reshape(2, 2) * a.mean(), [(4, 3)]),
    "getitem": (lambda a: a[1:, ::2], [(3, 5)]),
    "conv2d": (lambda a, w, b: ops.conv2d(a, w, b, padding=1), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_strided_dilated": (
        lambda a, w, b: ops.conv2d(a, w, b, stride=2, padding=2, dilation=2),
        [(2, 2, 7, 7), (3, 2, 3, 3), (3,)],
    ),
    "transposed_conv2d": (
        lambda a, w, b: ops.transposed_conv2d(a, w, stride=2, bias=b),
        [(1, 2, 3, 3), (2, 3, 2, 2), (3,)],
    ),
    "max_pool2d": (lambda a: ops.max_pool2d(a, 2), [(2, 2, 4, 6)]),
    "adaptive_avg_pool2d": (lambda a: ops.adaptive_avg_pool2d(a, 3), [(1, 2, 8, 7)]),
    "upsample_bilinear": (lambda a: ops.upsample_bilinear(a, 7, 5), [(1, 2, 3, 2)]),
    "batch_norm_train": (lambda a, g, b: ops.batch_norm(a, g, b, mode="train"), [(3, 2, 3, 3), (2,), (2,)]),
    "batch_norm_infer": (
        lambda a, g, b: ops.batch_norm(a, g, b, mode="infer", running_stats=_STATS),
        [(2, 2, 3, 3), (2,), (2,)],
    ),
    "relu": (ops.relu, [(3, 5)]),
    "sigmoid": (ops.sigmoid, [(2, 3, 2, 2)]),
    "tanh": (ops.tanh, [(2, 3, 2, 2)]),
    "softmax": (ops.softmax, [(2, 4, 2, 3)]),
    "concat_channels": (lambda a, b: ops.concat_channels(a, b), [(1, 2, 3, 3), (1, 3, 3, 3)]),
    "split_channels": (lambda a: ops.split_channels(a, 2)[1], [(1, 4, 2, 2)]),
    "linear": (lambda a, w, b: ops.linear(a, w, b), [(3, 5), (2, 5), (2,)]),
    "flatten": (lambda a: ops.flatten(a), [(2, 2, 2, 2)]),
    "dropout": (lambda a: ops.dropout(a, 0.5, np.random.default_rng(3)), [(2, 8)]),
}


def _target(rng, shape):
    return rng.integers(0, 4, size=shape)


_LOSS_TARGET = np.random.default_rng(11).integers(0, 4, size=(2, 3, 3))
_LOSS_WEIGHTS = np.array([0.5, 2.0, 1.0, 0.8])

LOSS_CASES: dict[str, tuple[Callable, list]] = {
    "loss_ce": (lambda z: cross_entropy_loss(ops.softmax(z), _LOSS_TARGET, _LOSS_WEIGHTS), [(2, 4, 3, 3)]),
    "loss_dice": (lambda z: dice_loss(ops.softmax(z), _LOSS_TARGET, _LOSS_WEIGHTS), [(2, 4, 3, 3)]),
    "loss_tanimoto": (lambda z: tanimoto_loss(ops.softmax(z), _LOSS_TARGET, _LOSS_WEIGHTS), [(2, 4, 3, 3)]),
    "loss_bce": (lambda z: binary_cross_entropy(ops.sigmoid(z), [1, 0, 1, 1]), [(4,)]),
}


def _jitter_biases(model, rng) -> None:
    # zero biases put dead pixels exactly on the relu kink
    for name, p in model.params.items():
        if name.endswith((".bias", ".beta")):
            p.data = p.data + rng.normal(scale=0.1, size=p.shape)


def _model_error(model, loss_fn, rng, max_coords) -> float:
    model.astype(np.float64)
    _jitter_biases(model, rng)
    return grad_check(loss_fn, list(model.trainable().values()), seed=0, max_coords=max_coords)


def _frames(rng, n=2, size=8) -> Tensor:
    return Tensor(rng.normal(size=(n, 3, size, size)), dtype=np.float64)


def model_errors(seed: int = 0, max_coords: int = 4) -> dict[str, float]:
    """Full forward+backward checks at the tiny configuration (8x8 input, 2 filters)."""
    tiny = ModelConfig.tiny()
    out = {}

    rng = _rng("unet", seed)
    unet = build_unet_mini(tiny, seed=seed)
    x, y = _frames(rng), _target(rng, (2, 8, 8))
    out["model_unet"] = _model_error(unet, lambda: cross_entropy_loss(unet(x, training=True), y), rng, max_coords)

    rng = _rng("pspnet", seed)
    psp = build_pspnet(tiny, seed=seed)
    x, y = _frames(rng), _target(rng, (2, 8, 8))
    out["model_pspnet"] = _model_error(psp, lambda: cross_entropy_loss(psp(x, training=True), y), rng, max_coords)

    rng = _rng("pspnet-lstm", seed)
    lstm = init_lstm_variant_from_base(build_pspnet(tiny, seed=seed))
    lstm.set_trainable(True)  # cover the shared trunk through both frame slots
    prev, cur, y = _frames(rng), _frames(rng), _target(rng, (2, 8, 8))
    out["model_pspnet_lstm"] = _model_error(
        lstm, lambda: cross_entropy_loss(lstm(prev, cur, training=True), y), rng, max_coords)

    rng = _rng("discriminator", seed)
    disc = OcclusionDiscriminator(DiscriminatorConfig(input_size=(8, 8), channels=(2, 2, 2)), seed=seed)
    x = _frames(rng, n=3)
    out["model_discriminator"] = _model_error(
        disc, lambda: binary_cross_entropy(disc(x, training=True), [1.0, 0.0, 1.0]), rng, max_coords)
    return out


def op_errors(seed: int = 0) -> dict[str, float]:
    out = {}
    for name, (fn, shapes) in {**OP_CASES, **LOSS_CASES}.items():
        rng = _rng(name, seed)
        inputs = [_spread(rng, s) for s in shapes]
        probe_rng = _rng(name + ":probe", seed)
        result = fn(*inputs)
        probe = Tensor(probe_rng.normal(size=result.shape)) if result.size > 1 else None

        def scalar(fn=fn, inputs=inputs, probe=probe):
            r = fn(*inputs)
            return r if probe is None else (r * probe).sum()

        out[name] = grad_check(scalar, inputs, seed=seed)
    return out


def run_gradient_suite(seed: int = 0, max_coords: int = 4) -> dict[str, float]:
    return {**op_errors(seed), **model_errors(seed, max_coords)}
