"""Parameter containers and the handful of layers the networks are built from."""

from __future__ import annotations

import dataclasses
import hashlib
from typing import Optional

import numpy as np

from .. import ops
from ..errors import ConfigError
from ..optim import init_params
from ..tensor import DEFAULT_DTYPE, Tensor

MODEL_KINDS: dict = {}


def register(kind: str):
    def deco(cls):
        cls.kind = kind
        MODEL_KINDS[kind] = cls
        return cls

    return deco


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def config_to_dict(config) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(cls, data: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown {cls.__name__} field {key!r}")
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    return cls(**kwargs)


class ModelGraph:
    """Named parameters, batch-norm statistics and a layer descriptor.

    Subclasses build their layers in ``__init__`` and implement ``forward``.
    A parameter is trainable exactly when its tensor has ``requires_grad``.
    """

    kind = "graph"
    config_cls: type = None

    def __init__(self, config, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.stats: dict[str, ops.RunningStats] = {}
        self.layers: list[dict] = []

    # registration --------------------------------------------------------

    def param(self, name: str, shape, scheme="he") -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = init_params(shape, scheme, seed=derive_seed(self.seed, name))
        self.params[name] = t
        return t

    def running_stats(self, name: str, channels: int) -> ops.RunningStats:
        stats = ops.RunningStats.initialized(channels)
        self.stats[name] = stats
        return stats

    def add_layer(self, kind: str, name: str, **info) -> None:
        self.layers.append({"type": kind, "name": name, **info})

    # inspection ------------------------------------------------------------

    def descriptor(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "config": config_to_dict(self.config)}

    def layer_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for layer in self.layers:
            counts[layer["type"]] = counts.get(layer["type"], 0) + 1
        return counts

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def set_trainable(self, flag: bool, prefixes: Optional[tuple] = None) -> None:
        for name, p in self.params.items():
            if prefixes is None or name.startswith(prefixes):
                p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "ModelGraph":
        """Cast parameters and statistics in place (float64 for gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        for s in self.stats.values():
            s.mean = s.mean.astype(dtype)
            s.var = s.var.astype(dtype)
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        for k, s in self.stats.items():
            out[k + ".running_mean"] = s.mean
            out[k + ".running_var"] = s.var
        return out

    def check_input(self, x: Tensor, height: int, width: int) -> None:
        from ..errors import ShapeError

        if x.ndim != 4 or x.shape[2:] != (height, width):
            raise ShapeError(f"expected (N, C, {height}, {width}) input, got {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} channels, got {x.shape[1]}")


class Conv2d:
    def __init__(self, graph: ModelGraph, name: str, cin: int, cout: int, kernel: int = 3,
                 stride: int = 1, dilation: int = 1, padding: Optional[int] = None,
                 bias: bool = True):
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (kernel - 1) // 2 if padding is None else padding
        self.weight = graph.param(f"{name}.weight", (cout, cin, kernel, kernel), "he")
        self.bias = graph.param(f"{name}.bias", (cout,), "zeros") if bias else None
        graph.add_layer("conv", name, cin=cin, cout=cout, kernel=kernel, stride=stride,
                        dilation=dilation)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class TransposedConv2d:
    def __init__(self, graph: ModelGraph, name: str, cin: int, cout: int, kernel: int = 2,
                 stride: int = 2):
        self.stride = stride
        self.weight = graph.param(f"{name}.weight", (cin, cout, kernel, kernel), "he")
        self.bias = graph.param(f"{name}.bias", (cout,), "zeros")
        graph.add_layer("upconv", name, cin=cin, cout=cout, kernel=kernel, stride=stride)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.transposed_conv2d(x, self.weight, self.stride, self.bias)


class BatchNorm2d:
    """Uses batch statistics only while training *and* trainable; frozen layers use running stats."""

    def __init__(self, graph: ModelGraph, name: str, channels: int):
        self.gamma = graph.param(f"{name}.gamma", (channels,), ("constant", 1.0))
        self.beta = graph.param(f"{name}.beta", (channels,), "zeros")
        self.stats = graph.running_stats(name, channels)
        graph.add_layer("batchnorm", name, channels=channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        mode = "train" if training and self.gamma.requires_grad else "infer"
        return ops.batch_norm(x, self.gamma, self.beta, mode, self.stats)


class Linear:
    def __init__(self, graph: ModelGraph, name: str, fin: int, fout: int):
        self.weight = graph.param(f"{name}.weight", (fout, fin), "glorot")
        self.bias = graph.param(f"{name}.bias", (fout,), "zeros")
        graph.add_layer("dense", name, fin=fin, fout=fout)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class ConvBNReLU:
    def __init__(self, graph: ModelGraph, name: str, cin: int, cout: int, kernel: int = 3,
                 stride: int = 1, dilation: int = 1):
        self.conv = Conv2d(graph, f"{name}.conv", cin, cout, kernel, stride, dilation, bias=False)
        self.bn = BatchNorm2d(graph, f"{name}.bn", cout)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.relu(self.bn(self.conv(x), training))


def to_tensor(frames, dtype=DEFAULT_DTYPE) -> Tensor:
    """uint8 HxWx3 frame(s) -> normalised (N, 3, H, W) tensor."""
    arr = np.asarray(frames)
    if arr.ndim == 3:
        arr = arr[None]
    x = arr.astype(np.float64).transpose(0, 3, 1, 2) / 255.0
    return Tensor(((x - 0.5) / 0.25).astype(dtype))
