"""Run configuration: a flat ``key = value`` file, overridden by command-line flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..errors import ConfigError
from ..losses import LOSSES
from .training import WEIGHTINGS

MODELS = ("unet", "pspnet", "pspnet-lstm", "discriminator")
DEFAULT_LOSS = {"unet": ("dice", "isv"), "pspnet": ("ce", "isrv"), "pspnet-lstm": ("ce", "isrv")}
# the temporal head starts from scratch on cached features, so it gets more (cheap) epochs
DEFAULT_EPOCHS = {"unet": 30, "pspnet": 30, "pspnet-lstm": 80, "discriminator": 20}


@dataclass(frozen=True)
class RunConfig:
    model: str = "pspnet"
    loss: Optional[str] = None  # resolved per model when unset
    weighting: Optional[str] = None
    seed: int = 0
    epochs: Optional[int] = None  # resolved per model when unset
    lr: float = 1e-3
    batch_size: int = 16
    window: int = 60
    threshold: float = 0.5
    tau: float = 0.05  # outlier threshold on |fraction - truth|
    time_budget: Optional[float] = None  # CPU seconds per training run
    out: str = "runs"
    data: Optional[str] = None
    checkpoint: Optional[str] = None
    base: Optional[str] = None  # framewise PSPNet checkpoint for the temporal model
    discriminator: Optional[str] = None
    framewise: Optional[str] = None
    temporal: Optional[str] = None
    stream: Optional[str] = None
    split: str = "test"
    n_pairs: int = 420
    occlusion_frames: int = 1500
    stream_frames: int = 600
    stream_occlusion_prob: float = 0.5

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {MODELS}")
        if self.model == "discriminator":
            if self.loss not in (None, "bce") or self.weighting not in (None, "none"):
                raise ConfigError("the discriminator has its own binary cross-entropy; --loss and --weighting do not apply")
        else:
            loss, weighting = DEFAULT_LOSS[self.model]
            object.__setattr__(self, "loss", self.loss or loss)
            object.__setattr__(self, "weighting", self.weighting or weighting)
            if self.loss not in LOSSES:
                raise ConfigError(f"unknown loss {self.loss!r}; choose from {sorted(LOSSES)}")
            if self.weighting not in WEIGHTINGS:
                raise ConfigError(f"unknown weighting {self.weighting!r}; choose from {WEIGHTINGS}")
        if self.epochs is None:
            object.__setattr__(self, "epochs", DEFAULT_EPOCHS[self.model])
        if self.window < 2:
            raise ConfigError("window must be >= 2")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {self.split!r}")

    def with_(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_TYPES = {"int": int, "float": float, "str": str}


def _converter(field: dataclasses.Field):
    name = field.type.replace("Optional[", "").rstrip("]")
    return _TYPES[name], field.type.startswith("Optional")


def _coerce(field: dataclasses.Field, raw: str):
    conv, optional = _converter(field)
    if optional and raw.lower() in ("", "none", "null"):
        return None
    try:
        return conv(raw)
    except ValueError:
        raise ConfigError(f"{field.name}: cannot parse {raw!r} as {conv.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment; values are typed by the field."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key = value")
        if key not in fields:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        values[key] = _coerce(fields[key], raw.strip())
    return values


def load_config(path=None, **overrides) -> RunConfig:
    """File values first, then any non-``None`` override."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values = parse_config_text(path.read_text(), str(path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)
