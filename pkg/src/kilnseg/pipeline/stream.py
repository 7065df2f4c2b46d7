"""Streaming monitor: occlusion gate, segmentation, slag fraction, running variance."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError
from ..metrics import MonitorConfig, RunningVariance, slag_fraction
from ..models.base import ModelGraph, to_tensor
from ..models.convlstm import PSPNetLSTM
from ..occlusion import OcclusionDiscriminator
from ..synthetic import Frame
from .log import append_records

FRAMEWISE, TEMPORAL = "framewise", "temporal"


@dataclass(frozen=True)
class StreamRecord:
    run_id: str
    frame_id: int
    timestamp: float
    occlusion_probability: float
    filtered: bool
    model: str
    fraction: Optional[float] = None
    running_variance: Optional[float] = None
    truth: Optional[float] = None
    delta: Optional[float] = None  # temporal model: seconds back to the paired earlier frame

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Track:
    """Per-model running state."""

    tag: str
    variance: RunningVariance
    values: list
    variances: list
    outliers: int = 0


def _argmax_mask(probs: np.ndarray) -> np.ndarray:
    return probs[0].argmax(axis=0)


def run_stream(frames: Sequence[Frame], discriminator: OcclusionDiscriminator,
               framewise: Optional[ModelGraph] = None, temporal: Optional[PSPNetLSTM] = None, *,
               window: int = 60, threshold: float = 0.5, tau: float = 0.05,
               run_id: str = "run") -> tuple[list[StreamRecord], dict]:
    """Process frames in order; return the records and a per-model summary.

    The temporal model pairs each frame with the most recent frame that
    passed the gate (the first passing frame pairs with itself).
    """
    frames = list(frames)
    if len(frames) < window:
        raise ConfigError(f"stream of {len(frames)} frames is shorter than the window {window}")
    if framewise is None and temporal is None:
        raise ConfigError("need at least one segmentation model")
    h, w = frames[0].mask.shape
    monitor = MonitorConfig(window=window, height=h, width=w)
    tracks = {}
    if framewise is not None:
        tracks[FRAMEWISE] = _Track(FRAMEWISE, RunningVariance(window), [], [])
    if temporal is not None:
        tracks[TEMPORAL] = _Track(TEMPORAL, RunningVariance(window), [], [])

    records: list[StreamRecord] = []
    prev_features, prev_time = None, None
    filtered_count = leaked = 0
    for i, frame in enumerate(frames):
        x = to_tensor(frame.image)
        p = float(discriminator.forward(x).data[0])
        filtered = p >= threshold
        truth = float(frame.slag_fraction)
        base = dict(run_id=run_id, frame_id=i, timestamp=float(frame.timestamp),
                    occlusion_probability=p, filtered=filtered, truth=truth)
        if filtered:
            filtered_count += 1
            records.extend(StreamRecord(model=tag, **base) for tag in tracks)
            continue
        leaked += bool(frame.occluded)
        predictions = {}
        if framewise is not None:
            predictions[FRAMEWISE] = (_argmax_mask(framewise.forward(x).data), None)
        if temporal is not None:
            cur_features = temporal.features(x)
            if prev_features is None:
                prev_features, prev_time = cur_features, frame.timestamp
            probs = temporal.forward_features(prev_features, cur_features).data
            predictions[TEMPORAL] = (_argmax_mask(probs), float(frame.timestamp - prev_time))
            prev_features, prev_time = cur_features, frame.timestamp
        for tag, (mask, delta) in predictions.items():
            track = tracks[tag]
            f = slag_fraction(mask, monitor)
            rv = track.variance.push(f)
            track.values.append(f)
            if rv is not None:
                track.variances.append(rv)
            track.outliers += abs(f - truth) > tau
            records.append(StreamRecord(model=tag, fraction=f, running_variance=rv, delta=delta, **base))

    unfiltered = len(frames) - filtered_count
    summary = {
        "run_id": run_id,
        "frames": len(frames),
        "filtered": filtered_count,
        "unfiltered": unfiltered,
        "leaked_occluded": leaked,
        "leakage": leaked / unfiltered if unfiltered else 0.0,
        "truly_occluded": int(sum(f.occluded for f in frames)),
        "window": window,
        "tau": tau,
        "models": {
            tag: {
                "outliers": int(t.outliers),
                "median_running_variance": float(np.median(t.variances)) if t.variances else None,
                "mean_abs_error": float(np.mean([abs(v - r.truth) for v, r in zip(
                    t.values, [r for r in records if r.model == tag and not r.filtered])])) if t.values else None,
            }
            for tag, t in tracks.items()
        },
    }
    return records, summary


def write_stream_outputs(records: Sequence[StreamRecord], summary: dict, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "stream_log.jsonl"
    append_records(log_path, (r.to_dict() for r in records))
    summary_path = out / "stream_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return log_path, summary_path
