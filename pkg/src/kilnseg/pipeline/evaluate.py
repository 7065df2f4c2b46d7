"""Test-split evaluation and the per-class IoU report."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..metrics import CLASS_NAMES, ConfusionMatrix, confusion_matrix, iou_class, mean_iou, pixel_accuracy
from ..models.base import ModelGraph
from ..models.convlstm import PSPNetLSTM
from ..synthetic import load_pairs
from .training import predict_masks, predict_pair_masks


@dataclass(frozen=True)
class Report:
    model: str
    split: str
    iou: tuple  # per class, in CLASS_NAMES order
    miou: float
    accuracy: float
    pixels: int

    def rows(self) -> list[dict]:
        rows = [{"metric": f"IoU {name}", "value": v} for name, v in zip(CLASS_NAMES, self.iou)]
        rows += [{"metric": "mIoU", "value": self.miou}, {"metric": "accuracy", "value": self.accuracy}]
        return rows


def report_from_confusion(cm: ConfusionMatrix, model: str, split: str) -> Report:
    if cm.num_classes != len(CLASS_NAMES):
        raise ConfigError(f"expected {len(CLASS_NAMES)} classes, got {cm.num_classes}")
    iou = tuple(iou_class(cm, c) for c in range(cm.num_classes))
    return Report(model, split, iou, mean_iou(cm), pixel_accuracy(cm), cm.total)


def evaluate_predictions(preds, truths, model: str = "?", split: str = "test") -> Report:
    cm = ConfusionMatrix.empty(len(CLASS_NAMES))
    for p, t in zip(preds, truths):
        cm = cm + confusion_matrix(p, t, len(CLASS_NAMES))
    return report_from_confusion(cm, model, split)


def evaluate_model(model: ModelGraph, data_dir, split: str = "test") -> Report:
    pairs = load_pairs(data_dir, split)
    if isinstance(model, PSPNetLSTM):
        preds = predict_pair_masks(model, pairs.prev_images, pairs.cur_images)
    else:
        preds = predict_masks(model, pairs.cur_images)
    return evaluate_predictions(preds, pairs.cur_masks, model.kind, split)


def format_table(reports: list[Report]) -> str:
    """Plain-text table: one row per model, one column per class, then mIoU and accuracy."""
    headers = ["Model", *CLASS_NAMES, "mIoU", "Accuracy"]
    body = [[r.model, *(f"{100 * v:.2f}" for v in r.iou), f"{100 * r.miou:.2f}", f"{100 * r.accuracy:.2f}"]
            for r in reports]
    widths = [max(len(str(row[i])) for row in [headers, *body]) for i in range(len(headers))]
    line = lambda row: " | ".join(str(c).rjust(w) for c, w in zip(row, widths))  # noqa: E731
    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([line(headers), rule, *map(line, body)]) + "\n"


def write_report(report: Report, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"eval_{report.model}_{report.split}.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["metric", "value"])
        writer.writeheader()
        for row in report.rows():
            writer.writerow({"metric": row["metric"], "value": repr(float(np.float64(row["value"])))})
    txt_path = out / f"eval_{report.model}_{report.split}.txt"
    txt_path.write_text(f"Class-wise IoU (%) on the {report.split} split\n\n" + format_table([report]))
    return csv_path, txt_path
