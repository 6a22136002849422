"""Confusion matrices, mIoU and per-domain reports."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataIntegrityError, ShapeError

log = logging.getLogger(__name__)

IGNORE_ID = 255

# published ResNet-50 result for GTAV-trained models; full-scale only, kept as context in summaries
REFERENCE_CLAIM = {"backbone": "ResNet-50", "G->C": 44.62, "avg": 46.33, "scale": "full benchmark, not reproduced here"}


class ConfusionMatrix:
    """``counts[gt, pred]`` over non-ignored pixels, plus the number of ignored pixels."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def update(self, pred, gt, ignore_id: int = IGNORE_ID) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} misaligned")
        keep = gt != ignore_id
        g, p = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
        k = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= k or p.min() < 0 or p.max() >= k):
            raise DataIntegrityError(f"class ids outside 0..{k - 1}")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        self.ignored += int((~keep).sum())
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        out.ignored = self.ignored + other.ignored
        return out


def confusion_update(cm: ConfusionMatrix, pred, gt, ignore_id: int = IGNORE_ID) -> ConfusionMatrix:
    return cm.update(pred, gt, ignore_id)


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean.

    Classes absent from both ground truth and prediction get NaN and are
    left out of the mean; the mean is NaN when every class is absent.
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(0) + c.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    present = ~np.isnan(iou)
    return iou, float(iou[present].mean()) if present.any() else float("nan")


@dataclass
class DomainResult:
    name: str
    miou: float
    per_class: np.ndarray
    images: int


@dataclass
class Report:
    domains: dict[str, DomainResult] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def avg(self) -> float:
        vals = [d.miou for d in self.domains.values() if not np.isnan(d.miou)]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_over(self, names) -> float:
        vals = [self.domains[n].miou for n in names if n in self.domains]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict:
        return {
            "domains": {k: v.miou for k, v in self.domains.items()},
            "avg": self.avg,
            "skipped": list(self.skipped),
            "reference": REFERENCE_CLAIM,
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / "eval_domains.csv", out_dir / "eval_summary.json"
        k = max((len(d.per_class) for d in self.domains.values()), default=0)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["domain", "miou"] + [f"iou_{i}" for i in range(k)])
            for d in self.domains.values():
                w.writerow([d.name, f"{d.miou:.6f}"] + [f"{v:.6f}" for v in d.per_class])
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


@torch.no_grad()
def predict_labels(model, image) -> np.ndarray:
    """Argmax class map for one ``[3,H,W]`` image at its native resolution."""
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))[None]
    probs = model(x)
    if probs.shape[-2:] != x.shape[-2:]:
        probs = F.interpolate(probs, size=x.shape[-2:], mode="nearest")
    return probs.argmax(dim=1)[0].numpy()


def evaluate_domains(model, domains: dict, num_classes: int, ignore_id: int = IGNORE_ID) -> Report:
    """Per-domain mIoU of ``model`` (image -> class probabilities) and their unweighted average."""
    model.eval()
    report = Report()
    for name, ds in domains.items():
        if len(ds) == 0:
            warnings.warn(f"evaluation set {name!r} is empty; excluded from the average", stacklevel=2)
            report.skipped.append(name)
            continue
        cm = ConfusionMatrix(num_classes)
        for i in range(len(ds)):
            sample = ds[i]
            cm.update(predict_labels(model, sample.image), sample.label, ignore_id)
        per_class, mean = miou(cm)
        report.domains[name] = DomainResult(name, mean, per_class, len(ds))
        log.info("domain %s: mIoU %.4f over %d images", name, mean, len(ds))
    return report
