"""Per-class intersection/union accumulation and mIoU."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def confusion_accumulate(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                         inter: np.ndarray | None = None, union: np.ndarray | None = None):
    """Add per-class |pred=k & gt=k| and |pred=k | gt=k| to running totals."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} has class ids outside [0, {num_classes})")
    inter = np.zeros(num_classes, dtype=np.int64) if inter is None else inter
    union = np.zeros(num_classes, dtype=np.int64) if union is None else union
    pc = np.bincount(pred.ravel(), minlength=num_classes)
    gc = np.bincount(gt.ravel(), minlength=num_classes)
    ic = np.bincount(pred[pred == gt].ravel(), minlength=num_classes)
    inter += ic
    union += pc + gc - ic
    return inter, union


@dataclass
class RunMetrics:
    num_classes: int
    intersection: np.ndarray = None
    union: np.ndarray = None
    frames: int = 0
    interval: int = 1
    seconds_key: float = 0.0
    seconds_inter: float = 0.0
    macs_key: int = 0
    macs_inter: int = 0
    n_key: int = 0
    n_inter: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.intersection is None:
            self.intersection = np.zeros(self.num_classes, dtype=np.int64)
        if self.union is None:
            self.union = np.zeros(self.num_classes, dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        """Score one labeled frame."""
        confusion_accumulate(pred, gt, self.num_classes, self.intersection, self.union)
        self.frames += 1

    def add_cost(self, kind: str, macs: int, seconds: float) -> None:
        """Record the cost of one processed frame (scored or not)."""
        if kind == "keyframe":
            self.n_key += 1
            self.macs_key += macs
            self.seconds_key += seconds
        else:
            self.n_inter += 1
            self.macs_inter += macs
            self.seconds_inter += seconds

    def _blend(self, key_total: float, inter_total: float) -> float:
        # steady state: one keyframe and n - 1 intermediate frames per interval
        if not self.n_key:
            return float("nan")
        key = key_total / self.n_key
        if self.interval == 1 or not self.n_inter:
            return key
        return (key + (self.interval - 1) * inter_total / self.n_inter) / self.interval

    def merge(self, other: "RunMetrics") -> None:
        self.intersection += other.intersection
        self.union += other.union
        self.frames += other.frames
        self.seconds_key += other.seconds_key
        self.seconds_inter += other.seconds_inter
        self.macs_key += other.macs_key
        self.macs_inter += other.macs_inter
        self.n_key += other.n_key
        self.n_inter += other.n_inter

    @property
    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where the union is empty."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), np.nan)

    @property
    def miou(self) -> float:
        present = self.union > 0
        if not present.any():
            return float("nan")
        return float(np.mean(self.intersection[present] / self.union[present]))

    @property
    def seconds_per_frame(self) -> float:
        return self._blend(self.seconds_key, self.seconds_inter)

    @property
    def macs_per_frame(self) -> float:
        """Blended MACs per frame at the configured keyframe interval."""
        return self._blend(self.macs_key, self.macs_inter)

    @property
    def macs_per_keyframe(self) -> float:
        return self.macs_key / self.n_key if self.n_key else float("nan")

    @property
    def macs_per_intermediate(self) -> float:
        return self.macs_inter / self.n_inter if self.n_inter else float("nan")
