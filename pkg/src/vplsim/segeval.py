"""Segmentation scoring: confusion accumulation, per-class IoU, mIoU.

Counts are exact integers; rows are ground truth, columns prediction.
Pixels whose ground-truth value equals the ignore index contribute
nothing.  Classes never seen in ground truth or prediction have an
undefined IoU and are excluded from the mean (not scored as zero).
"""

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

DEFAULT_N_CLASSES = 19
IGNORE_INDEX = 255


@dataclass
class ConfusionMatrix:
    n_classes: int = DEFAULT_N_CLASSES
    ignore_index: int = IGNORE_INDEX
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError(f"need at least one class, got {self.n_classes}")
        if 0 <= self.ignore_index < self.n_classes:
            raise ValueError("ignore_index must fall outside the class range")
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        else:
            c = np.asarray(self.counts)
            if c.shape != (self.n_classes, self.n_classes):
                raise ValueError(f"counts must be {self.n_classes}x{self.n_classes}")
            if c.dtype.kind not in "iu" or np.any(c < 0):
                raise ValueError("counts must be non-negative integers")
            self.counts = c.astype(np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("class counts differ")
        self.counts += other.counts
        return self


def accumulate(conf: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    """Add one prediction/ground-truth pair into the confusion matrix."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.dtype.kind not in "iu" or gt.dtype.kind not in "iu":
        raise ValueError("label maps must be integer typed")
    n = conf.n_classes
    valid = gt != conf.ignore_index
    g = gt[valid]
    p = pred[valid]
    if g.size and (g.min() < 0 or g.max() >= n):
        raise ValueError(f"ground-truth label outside [0, {n}) and not ignore")
    if p.size and (p.min() < 0 or p.max() >= n):
        raise ValueError(f"predicted label outside [0, {n})")
    binned = np.bincount(n * g.astype(np.int64) + p.astype(np.int64), minlength=n * n)
    conf.counts += binned.reshape(n, n)
    return conf


def miou(conf: ConfusionMatrix):
    """Per-class IoU (NaN where undefined) and the mean over defined classes."""
    c = conf.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    denom = tp + fp + fn
    defined = denom > 0
    if not np.any(defined):
        raise ValueError("no class has any ground-truth or predicted pixels")
    iou = np.full(conf.n_classes, np.nan)
    iou[defined] = tp[defined] / denom[defined]
    return iou, float(iou[defined].mean())


def load_label_image(path) -> np.ndarray:
    """Read an 8- or 16-bit single-channel label image."""
    with Image.open(path) as im:
        if im.mode in ("L", "P"):
            arr = np.asarray(im.convert("L"), dtype=np.int64)
        elif im.mode in ("I", "I;16"):
            arr = np.asarray(im, dtype=np.int64)
        else:
            raise ValueError(f"{path}: expected a single-channel label image, got mode {im.mode}")
    return arr


def report(conf: ConfusionMatrix, class_names=None) -> str:
    """Human-readable per-class IoU table plus the mean."""
    iou, mean = miou(conf)
    if class_names is None:
        class_names = [f"class {i}" for i in range(conf.n_classes)]
    if len(class_names) != conf.n_classes:
        raise ValueError("one name per class required")
    width = max(len(n) for n in class_names)
    lines = []
    for name, v in zip(class_names, iou):
        val = "   n/a" if np.isnan(v) else f"{100 * v:6.2f}"
        lines.append(f"{name:<{width}}  {val}")
    lines.append(f"{'mIoU':<{width}}  {100 * mean:6.2f}")
    return "\n".join(lines) + "\n"


def summary(conf: ConfusionMatrix) -> dict:
    """Machine-readable scoring summary."""
    iou, mean = miou(conf)
    return {
        "n_classes": conf.n_classes,
        "ignore_index": conf.ignore_index,
        "pixels": conf.total,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "miou": mean,
    }
