"""Confusion-matrix based segmentation metrics (OA, precision, recall, F1, IoU)."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UndefinedMetricError


def _as_numpy(a):
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.asarray(a)


def _ratio(num, den):
    return num / den if den else 0.0


class ConfusionMatrix:
    """C x C pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes):
            raise ShapeError(f"counts must be {num_classes}x{num_classes}, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        self.counts = counts

    def update(self, pred, target, ignore_index=255):
        pred, target = _as_numpy(pred), _as_numpy(target)
        if pred.shape != target.shape:
            raise ShapeError(f"pred {pred.shape} and target {target.shape} differ in shape")
        keep = target != ignore_index if ignore_index is not None else np.ones(target.shape, bool)
        t = target[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        c = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= c or p.min() < 0 or p.max() >= c):
            raise ValueError(f"class indices must lie in [0, {c})")
        self.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def tp_fp_fn(self, c):
        tp = int(self.counts[c, c])
        return tp, int(self.counts[:, c].sum()) - tp, int(self.counts[c, :].sum()) - tp

    def is_defined(self, c):
        """False when class ``c`` appears in neither the truth nor the prediction."""
        tp, fp, fn = self.tp_fp_fn(c)
        return tp + fp + fn > 0

    def undefined_classes(self):
        return [c for c in range(self.num_classes) if not self.is_defined(c)]

    def overall_accuracy(self):
        if self.total == 0:
            raise UndefinedMetricError("overall accuracy of an empty confusion matrix")
        return float(np.trace(self.counts)) / self.total

    def precision_recall_f1(self, c):
        """Zero denominators yield 0; see :meth:`is_defined`."""
        self._check_class(c)
        tp, fp, fn = self.tp_fp_fn(c)
        return _ratio(tp, tp + fp), _ratio(tp, tp + fn), _ratio(2 * tp, 2 * tp + fp + fn)

    def iou(self, c):
        self._check_class(c)
        tp, fp, fn = self.tp_fp_fn(c)
        return _ratio(tp, tp + fp + fn)

    def _mean(self, fn, mode):
        if mode not in ("include", "exclude"):
            raise ValueError(f"mode must be 'include' or 'exclude', got {mode!r}")
        classes = range(self.num_classes)
        if mode == "exclude":
            classes = [c for c in classes if self.is_defined(c)]
            if not classes:
                raise UndefinedMetricError("no class is defined")
        return float(np.mean([fn(c) for c in classes]))

    def mean_iou(self, mode="include"):
        return self._mean(self.iou, mode)

    def mean_f1(self, mode="include"):
        return self._mean(lambda c: self.precision_recall_f1(c)[2], mode)

    def _check_class(self, c):
        if not 0 <= c < self.num_classes:
            raise IndexError(f"class index {c} out of range for {self.num_classes} classes")

    def report(self, class_names=None, mode="include") -> "MetricReport":
        names = list(class_names or [str(i) for i in range(self.num_classes)])
        return MetricReport(
            oa=self.overall_accuracy(),
            mean_f1=self.mean_f1(mode),
            miou=self.mean_iou(mode),
            iou={n: self.iou(i) for i, n in enumerate(names)},
            f1={n: self.precision_recall_f1(i)[2] for i, n in enumerate(names)},
            undefined=[names[i] for i in self.undefined_classes()],
        )


@dataclass
class MetricReport:
    oa: float
    mean_f1: float
    miou: float
    iou: dict = field(default_factory=dict)
    f1: dict = field(default_factory=dict)
    undefined: list = field(default_factory=list)

    def to_text(self) -> str:
        """Flat ``key = value`` block, values as percentages with 2 decimals."""
        lines = [f"OA = {100 * self.oa:.2f}",
                 f"mean_F1 = {100 * self.mean_f1:.2f}",
                 f"mIoU = {100 * self.miou:.2f}"]
        lines += [f"IoU.{name} = {100 * v:.2f}" for name, v in self.iou.items()]
        lines += [f"F1.{name} = {100 * v:.2f}" for name, v in self.f1.items()]
        if self.undefined:
            lines.append("undefined = " + ",".join(self.undefined))
        return "\n".join(lines) + "\n"

    def as_dict(self):
        return {"OA": self.oa, "meanF1": self.mean_f1, "mIoU": self.miou}
