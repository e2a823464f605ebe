"""Segmentation metrics: pAcc, per-class IoU, seen/unseen mIoU, hIoU, proposal recall."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masks import MaskSet
from .numcore import ShapeError

IGNORE = 255


class DegenerateInputWarning(UserWarning):
    """A metric was evaluated on empty input and returned its defined fallback."""


@dataclass
class SegLabelMap:
    labels: np.ndarray
    ignore: int = IGNORE

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ShapeError(f"label map must be 2-D, got {self.labels.shape}")

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    def valid(self) -> np.ndarray:
        return self.labels != self.ignore


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, SegLabelMap) else np.asarray(x, dtype=np.int64)


def confusion_matrix(pred, gt, num_classes: int, ignore: int = IGNORE) -> np.ndarray:
    """``cm[g, p]`` counts pixels with ground truth ``g`` predicted as ``p``."""
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    keep = g != ignore
    idx = g[keep] * num_classes + p[keep]
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


@dataclass
class IoUResult:
    iou: dict            # class id -> IoU, only classes present in pred or gt
    pacc: float
    valid_pixels: int
    empty: bool = False


def iou_from_confusion(cm: np.ndarray, classes=None) -> IoUResult:
    classes = range(cm.shape[0]) if classes is None else classes
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    total = int(cm.sum())
    if total == 0:
        return IoUResult({}, 0.0, 0, empty=True)
    iou = {}
    for c in classes:
        denom = tp[c] + fp[c] + fn[c]
        if denom > 0:
            iou[int(c)] = float(tp[c] / denom)
    return IoUResult(iou, float(tp.sum() / total), total)


def confusion_and_iou(pred, gt, classes, ignore: int = IGNORE) -> IoUResult:
    """Per-class IoU and pixel accuracy; ignore pixels are excluded everywhere."""
    classes = list(classes)
    n = max(classes) + 1
    p = _labels(pred)
    g = _labels(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    if ((p < 0) | (p >= n)).any():
        raise ValueError(f"prediction contains labels outside [0, {n})")
    res = iou_from_confusion(confusion_matrix(p, g, n, ignore), classes)
    if res.empty:
        warnings.warn("all pixels are ignore; returning an empty report", DegenerateInputWarning)
    return res


def hiou(miou_seen: float, miou_unseen: float) -> float:
    """Harmonic mean of seen and unseen mIoU (0 when both are 0)."""
    s = miou_seen + miou_unseen
    return 0.0 if s == 0 else 2.0 * miou_seen * miou_unseen / s


def mask_iou_table(proposals: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pairwise IoU between boolean ``[P, H, W]`` and ``[G, H, W]`` stacks -> ``[G, P]``."""
    a = proposals.reshape(proposals.shape[0], -1).astype(np.float64)
    b = gt.reshape(gt.shape[0], -1).astype(np.float64)
    inter = b @ a.T
    union = b.sum(1)[:, None] + a.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def best_proposal_iou(proposals: MaskSet, gt: MaskSet) -> np.ndarray:
    """Best IoU over all proposals for each non-empty gt segment."""
    g = gt.numpy() >= 0.5
    g = g[g.reshape(g.shape[0], -1).any(axis=1)]
    if len(g) == 0:
        return np.zeros(0)
    p = proposals.binarized(g.shape[1:])
    return mask_iou_table(p, g).max(axis=1)


def recall_at_iou(proposals: MaskSet, gt: MaskSet, threshold: float) -> float:
    """Fraction of gt segments whose best proposal (binarized at 0.5) reaches ``threshold`` IoU.

    Proposals are resampled to the gt grid. Each gt segment is judged
    independently, so one proposal may cover several. Empty gt gives 1.0.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold {threshold} must lie in (0, 1)")
    best = best_proposal_iou(proposals, gt)
    if best.size == 0:
        warnings.warn("no ground-truth segments; recall defined as 1.0", DegenerateInputWarning)
        return 1.0
    return float((best >= threshold).mean())


@dataclass
class EvalReport:
    pacc: float
    iou: dict
    miou_seen: float
    miou_unseen: float
    hiou: float
    recall_at: dict = field(default_factory=dict)          # threshold -> recall (all segments)
    recall_seen_at: dict = field(default_factory=dict)
    recall_unseen_at: dict = field(default_factory=dict)

    def records(self) -> list[tuple[str, float]]:
        rows = [("pAcc", self.pacc), ("mIoU_seen", self.miou_seen),
                ("mIoU_unseen", self.miou_unseen), ("hIoU", self.hiou)]
        rows += [(f"IoU_{c}", v) for c, v in sorted(self.iou.items())]
        for name, table in (("recall", self.recall_at), ("recall_seen", self.recall_seen_at),
                            ("recall_unseen", self.recall_unseen_at)):
            rows += [(f"{name}@{int(round(t * 100))}", v) for t, v in sorted(table.items())]
        return rows

    def to_text(self) -> str:
        return "".join(f"{k}={v:.6f}\n" for k, v in self.records())

    def write(self, path: str | Path) -> None:
        """Write the machine-readable record file (``name,value`` per line)."""
        Path(path).write_text("".join(f"{k},{v!r}\n" for k, v in self.records()))

    @classmethod
    def read_records(cls, path: str | Path) -> dict[str, float]:
        out = {}
        for line in Path(path).read_text().splitlines():
            k, _, v = line.partition(",")
            out[k] = float(v)
        return out


def build_report(cm: np.ndarray, seen: list[int], unseen: list[int], recall_at=None,
                 recall_seen_at=None, recall_unseen_at=None) -> EvalReport:
    res = iou_from_confusion(cm)
    ms = [res.iou[c] for c in seen if c in res.iou]
    mu = [res.iou[c] for c in unseen if c in res.iou]
    miou_s = float(np.mean(ms)) if ms else 0.0
    miou_u = float(np.mean(mu)) if mu else 0.0
    return EvalReport(res.pacc, res.iou, miou_s, miou_u, hiou(miou_s, miou_u),
                      dict(recall_at or {}), dict(recall_seen_at or {}), dict(recall_unseen_at or {}))
