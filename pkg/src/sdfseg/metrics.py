"""Segmentation quality metrics: SAD, MSE, mIoU, pixel accuracy.

SAD and MSE follow the matting-literature scaling (sum/1000 and
mean*1000 respectively); both scales are arguments so either convention
can be reported.  mIoU and accuracy are computed on thresholded
predictions and are scale-free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError

DEFAULT_THRESHOLD = 0.5
SAD_SCALE = 1e-3
MSE_SCALE = 1e3


@dataclass
class EvalReport:
    sad: list[float]
    mse: list[float]
    iou: list[float]
    acc: list[float]
    mean_sad: float = field(init=False)
    mean_mse: float = field(init=False)
    mean_iou: float = field(init=False)
    mean_acc: float = field(init=False)

    def __post_init__(self):
        self.mean_sad = float(np.mean(self.sad))
        self.mean_mse = float(np.mean(self.mse))
        self.mean_iou = float(np.mean(self.iou))
        self.mean_acc = float(np.mean(self.acc))

    @property
    def view_count(self) -> int:
        return len(self.sad)

    def to_dict(self) -> dict:
        return {
            "view_count": self.view_count,
            "mean": {"SAD": self.mean_sad, "MSE": self.mean_mse,
                     "mIoU": self.mean_iou, "Acc": self.mean_acc},
            "per_view": [
                {"view": i, "SAD": self.sad[i], "MSE": self.mse[i],
                 "IoU": self.iou[i], "Acc": self.acc[i]}
                for i in range(self.view_count)
            ],
        }

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def to_table(self) -> str:
        lines = [f"{'view':>6} {'SAD':>10} {'MSE':>10} {'IoU':>8} {'Acc':>8}"]
        for i in range(self.view_count):
            lines.append(f"{i:>6} {self.sad[i]:>10.4f} {self.mse[i]:>10.4f} "
                         f"{self.iou[i]:>8.4f} {self.acc[i]:>8.4f}")
        lines.append(f"{'mean':>6} {self.mean_sad:>10.4f} {self.mean_mse:>10.4f} "
                     f"{self.mean_iou:>8.4f} {self.mean_acc:>8.4f}")
        return "\n".join(lines)


def evaluate(pred_alpha: list[np.ndarray], gt_mask: list[np.ndarray],
             threshold: float = DEFAULT_THRESHOLD, *,
             sad_scale: float = SAD_SCALE, mse_scale: float = MSE_SCALE) -> EvalReport:
    """Score predicted alpha maps against binary ground-truth masks."""
    if len(pred_alpha) != len(gt_mask):
        raise ContractError(f"view count mismatch: {len(pred_alpha)} predictions "
                            f"vs {len(gt_mask)} ground-truth masks")
    sad, mse, iou, acc = [], [], [], []
    for i, (a, m) in enumerate(zip(pred_alpha, gt_mask)):
        a = np.asarray(a, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        if a.shape != m.shape:
            raise ContractError(f"view {i}: shape mismatch {a.shape} vs {m.shape}")
        diff = a - m
        sad.append(float(np.abs(diff).sum()) * sad_scale)
        mse.append(float((diff * diff).mean()) * mse_scale)
        pred = a >= threshold
        gt = m >= 0.5
        inter = float(np.logical_and(pred, gt).sum())
        union = float(np.logical_or(pred, gt).sum())
        iou.append(inter / union if union > 0 else 1.0)
        acc.append(float((pred == gt).mean()))
    return EvalReport(sad=sad, mse=mse, iou=iou, acc=acc)
