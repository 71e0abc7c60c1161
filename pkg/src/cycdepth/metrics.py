"""Standard depth-evaluation metrics with masking, capping and optional crop."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

MIN_DEPTH = 1e-3
METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")


class EmptyMaskError(ValueError):
    pass


@dataclass
class EvalConfig:
    cap_m: float = 80.0
    crop: Optional[tuple] = None  # (top, bottom, left, right) as fractions of H and W
    evaluate_on: str = "depth"  # or "disparity"
    pooling: str = "pixel"  # or "image"

    def __post_init__(self):
        if self.cap_m <= 0:
            raise ValueError("cap_m must be positive")
        if self.crop is not None:
            t, b, l, r = self.crop
            if not (0 <= t < b <= 1 and 0 <= l < r <= 1):
                raise ValueError(f"invalid crop {self.crop}")
        if self.evaluate_on not in ("depth", "disparity"):
            raise ValueError("evaluate_on must be 'depth' or 'disparity'")
        if self.pooling not in ("pixel", "image"):
            raise ValueError("pooling must be 'pixel' or 'image'")


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float
    valid_pixel_count: int

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def format_line(self) -> str:
        parts = [f"{k}={getattr(self, k):.6g}" for k in METRIC_NAMES]
        return " ".join(parts + [f"valid_pixel_count={self.valid_pixel_count}"])

    @classmethod
    def parse_line(cls, line: str) -> "MetricsReport":
        vals = dict(kv.split("=", 1) for kv in line.split())
        return cls(**{k: float(vals[k]) for k in METRIC_NAMES}, valid_pixel_count=int(vals["valid_pixel_count"]))


def valid_mask(gt: np.ndarray, cfg: EvalConfig) -> np.ndarray:
    mask = gt > 0
    if cfg.crop is not None:
        H, W = gt.shape[-2:]
        t, b, l, r = cfg.crop
        crop = np.zeros((H, W), bool)
        crop[int(round(t * H)):int(round(b * H)), int(round(l * W)):int(round(r * W))] = True
        mask &= crop
    return mask


def _accumulate(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel sums needed by the metrics, so pooled sets can be merged by addition."""
    diff = pred - gt
    ratio = np.maximum(gt / pred, pred / gt)
    logdiff = np.log(pred) - np.log(gt)
    return np.array([
        pred.size,
        np.sum(np.abs(diff) / gt),
        np.sum(diff ** 2 / gt),
        np.sum(diff ** 2),
        np.sum(logdiff ** 2),
        np.sum(ratio < 1.25),
        np.sum(ratio < 1.25 ** 2),
        np.sum(ratio < 1.25 ** 3),
    ], dtype=np.float64)


def _finish(acc: np.ndarray) -> MetricsReport:
    n = acc[0]
    return MetricsReport(
        abs_rel=acc[1] / n, sq_rel=acc[2] / n, rmse=float(np.sqrt(acc[3] / n)), rmse_log=float(np.sqrt(acc[4] / n)),
        a1=acc[5] / n, a2=acc[6] / n, a3=acc[7] / n, valid_pixel_count=int(n),
    )


def masked_values(pred: np.ndarray, gt: np.ndarray, cfg: EvalConfig) -> tuple:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = valid_mask(gt, cfg)
    p = np.clip(np.asarray(pred, np.float64)[mask], MIN_DEPTH, cfg.cap_m)
    g = np.clip(np.asarray(gt, np.float64)[mask], MIN_DEPTH, cfg.cap_m)
    return p, g


def compute_metrics(pred: np.ndarray, gt: np.ndarray, cfg: EvalConfig | None = None) -> MetricsReport:
    """Metrics over pixels with gt > 0 (inside the crop), both maps clamped to [1e-3, cap]."""
    cfg = cfg or EvalConfig()
    p, g = masked_values(pred, gt, cfg)
    if p.size == 0:
        raise EmptyMaskError("no valid ground-truth pixels")
    return _finish(_accumulate(p, g))


class MetricsAccumulator:
    """Pools metrics over many images, either per pixel or per image."""

    def __init__(self, cfg: EvalConfig):
        self.cfg = cfg
        self._acc = np.zeros(8)
        self._per_image = []

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        p, g = masked_values(pred, gt, self.cfg)
        if p.size == 0:
            return
        acc = _accumulate(p, g)
        self._acc += acc
        self._per_image.append(_finish(acc))

    def report(self) -> MetricsReport:
        if self._acc[0] == 0:
            raise EmptyMaskError("no valid ground-truth pixels in the whole set")
        if self.cfg.pooling == "pixel":
            return _finish(self._acc)
        reps = self._per_image
        avg = {k: float(np.mean([getattr(r, k) for r in reps])) for k in METRIC_NAMES}
        return MetricsReport(**avg, valid_pixel_count=int(self._acc[0]))


def evaluate_dataset(model, dataset, cfg: EvalConfig | None = None, batch_size: int = 8,
                     use_real_right: bool = False) -> MetricsReport:
    """Predict every sample of ``dataset`` and pool the metrics.

    Depth mode converts with each sample's calibration; disparity mode
    compares the predicted and ground-truth disparities directly.
    """
    from .inference import predict_disparity

    cfg = cfg or EvalConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    acc = MetricsAccumulator(cfg)
    for start in range(0, len(dataset), batch_size):
        samples = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        left = np.stack([s.left for s in samples])
        right = np.stack([s.right for s in samples])
        pred = predict_disparity(model, left, right, use_real_right=use_real_right)
        for s, p in zip(samples, pred):
            if s.gt_disparity is None:
                raise ValueError("sample without ground truth")
            acc.add(*_to_eval_space(p, s, cfg))
    return acc.report()


def _to_eval_space(pred_disp: np.ndarray, sample, cfg: EvalConfig) -> tuple:
    from .inference import disparity_to_depth

    gt = sample.gt_disparity
    if cfg.evaluate_on == "disparity":
        return pred_disp, gt
    if sample.calib is None:
        raise ValueError("depth evaluation needs camera calibration")
    gt_depth = np.where(gt > 0, disparity_to_depth(gt, sample.calib, cfg.cap_m), 0)
    return disparity_to_depth(pred_disp, sample.calib, cfg.cap_m), gt_depth
