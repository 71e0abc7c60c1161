"""Disparity prediction with cycle fusion, and disparity-to-depth conversion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .warp import LEFT_FROM_RIGHT, RIGHT_FROM_LEFT, warp


@dataclass(frozen=True)
class CameraCalib:
    baseline_bd: float  # metres
    focal_fl: float  # pixels

    def __post_init__(self):
        if not (self.baseline_bd > 0 and self.focal_fl > 0):
            raise ValueError("baseline and focal length must be strictly positive")


def cycle_forward(model, left: Tensor, right: Tensor, use_real_right: bool = False) -> dict:
    """Run the generators once; returns every intermediate map the losses need.

    Keys: ``d_r`` (fused right-view disparity), ``synth_right``, and for full
    cycles ``d_l`` (fused left-view disparity) and ``synth_left``. The second
    generator consumes the synthesised right view unless ``use_real_right``.
    """
    out = {}
    _, _, d_r = model.G_l(left, None if model.G_l.monocular else right)
    out["d_r"] = d_r
    out["synth_right"] = warp(d_r, left, RIGHT_FROM_LEFT)
    if model.G_r is not None:
        src_right = right if use_real_right else out["synth_right"]
        _, _, d_l = model.G_r(src_right, left)
        out["d_l"] = d_l
        out["synth_left"] = warp(d_l, src_right, LEFT_FROM_RIGHT)
    return out


def fuse_cycle(d_left: np.ndarray, d_right: np.ndarray) -> np.ndarray:
    """Mean of the left-view map and the right-view map aligned into the left view."""
    with no_grad():
        aligned = warp(Tensor(d_left, dtype=d_left.dtype), Tensor(d_right, dtype=d_right.dtype), LEFT_FROM_RIGHT)
    return (d_left + aligned.data) / 2


def predict_disparity(model, left, right=None, use_real_right: bool = False) -> np.ndarray:
    """Final disparity map [B,1,H,W].

    Full-cycle variants return the left-view fusion of both generators;
    half-cycle variants return the first generator's right-view map.
    """
    if model is None or not hasattr(model, "G_l"):
        raise ValueError("predict_disparity needs an initialised CycleModel")
    left = ad.as_tensor(left)
    if left.ndim == 3:
        left = Tensor(left.data[None])
    if right is not None:
        right = ad.as_tensor(right)
        if right.ndim == 3:
            right = Tensor(right.data[None])
    elif not model.G_l.monocular:
        raise ValueError("stereo variants need both views")
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = cycle_forward(model, left, right, use_real_right)
    finally:
        model.train(was_training)
    if "d_l" in out:
        return fuse_cycle(out["d_l"].data, out["d_r"].data)
    return out["d_r"].data.copy()


def disparity_to_depth(d: np.ndarray, calib: CameraCalib, cap_m: float) -> np.ndarray:
    """depth = b*f / max(d, b*f/cap), so depth never exceeds ``cap_m``."""
    if cap_m <= 0:
        raise ValueError("cap_m must be positive")
    if not (calib.baseline_bd > 0 and calib.focal_fl > 0):
        raise ValueError("calibration must be strictly positive")
    bf = calib.baseline_bd * calib.focal_fl
    d = np.asarray(d)
    floor = bf / cap_m
    d64 = d.astype(np.float64)
    depth = np.where(d64 <= floor, cap_m, bf / np.maximum(d64, floor))
    return np.minimum(depth, cap_m).astype(d.dtype if d.dtype.kind == "f" else np.float64)


__all__ = ["CameraCalib", "cycle_forward", "fuse_cycle", "predict_disparity", "disparity_to_depth",
           "RIGHT_FROM_LEFT"]
