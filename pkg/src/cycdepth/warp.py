"""Horizontal bilinear warping driven by a disparity field.

``warp(d, src, +1)`` samples ``src`` at ``x + d`` and synthesises the right view
from the left image; ``warp(d, src, -1)`` samples at ``x - d`` and synthesises
(or aligns into) the left view. Out-of-frame coordinates are clamped to the
border column.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .gradcheck import check_gradients

RIGHT_FROM_LEFT = +1
LEFT_FROM_RIGHT = -1


def _check_sign(sign: int) -> int:
    if sign not in (1, -1):
        raise ValueError(f"warp direction must be +1 or -1, got {sign!r}")
    return sign


def sample_coords(disparity: np.ndarray, sign: int):
    """Clamped sampling positions and bilinear indices/weights for a [B,1,H,W] field."""
    W = disparity.shape[-1]
    x = np.arange(W, dtype=disparity.dtype)
    raw = x + sign * disparity
    xs = np.clip(raw, 0, W - 1)
    x0 = np.floor(xs).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    frac = (xs - x0).astype(disparity.dtype)
    inside = (raw > 0) & (raw < W - 1)
    return x0, x1, frac, inside


def warp(disparity: Tensor, source: Tensor, sign: int) -> Tensor:
    sign = _check_sign(sign)
    if disparity.ndim != 4 or source.ndim != 4 or disparity.shape[1] != 1:
        raise ShapeError(f"warp: expected [B,1,H,W] disparity, got {disparity.shape}")
    B, C, H, W = source.shape
    if disparity.shape != (B, 1, H, W):
        raise ShapeError(f"warp: disparity {disparity.shape} does not match source {source.shape}")
    src = source.data
    x0, x1, frac, inside = sample_coords(disparity.data, sign)
    x0c = np.broadcast_to(x0, (B, C, H, W))
    x1c = np.broadcast_to(x1, (B, C, H, W))
    v0 = np.take_along_axis(src, x0c, axis=3)
    v1 = np.take_along_axis(src, x1c, axis=3)
    out = v0 + frac * (v1 - v0)
    dt = src.dtype

    def backward_fn(g):
        gd = None
        if disparity.requires_grad:
            gd = (g * (v1 - v0)).sum(axis=1, keepdims=True) * (sign * inside)
            gd = gd.astype(dt)
        gs = None
        if source.requires_grad:
            base = (np.arange(B * C * H, dtype=np.int64) * W).reshape(B, C, H, 1)
            idx = np.concatenate([(base + x0c).ravel(), (base + x1c).ravel()])
            wts = np.concatenate([(g * (1 - frac)).ravel(), (g * frac).ravel()])
            gs = np.bincount(idx, weights=wts, minlength=B * C * H * W).astype(dt).reshape(B, C, H, W)
        return gd, gs

    return ad.custom_op(out.astype(dt), (disparity, source), backward_fn)


def _avoid_kinks(d: np.ndarray, sign: int, margin: float, rng: np.random.Generator) -> np.ndarray:
    """Resample entries whose sampling coordinate sits near an integer or the frame edge."""
    W = d.shape[-1]
    x = np.arange(W)
    for _ in range(1000):
        raw = x + sign * d
        near_int = np.abs(raw - np.round(raw)) < margin
        if not near_int.any():
            return d
        d = np.where(near_int, rng.uniform(0.0, 2.0, size=d.shape), d)
    raise RuntimeError("could not draw kink-free disparities")


def warp_grad_check(seed: int, shape=(1, 1, 4, 6), sign: int = RIGHT_FROM_LEFT, h: float = 1e-4) -> dict:
    """Finite-difference check of d mean(warp(d, I)) / d(d, I) on random inputs.

    Runs in float64 so that the comparison measures the derivative formulas,
    not float32 rounding in the difference quotient.
    """
    rng = np.random.default_rng(seed)
    B, C, H, W = shape
    disp = _avoid_kinks(rng.uniform(0.0, 2.0, size=(B, 1, H, W)), sign, 10 * h, rng)
    d = Tensor(disp, requires_grad=True, dtype=np.float64)
    img = Tensor(rng.uniform(0.0, 1.0, size=shape), requires_grad=True, dtype=np.float64)

    def fn():
        return ad.mean(warp(d, img, sign))

    err_d = check_gradients(fn, [d], h)
    err_i = check_gradients(fn, [img], h)
    return {"seed": seed, "max_rel_err_disparity": err_d, "max_rel_err_source": err_i,
            "max_rel_err": max(err_d, err_i)}
