"""Reconstruction, adversarial and cycle-consistency objectives."""
from __future__ import annotations

from dataclasses import dataclass, fields

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .warp import LEFT_FROM_RIGHT, warp

PROB_EPS = 1e-7


@dataclass
class LossWeights:
    gamma1: float = 1.0  # reconstruction
    gamma2: float = 0.1  # adversarial
    gamma3: float = 0.1  # consistency

    def __post_init__(self):
        if min(self.gamma1, self.gamma2, self.gamma3) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    rec_right: float = 0.0
    rec_left: float = 0.0
    gan_g_right: float = 0.0
    gan_g_left: float = 0.0
    gan_d_right: float = 0.0
    gan_d_left: float = 0.0
    consistency: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def rec_loss(target: Tensor, synthesized: Tensor) -> Tensor:
    """Mean absolute photometric error."""
    if target.shape != synthesized.shape:
        raise ShapeError(f"rec_loss: {target.shape} vs {synthesized.shape}")
    return ad.mean(ad.abs(ad.sub(target, synthesized)))


def _log_prob(logits: Tensor) -> Tensor:
    return ad.log(ad.clip(ad.sigmoid(logits), PROB_EPS, 1 - PROB_EPS))


def _log_one_minus_prob(logits: Tensor) -> Tensor:
    p = ad.clip(ad.sigmoid(logits), PROB_EPS, 1 - PROB_EPS)
    return ad.log(ad.add_scalar(ad.scale(p, -1.0), 1.0))


def gan_d_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """-E[log D(real)] - E[log(1 - D(fake))]; pass detached fakes."""
    if real_logits.shape != fake_logits.shape:
        raise ShapeError("real and fake logit grids differ in shape")
    return ad.scale(ad.add(ad.mean(_log_prob(real_logits)), ad.mean(_log_one_minus_prob(fake_logits))), -1.0)


def gan_g_loss(fake_logits: Tensor) -> Tensor:
    """Non-saturating generator loss -E[log D(fake)]."""
    return ad.scale(ad.mean(_log_prob(fake_logits)), -1.0)


def align_right_to_left(d_left: Tensor, d_right: Tensor) -> Tensor:
    """Resample the right-view disparity into the left view using ``d_left``."""
    return warp(d_left, d_right, LEFT_FROM_RIGHT)


def consistency_loss(d_left: Tensor, d_right: Tensor) -> Tensor:
    if d_left.shape != d_right.shape:
        raise ShapeError(f"consistency_loss: {d_left.shape} vs {d_right.shape}")
    return ad.mean(ad.abs(ad.sub(d_left, align_right_to_left(d_left, d_right))))


def total_generator_loss(parts: dict, w: LossWeights, mode: str = "full"):
    """Weighted generator objective from per-term losses (Tensors or floats).

    ``parts`` uses the :class:`LossBreakdown` field names; missing terms count
    as zero. ``mode="half"`` uses only the right-view terms.
    """
    if min(w.gamma1, w.gamma2, w.gamma3) < 0:
        raise ValueError("loss weights must be nonnegative")
    if mode not in ("half", "full"):
        raise ValueError(f"mode must be 'half' or 'full', got {mode!r}")
    if mode == "half":
        keys = (("rec_right", w.gamma1), ("gan_g_right", w.gamma2))
    else:
        keys = (("rec_right", w.gamma1), ("rec_left", w.gamma1), ("gan_g_right", w.gamma2),
                ("gan_g_left", w.gamma2), ("consistency", w.gamma3))
    total = 0.0
    for key, weight in keys:
        term = parts.get(key)
        if term is None or weight == 0:
            continue
        total = total + term * weight
    return total
