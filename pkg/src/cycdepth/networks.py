"""Generators, patch discriminators and the per-variant model bundle."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import BatchNorm2d, Conv2d, Module, Parameter, UpConv2d, count_parameters

VARIANTS = ("mono", "stereo", "stereo+D", "full", "full+SE")


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    levels: int = 4
    base_channels: int = 16
    share_encoders: bool = False
    d_max_fraction: float = 0.3

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if self.base_channels < 4:
            raise ConfigError("base_channels must be >= 4")
        if not 0 < self.d_max_fraction <= 0.5:
            raise ConfigError("d_max_fraction must lie in (0, 0.5]")

    def d_max(self, width: int) -> float:
        return self.d_max_fraction * width


class Encoder(Module):
    """`levels` blocks of (3x3 stride-2 conv, ReLU, 3x3 conv, ReLU), doubling width."""

    def __init__(self, cfg: GeneratorConfig, rng, in_channels: int = 3):
        super().__init__()
        self.blocks = []
        cin = in_channels
        for lvl in range(cfg.levels):
            cout = cfg.base_channels * 2 ** lvl
            self.blocks.append(_EncBlock(cin, cout, rng))
            cin = cout
        self.channels = [cfg.base_channels * 2 ** lvl for lvl in range(cfg.levels)]

    def forward(self, x: Tensor) -> list:
        feats = []
        for blk in self.blocks:
            x = blk(x)
            feats.append(x)
        return feats


class _EncBlock(Module):
    def __init__(self, cin, cout, rng):
        super().__init__()
        self.down = Conv2d(cin, cout, 3, stride=2, pad=1, rng=rng)
        self.conv = Conv2d(cout, cout, 3, stride=1, pad=1, rng=rng)

    def forward(self, x):
        return ad.relu(self.conv(ad.relu(self.down(x))))


class _DecBlock(Module):
    def __init__(self, cin, cskip, cout, rng):
        super().__init__()
        self.up = UpConv2d(cin, cout, rng=rng)
        self.conv = Conv2d(cout + cskip, cout, 3, stride=1, pad=1, rng=rng)

    def forward(self, x, skip):
        x = ad.relu(self.up(x))
        return ad.relu(self.conv(ad.concat_channels(x, skip)))


class Decoder(Module):
    """Mirror of :class:`Encoder`; returns pre-sigmoid disparity logits.

    The skip at full resolution is the input image itself.
    """

    def __init__(self, enc_channels: list, rng, image_channels: int = 3):
        super().__init__()
        self.blocks = []
        L = len(enc_channels)
        out_channels = [max(enc_channels[0] // 2, 4)] + enc_channels[:-1]
        skip_channels = [image_channels] + enc_channels[:-1]
        cin = enc_channels[-1]
        for lvl in reversed(range(L)):
            self.blocks.append(_DecBlock(cin, skip_channels[lvl], out_channels[lvl], rng))
            cin = out_channels[lvl]
        self.head = Conv2d(cin, 1, 3, stride=1, pad=1, rng=rng)

    def forward(self, feats: list, image: Tensor) -> Tensor:
        skips = [image] + feats[:-1]
        x = feats[-1]
        for blk, skip in zip(self.blocks, reversed(skips)):
            x = blk(x, skip)
        return self.head(x)


class Generator(Module):
    """Two encoder-decoder branches, one per input view, plus 1x1-conv fusion.

    Each branch emits ``sigmoid(z) * d_max``. The fusion conv sees the two
    branch logits ``z = logit(d / d_max)`` (a fixed invertible rescaling of
    the disparities) and its output goes through the same bounded activation.
    With ``monocular=True`` there is a single branch and no fusion.
    """

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator, monocular: bool = False):
        super().__init__()
        self.cfg = cfg
        self.monocular = monocular
        self.enc_a = Encoder(cfg, rng)
        self.dec_a = Decoder(self.enc_a.channels, rng)
        if not monocular:
            self.enc_b = self.enc_a if cfg.share_encoders else Encoder(cfg, rng)
            self.dec_b = Decoder(self.enc_b.channels, rng)
            self.fuse_weight = Parameter(np.full((1, 2, 1, 1), 0.5))
            self.fuse_bias = Parameter(np.zeros(1))

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ConfigError(f"expected [B,3,H,W] image, got {x.shape}")
        m = 2 ** self.cfg.levels
        if x.shape[2] % m or x.shape[3] % m:
            raise ConfigError(f"image size {x.shape[2]}x{x.shape[3]} not divisible by {m}")

    def branch_logits(self, enc, dec, x):
        return dec(enc(x), x)

    def forward(self, view_a: Tensor, view_b: Optional[Tensor] = None):
        """Returns (d_a, d_b, d_fused); for a monocular generator d_b is None and d_fused is d_a."""
        self._check(view_a)
        d_max = self.cfg.d_max(view_a.shape[3])
        za = self.branch_logits(self.enc_a, self.dec_a, view_a)
        d_a = ad.scale(ad.sigmoid(za), d_max)
        if self.monocular:
            return d_a, None, d_a
        if view_b is None or view_b.shape != view_a.shape:
            raise ConfigError("stereo generator needs two views of equal shape")
        zb = self.branch_logits(self.enc_b, self.dec_b, view_b)
        d_b = ad.scale(ad.sigmoid(zb), d_max)
        zf = ad.conv2d(ad.concat_channels(za, zb), self.fuse_weight, self.fuse_bias)
        return d_a, d_b, ad.scale(ad.sigmoid(zf), d_max)


class Discriminator(Module):
    """Five 3x3 stride-2 conv stages (BN after all but the first) and a 1x1 logit head."""

    def __init__(self, rng: np.random.Generator, base_channels: int = 8, in_channels: int = 3):
        super().__init__()
        widths = [base_channels * 2 ** min(i, 3) for i in range(5)]
        self.convs, self.norms = [], []
        cin = in_channels
        for i, w in enumerate(widths):
            self.convs.append(Conv2d(cin, w, 3, stride=2, pad=1, rng=rng))
            if i > 0:
                self.norms.append(BatchNorm2d(w))
            cin = w
        self.head = Conv2d(cin, 1, 1, rng=rng)

    def forward(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[2] < 32 or image.shape[3] < 32:
            raise ConfigError(f"discriminator needs H, W >= 32, got {image.shape}")
        x = image
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i > 0:
                x = self.norms[i - 1](x)
            x = ad.leaky_relu(x, 0.2)
        return self.head(x)


def variant_flags(variant: str) -> dict:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    return {
        "monocular": variant == "mono",
        "discriminator": variant in ("stereo+D", "full", "full+SE"),
        "full_cycle": variant in ("full", "full+SE"),
        "share_encoders": variant == "full+SE",
    }


class CycleModel(Module):
    """All networks of one ablation variant.

    ``G_l`` predicts the right-view disparity from (I_l, I_r); in full-cycle
    variants ``G_r`` predicts the left-view disparity from (synthesised I_r, I_l).
    ``D_r`` / ``D_l`` judge right / left views.
    """

    def __init__(self, variant: str, gen_cfg: GeneratorConfig | None = None, seed: int = 0,
                 disc_channels: int = 8):
        super().__init__()
        flags = variant_flags(variant)
        gen_cfg = gen_cfg or GeneratorConfig()
        if flags["share_encoders"] and not gen_cfg.share_encoders:
            gen_cfg = GeneratorConfig(**{**{f.name: getattr(gen_cfg, f.name) for f in fields(gen_cfg)},
                                         "share_encoders": True})
        self.variant = variant
        self.flags = flags
        self.gen_cfg = gen_cfg
        self.disc_channels = disc_channels
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.G_l = Generator(gen_cfg, rng, monocular=flags["monocular"])
        self.D_r = Discriminator(rng, disc_channels) if flags["discriminator"] else None
        self.G_r = Generator(gen_cfg, rng) if flags["full_cycle"] else None
        self.D_l = Discriminator(rng, disc_channels) if flags["discriminator"] and flags["full_cycle"] else None

    @property
    def parts(self) -> dict:
        return {k: getattr(self, k) for k in ("G_l", "D_r", "G_r", "D_l") if getattr(self, k) is not None}

    def forward(self, *args, **kwargs):
        raise NotImplementedError("use the trainer or inference helpers")


__all__ = ["GeneratorConfig", "Generator", "Discriminator", "CycleModel", "ConfigError",
           "VARIANTS", "variant_flags", "count_parameters"]
