"""Stereo samples: synthetic layered scenes, file I/O, resizing, augmentation, batching.

Synthetic scenes are stacks of fronto-parallel textured rectangles over an
infinite background plane, each with an integer disparity. The left view is
rendered directly; in the right view every layer is shifted left by its
disparity, so right-view content at ``x`` matches left-view content at
``x + d``. Ground truth is therefore exact, including occlusions.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .inference import CameraCalib

# ---------------------------------------------------------------------------
# samples and scene description
# ---------------------------------------------------------------------------


@dataclass
class StereoSample:
    left: np.ndarray  # [3,H,W] float32 in [0,1]
    right: np.ndarray
    gt_disparity: Optional[np.ndarray] = None  # [1,H,W], left view, 0 = invalid
    occlusion_mask: Optional[np.ndarray] = None  # [1,H,W] bool, left pixels unseen in the right view
    calib: Optional[CameraCalib] = None
    gt_disparity_right: Optional[np.ndarray] = None  # [1,H,W], right view
    occlusion_mask_right: Optional[np.ndarray] = None  # right pixels unseen in the left view

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"left {self.left.shape} and right {self.right.shape} differ")


@dataclass
class SyntheticSceneSpec:
    width: int = 128
    height: int = 64
    num_layers: int = 6
    disparity_range: Optional[tuple] = None  # defaults to (2, W // 4)
    background_disparity: Optional[int] = None  # defaults to the low end of the range
    texture_scale: float = 4.0  # texture cell size in pixels per square root of disparity
    haze: float = 0.3  # contrast falloff with distance
    horizon: float = 0.35  # fraction of the height
    shading: float = 0.4  # brightness change of the horizontal ramp across a layer
    object_size: float = 0.35  # growth of layer height with nearness, as a fraction of the height

    def resolved_range(self) -> tuple:
        lo, hi = self.disparity_range if self.disparity_range is not None else (2, self.width // 4)
        return int(lo), int(hi)

    def validate(self) -> None:
        lo, hi = self.resolved_range()
        if self.width < 4 or self.height < 4:
            raise ValueError("scene must be at least 4x4")
        if not 0 <= lo <= hi:
            raise ValueError(f"bad disparity range ({lo}, {hi})")
        if hi > self.width / 2:
            raise ValueError(f"disparity {hi} exceeds half the width ({self.width})")
        if self.num_layers < 0:
            raise ValueError("num_layers must be nonnegative")


@dataclass
class _Layer:
    disparity: int
    x0: int
    x1: int  # exclusive
    y0: int
    y1: int
    texture: "_Texture"
    full_frame: bool = False

    def covers_left(self, x: np.ndarray) -> np.ndarray:
        return np.ones(x.shape, bool) if self.full_frame else (x >= self.x0) & (x < self.x1)


HAZE_COLOR = np.array([0.62, 0.66, 0.72])


class _Texture:
    """Smooth value noise plus a horizontal shading ramp across the layer, faded towards a haze colour.

    The ramp keeps the photometric error monotone over shifts comparable to
    the layer width, not just the noise cell size.
    """

    def __init__(self, rng: np.random.Generator, cell: float, contrast: float, extent: int,
                 span: float, ramp: float):
        self.cells = (max(cell, 1.0), max(cell / 2, 1.0))
        self.amps = (1.0, 0.5)
        self.lattices = [rng.uniform(-1, 1, size=(int(extent / c) + 3, int(extent / c) + 3, 3))
                         for c in self.cells]
        self.base = rng.uniform(0.2, 0.8, size=3)
        self.slope = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0, size=3) * ramp / max(span, 1.0)
        self.span = span
        self.contrast = contrast

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """RGB values [3, *u.shape] at integer layer-local coordinates (u, v) >= 0."""
        acc = np.zeros(u.shape + (3,))
        for cell, amp, lat in zip(self.cells, self.amps, self.lattices):
            gu, gv = u / cell, v / cell
            iu, iv = np.floor(gu).astype(int), np.floor(gv).astype(int)
            fu, fv = gu - iu, gv - iv
            fu, fv = fu * fu * (3 - 2 * fu), fv * fv * (3 - 2 * fv)
            n = lat.shape[0] - 2
            iu, iv = np.clip(iu, 0, n), np.clip(iv, 0, n)
            c00, c01 = lat[iv, iu], lat[iv, iu + 1]
            c10, c11 = lat[iv + 1, iu], lat[iv + 1, iu + 1]
            top = c00 + (c01 - c00) * fu[..., None]
            bot = c10 + (c11 - c10) * fu[..., None]
            acc += amp * (top + (bot - top) * fv[..., None])
        shade = self.slope * (u[..., None] - self.span / 2)
        color = np.clip(self.base + 0.3 * acc + shade, 0, 1)
        color = HAZE_COLOR * (1 - self.contrast) + color * self.contrast
        return np.moveaxis(color, -1, 0)


def _build_layers(rng: np.random.Generator, spec: SyntheticSceneSpec) -> list:
    W, H = spec.width, spec.height
    lo, hi = spec.resolved_range()
    bg_d = lo if spec.background_disparity is None else int(spec.background_disparity)
    extent = 2 * (W + H + hi) + 8

    def texture(d, span):
        contrast = float(np.exp(-spec.haze * max(lo, 1) / max(d, 1)))
        return _Texture(rng, spec.texture_scale * np.sqrt(max(d, 1)), contrast, extent, span, spec.shading)

    layers = [_Layer(bg_d, 0, W, 0, H, texture(bg_d, W + hi), full_frame=True)]
    disps = np.sort(rng.integers(lo, hi + 1, size=spec.num_layers))
    horizon = spec.horizon * H
    for d in disps:
        t = (d - lo) / max(hi - lo, 1)
        h = max(2, int(round(H * (0.12 + spec.object_size * t) * rng.uniform(0.8, 1.2))))
        w = max(2, int(round(W * (0.06 + spec.object_size * t / 2) * rng.uniform(0.7, 1.4))))
        bottom = int(round(horizon + t * (H - horizon) * 1.1 + rng.uniform(-0.05, 0.05) * H))
        x0 = int(rng.integers(-w // 4, max(W - (3 * w) // 4, 1) + 1))
        layers.append(_Layer(int(d), x0, x0 + w, bottom - h, bottom, texture(int(d), w)))
    return layers


def _render(layers: Sequence[_Layer], W: int, H: int, view: str):
    """Painter's algorithm; returns image [3,H,W] and per-pixel layer index [H,W]."""
    x = np.arange(W)[None, :].repeat(H, 0)
    y = np.arange(H)[:, None].repeat(W, 1)
    img = np.zeros((3, H, W))
    label = np.full((H, W), -1, dtype=np.int64)
    for idx, layer in enumerate(layers):
        xl = x + layer.disparity if view == "right" else x  # left-view column seen at this pixel
        if layer.full_frame:
            cover = np.ones((H, W), bool)
            u, v = xl, y
        else:
            cover = (xl >= layer.x0) & (xl < layer.x1) & (y >= layer.y0) & (y < layer.y1)
            u, v = xl - layer.x0, y - layer.y0
        if not cover.any():
            continue
        vals = layer.texture(np.where(cover, u, 0), np.where(cover, v, 0))
        img[:, cover] = vals[:, cover]
        label[cover] = idx
    return img, label


def _occlusions(layers: Sequence[_Layer], label: np.ndarray, sign: int) -> np.ndarray:
    """Pixels of one view with no counterpart in the other.

    For the left view (``sign=-1``) a pixel of layer j lands at ``x - d_j`` in
    the right view; it is hidden if that falls outside the frame or a later
    (nearer) layer's shifted extent covers it. ``sign=+1`` is the mirror case.
    """
    H, W = label.shape
    x = np.arange(W)[None, :].repeat(H, 0)
    y = np.arange(H)[:, None].repeat(W, 1)
    d = np.array([ly.disparity for ly in layers])[label]
    xo = x + sign * d
    hidden = (xo < 0) | (xo >= W)
    for m, layer in enumerate(layers):
        if layer.full_frame:
            continue
        xl = xo + layer.disparity if sign < 0 else xo  # left-view column of layer m at the other-view pixel
        covers = (xl >= layer.x0) & (xl < layer.x1) & (y >= layer.y0) & (y < layer.y1)
        hidden |= covers & (label < m)
    return hidden


def generate_synthetic_pair(seed: int, spec: SyntheticSceneSpec | None = None,
                            calib: CameraCalib | None = None) -> StereoSample:
    spec = spec or SyntheticSceneSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    layers = _build_layers(rng, spec)
    W, H = spec.width, spec.height
    left, lab_l = _render(layers, W, H, "left")
    right, lab_r = _render(layers, W, H, "right")
    disp = np.array([ly.disparity for ly in layers], dtype=np.float32)
    return StereoSample(
        left=left.astype(np.float32),
        right=right.astype(np.float32),
        gt_disparity=disp[lab_l][None],
        occlusion_mask=_occlusions(layers, lab_l, -1)[None],
        calib=calib or default_calib(W),
        gt_disparity_right=disp[lab_r][None],
        occlusion_mask_right=_occlusions(layers, lab_r, +1)[None],
    )


def scene_layers(seed: int, spec: SyntheticSceneSpec | None = None) -> list:
    """The layer stack behind ``generate_synthetic_pair(seed, spec)`` (for oracles)."""
    spec = spec or SyntheticSceneSpec()
    spec.validate()
    return _build_layers(np.random.default_rng(seed), spec)


def default_calib(width: int) -> CameraCalib:
    # KITTI-like geometry: 0.54 m baseline, focal length ~0.58 image widths
    return CameraCalib(baseline_bd=0.54, focal_fl=0.58 * width)


# ---------------------------------------------------------------------------
# image and disparity files
# ---------------------------------------------------------------------------

DSP_MAGIC = b"DSP1"


def load_image(path) -> np.ndarray:
    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as exc:
        raise IOError(f"cannot read image {path}: {exc}") from exc
    if im.mode != "RGB":
        raise ValueError(f"{path}: expected an 8-bit RGB image, got mode {im.mode}")
    return (np.asarray(im, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_disparity_png(disp: np.ndarray, path) -> None:
    """16-bit grayscale, value = disparity * 256."""
    arr = np.clip(np.round(np.asarray(disp).reshape(disp.shape[-2:]) * 256.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_disparity_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.dtype != np.uint16:
        raise ValueError(f"{path}: expected a 16-bit disparity image")
    return (arr.astype(np.float32) / 256.0)[None]


def save_disparity_raster(disp: np.ndarray, path) -> None:
    """``DSP1`` magic, uint32 width, uint32 height, then little-endian float32 rows."""
    arr = np.asarray(disp, dtype="<f4").reshape(disp.shape[-2:])
    H, W = arr.shape
    with open(path, "wb") as fh:
        fh.write(DSP_MAGIC + struct.pack("<II", W, H))
        fh.write(arr.tobytes())


def load_disparity_raster(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12 or head[:4] != DSP_MAGIC:
            raise ValueError(f"{path}: not a DSP1 disparity raster")
        W, H = struct.unpack("<II", head[4:])
        body = fh.read()
    if len(body) != 4 * W * H:
        raise ValueError(f"{path}: truncated raster ({len(body)} bytes for {W}x{H})")
    return np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(1, H, W)


def load_disparity(path) -> np.ndarray:
    path = Path(path)
    return load_disparity_raster(path) if path.suffix == ".dsp" else load_disparity_png(path)


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask).reshape(mask.shape[-2:]) > 0).astype(np.uint8) * 255).save(path)


def load_mask(path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127)[None]


# ---------------------------------------------------------------------------
# resizing and augmentation
# ---------------------------------------------------------------------------

def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Rows of bilinear weights, pixel centres aligned (half-pixel convention)."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1 - f
    m[np.arange(n_out), i1] += f
    return m


def resize(image: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resize of a [C,H,W] array."""
    if new_h < 1 or new_w < 1:
        raise ValueError("target size must be positive")
    C, H, W = image.shape
    if (H, W) == (new_h, new_w):
        return image.copy()
    rh, rw = _interp_matrix(new_h, H), _interp_matrix(new_w, W)
    out = np.einsum("ih,chw,jw->cij", rh, image.astype(np.float64), rw)
    return out.astype(image.dtype)


def resize_disparity(disp: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Resize a disparity map, rescaling values with the width."""
    return resize(disp, new_h, new_w) * (new_w / disp.shape[-1])


def _mirror(a):
    return None if a is None else a[..., ::-1].copy()


def augment_flip(sample: StereoSample, coin: bool) -> StereoSample:
    """Mirror both views and swap their roles, which keeps the pair rectified.

    The new left view is the mirrored old right view, so its ground truth is
    the mirrored old right-view disparity (and vice versa).
    """
    if not coin:
        return sample
    return replace(
        sample,
        left=_mirror(sample.right),
        right=_mirror(sample.left),
        gt_disparity=_mirror(sample.gt_disparity_right),
        occlusion_mask=_mirror(sample.occlusion_mask_right),
        gt_disparity_right=_mirror(sample.gt_disparity),
        occlusion_mask_right=_mirror(sample.occlusion_mask),
    )


# ---------------------------------------------------------------------------
# datasets and batching
# ---------------------------------------------------------------------------

class SyntheticDataset:
    """``count`` scenes; sample i is ``generate_synthetic_pair`` with seed (seed, i)."""

    def __init__(self, count: int, spec: SyntheticSceneSpec | None = None, seed: int = 0, cache: bool = True):
        self.count, self.spec, self.seed = count, spec or SyntheticSceneSpec(), seed
        self._cache = {} if cache else None

    def __len__(self):
        return self.count

    def sample_seed(self, i: int) -> int:
        return int(np.random.SeedSequence([self.seed, i]).generate_state(1)[0])

    def __getitem__(self, i: int) -> StereoSample:
        if not 0 <= i < self.count:
            raise IndexError(i)
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        s = generate_synthetic_pair(self.sample_seed(i), self.spec)
        if self._cache is not None:
            self._cache[i] = s
        return s


class FolderDataset:
    """``root/{left,right}/NNNNN.png`` with optional ``disp/``, ``occ/`` and ``calib.txt``."""

    def __init__(self, root, size: Optional[tuple] = None):
        self.root = Path(root)
        left_dir = self.root / "left"
        if not left_dir.is_dir() or not (self.root / "right").is_dir():
            raise FileNotFoundError(f"{root}: expected left/ and right/ subdirectories")
        self.names = sorted(p.stem for p in left_dir.glob("*.png"))
        if not self.names:
            raise FileNotFoundError(f"{root}: no images under left/")
        self.size = size
        self.calib = read_calib(self.root / "calib.txt") if (self.root / "calib.txt").exists() else None

    def __len__(self):
        return len(self.names)

    def _disp_path(self, sub: str, name: str) -> Optional[Path]:
        for ext in (".png", ".dsp"):
            p = self.root / sub / f"{name}{ext}"
            if p.exists():
                return p
        return None

    def __getitem__(self, i: int) -> StereoSample:
        name = self.names[i]
        left = load_image(self.root / "left" / f"{name}.png")
        right = load_image(self.root / "right" / f"{name}.png")
        dp = self._disp_path("disp", name)
        gt = load_disparity(dp) if dp is not None else None
        occ_p = self.root / "occ" / f"{name}.png"
        occ = load_mask(occ_p) if occ_p.exists() else None
        calib = self.calib
        if self.size is not None and left.shape[1:] != tuple(self.size):
            h, w = self.size
            scale = w / left.shape[2]
            left, right = resize(left, h, w), resize(right, h, w)
            gt = resize_disparity(gt, h, w) if gt is not None else None
            occ = resize(occ.astype(np.float32), h, w) > 0.5 if occ is not None else None
            if calib is not None:
                calib = CameraCalib(calib.baseline_bd, calib.focal_fl * scale)
        return StereoSample(left, right, gt, occ, calib)


def write_calib(path, calib: CameraCalib) -> None:
    Path(path).write_text(f"baseline_bd={calib.baseline_bd!r}\nfocal_fl={calib.focal_fl!r}\n")


def read_calib(path) -> CameraCalib:
    vals = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            vals[k.strip()] = float(v)
    return CameraCalib(vals["baseline_bd"], vals["focal_fl"])


def write_sample(root, index: int, sample: StereoSample) -> list:
    """Write one sample in the dataset layout; returns the paths written."""
    root = Path(root)
    name = f"{index:05d}"
    paths = []
    for sub in ("left", "right", "disp", "occ"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    save_image(sample.left, root / "left" / f"{name}.png")
    save_image(sample.right, root / "right" / f"{name}.png")
    paths += [root / "left" / f"{name}.png", root / "right" / f"{name}.png"]
    if sample.gt_disparity is not None:
        save_disparity_png(sample.gt_disparity, root / "disp" / f"{name}.png")
        paths.append(root / "disp" / f"{name}.png")
    if sample.occlusion_mask is not None:
        save_mask(sample.occlusion_mask, root / "occ" / f"{name}.png")
        paths.append(root / "occ" / f"{name}.png")
    return paths


class BatchIterator:
    """Shuffled fixed-size batches, cycling forever; the last partial batch is dropped.

    Batch ``k`` is a pure function of (seed, k), which keeps resumed runs
    identical to uninterrupted ones. Flip augmentation coins are drawn the
    same way.
    """

    def __init__(self, dataset, batch_size: int, seed: int = 0, shuffle: bool = True, flip: bool = False):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        if batch_size > len(dataset):
            raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(dataset)}")
        self.dataset, self.batch_size, self.seed = dataset, batch_size, seed
        self.shuffle, self.flip = shuffle, flip
        self.per_epoch = len(dataset) // batch_size

    def indices(self, k: int) -> np.ndarray:
        epoch, pos = divmod(k, self.per_epoch)
        n = len(self.dataset)
        order = np.random.default_rng([self.seed, epoch]).permutation(n) if self.shuffle else np.arange(n)
        return order[pos * self.batch_size:(pos + 1) * self.batch_size]

    def batch(self, k: int) -> tuple:
        """(left, right) float32 arrays of shape [B,3,H,W] for batch number k."""
        idx = self.indices(k)
        coins = np.random.default_rng([self.seed, k, 1]).random(len(idx)) < 0.5 if self.flip else [False] * len(idx)
        samples = [augment_flip(self.dataset[int(i)], bool(c)) for i, c in zip(idx, coins)]
        left = np.stack([s.left for s in samples]).astype(np.float32)
        right = np.stack([s.right for s in samples]).astype(np.float32)
        return left, right

    def __iter__(self) -> Iterator[tuple]:
        k = 0
        while True:
            yield self.batch(k)
            k += 1
