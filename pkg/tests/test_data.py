import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from cycdepth import autodiff as ad
from cycdepth.data import (BatchIterator, FolderDataset, StereoSample, SyntheticDataset, SyntheticSceneSpec,
                           augment_flip, generate_synthetic_pair, load_disparity, load_image, load_mask, resize,
                           resize_disparity, save_disparity_png, save_disparity_raster, save_image, scene_layers,
                           write_sample)
from cycdepth.warp import warp

SMALL = SyntheticSceneSpec(width=32, height=16)


def _warp(d, src, sign):
    return warp(ad.Tensor(d[None]), ad.Tensor(src[None]), sign).data[0]


def photometric_errors(s: StereoSample) -> dict:
    """Mean abs error of each view reconstruction over its visible pixels."""
    right_hat = _warp(s.gt_disparity_right, s.left, +1)
    left_hat = _warp(s.gt_disparity, s.right, -1)
    vis_r = ~s.occlusion_mask_right[0]
    vis_l = ~s.occlusion_mask[0]
    return {
        "right": np.abs(right_hat - s.right)[:, vis_r].mean(),
        "left": np.abs(left_hat - s.left)[:, vis_l].mean(),
    }


def literal_check_error(s: StereoSample) -> float:
    """warp(left-view gt, I_l, +1) vs I_r where both views agree on the disparity."""
    out = _warp(s.gt_disparity, s.left, +1)
    agree = (s.gt_disparity[0] == s.gt_disparity_right[0]) & ~s.occlusion_mask_right[0]
    return np.abs(out - s.right)[:, agree].max()


def brute_force_labels(layers, W, H, view):
    """Topmost layer index at each pixel, by scanning layers per pixel."""
    lab = np.full((H, W), -1)
    for y in range(H):
        for x in range(W):
            for i, ly in enumerate(layers):
                xl = x + ly.disparity if view == "right" else x
                if ly.full_frame or (ly.x0 <= xl < ly.x1 and ly.y0 <= y < ly.y1):
                    lab[y, x] = i
    return lab


def brute_force_occlusion(layers, W, H):
    """Left pixels whose right-view location is outside the frame or shows another layer."""
    lab_l = brute_force_labels(layers, W, H, "left")
    lab_r = brute_force_labels(layers, W, H, "right")
    occ = np.zeros((H, W), bool)
    for y in range(H):
        for x in range(W):
            j = lab_l[y, x]
            xr = x - layers[j].disparity
            occ[y, x] = not (0 <= xr < W) or lab_r[y, xr] != j
    return occ


# ---------------------------------------------------------------------------
# synthetic scenes


@pytest.mark.parametrize("seed", range(20))
def test_photometric_oracle(seed):
    s = generate_synthetic_pair(seed)
    err = photometric_errors(s)
    assert err["right"] < 1e-5 and err["left"] < 1e-5
    assert literal_check_error(s) < 1e-5


def test_literal_check_fails_across_layer_boundaries():
    # documents why the oracle uses each view's own disparity map
    s = generate_synthetic_pair(3)
    out = _warp(s.gt_disparity, s.left, +1)
    vis = ~s.occlusion_mask_right[0]
    assert np.abs(out - s.right)[:, vis].max() > 1e-3


@pytest.mark.parametrize("seed", range(30))
def test_occlusion_mask_matches_brute_force(seed):
    s = generate_synthetic_pair(seed, SMALL)
    layers = scene_layers(seed, SMALL)
    assert np.array_equal(s.occlusion_mask[0], brute_force_occlusion(layers, 32, 16))
    lab = brute_force_labels(layers, 32, 16, "left")
    assert np.array_equal(s.gt_disparity[0], np.array([ly.disparity for ly in layers], np.float32)[lab])


def test_single_full_frame_layer_is_exact_shift():
    k = 5
    spec = SyntheticSceneSpec(num_layers=0, disparity_range=(k, k))
    s = generate_synthetic_pair(7, spec)
    W = spec.width
    assert np.array_equal(s.right[:, :, :W - k], s.left[:, :, k:])
    assert np.all(s.gt_disparity == k)
    assert s.occlusion_mask[0, :, :k].all() and not s.occlusion_mask[0, :, k:].any()


def test_scene_invariants():
    spec = SyntheticSceneSpec()
    lo, hi = spec.resolved_range()
    assert (lo, hi) == (2, 32)
    for seed in range(10):
        layers = scene_layers(seed)
        d = [ly.disparity for ly in layers]
        assert len(layers) == 7 and layers[0].full_frame and d[0] == lo
        assert d == sorted(d) and all(lo <= v <= hi and float(v).is_integer() for v in d)
        s = generate_synthetic_pair(seed)
        assert s.left.shape == (3, 64, 128) and s.left.dtype == np.float32
        assert 0 <= s.left.min() and s.left.max() <= 1


def test_determinism():
    a, b = generate_synthetic_pair(11), generate_synthetic_pair(11)
    for f in ("left", "right", "gt_disparity", "occlusion_mask"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert not np.array_equal(a.left, generate_synthetic_pair(12).left)


def test_true_disparity_beats_constant_guesses():
    # the reconstruction loss must point at the ground truth for training to work
    ds = SyntheticDataset(8, seed=5, cache=False)
    def loss(f):
        return np.mean([np.abs(_warp(f(s.gt_disparity_right), s.left, +1) - s.right).mean() for s in ds])
    at_gt = loss(lambda g: g)
    for c in (2.0, 8.0, 16.0, 32.0):
        assert loss(lambda g: np.full_like(g, c)) > 1.5 * at_gt
    assert loss(lambda g: g + 2) > 1.5 * at_gt


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSceneSpec(disparity_range=(5, 2)).validate()
    with pytest.raises(ValueError):
        SyntheticSceneSpec(width=32, disparity_range=(2, 20)).validate()


# ---------------------------------------------------------------------------
# files


def test_image_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(3, 9, 13)).astype(np.float32) / 255
    save_image(img, tmp_path / "a.png")
    assert np.array_equal(load_image(tmp_path / "a.png"), img)


def test_known_pixels_and_black(tmp_path):
    px = np.array([[[255, 0, 0], [0, 255, 0]], [[0, 0, 255], [51, 102, 204]]], np.uint8)
    Image.fromarray(px, "RGB").save(tmp_path / "k.png")
    got = load_image(tmp_path / "k.png")
    assert got.shape == (3, 2, 2)
    np.testing.assert_allclose(got[:, 1, 1], [0.2, 0.4, 0.8], atol=1e-7)
    np.testing.assert_array_equal(got[:, 0, 0], [1, 0, 0])
    Image.fromarray(np.zeros((4, 5, 3), np.uint8), "RGB").save(tmp_path / "b.png")
    assert not load_image(tmp_path / "b.png").any()


def test_image_errors(tmp_path):
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(IOError):
        load_image(tmp_path / "junk.png")
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "gray.png")
    with pytest.raises(ValueError):
        load_image(tmp_path / "gray.png")


def test_disparity_round_trips(tmp_path, rng):
    d = (rng.integers(0, 40 * 256, size=(1, 6, 7)) / 256).astype(np.float32)
    save_disparity_png(d, tmp_path / "d.png")
    assert np.array_equal(load_disparity(tmp_path / "d.png"), d)
    f = rng.uniform(0, 50, size=(1, 6, 7)).astype(np.float32)
    save_disparity_raster(f, tmp_path / "d.dsp")
    assert np.array_equal(load_disparity(tmp_path / "d.dsp"), f)


def test_raster_errors(tmp_path):
    save_disparity_raster(np.ones((1, 4, 4), np.float32), tmp_path / "d.dsp")
    data = (tmp_path / "d.dsp").read_bytes()
    (tmp_path / "short.dsp").write_bytes(data[:-3])
    (tmp_path / "bad.dsp").write_bytes(b"XXXX" + data[4:])
    for name in ("short.dsp", "bad.dsp"):
        with pytest.raises(ValueError):
            load_disparity(tmp_path / name)


def test_folder_dataset_round_trip(tmp_path):
    ds = SyntheticDataset(3, SMALL, seed=4)
    for i in range(3):
        write_sample(tmp_path, i, ds[i])
    folder = FolderDataset(tmp_path)
    assert len(folder) == 3
    s, ref = folder[1], ds[1]
    assert np.abs(s.left - ref.left).max() <= 0.5 / 255 + 1e-7
    assert np.array_equal(s.gt_disparity, ref.gt_disparity)
    assert np.array_equal(load_mask(tmp_path / "occ" / "00001.png"), ref.occlusion_mask)


def test_folder_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        FolderDataset(tmp_path)
    (tmp_path / "left").mkdir()
    (tmp_path / "right").mkdir()
    with pytest.raises(FileNotFoundError):
        FolderDataset(tmp_path)


# ---------------------------------------------------------------------------
# resize and flip


def test_resize_identity_and_constant(rng):
    img = rng.random((3, 8, 10)).astype(np.float32)
    assert np.array_equal(resize(img, 8, 10), img)
    c = np.full((3, 8, 10), 0.3, np.float32)
    np.testing.assert_allclose(resize(c, 5, 17), 0.3, atol=1e-6)


def test_resize_checkerboard_halves_to_mid_grey():
    yy, xx = np.mgrid[:16, :16]
    board = np.broadcast_to(((yy + xx) % 2).astype(np.float64), (1, 16, 16))
    np.testing.assert_allclose(resize(board, 8, 8), 0.5, atol=1e-6)


def test_resize_disparity_scales_values():
    d = np.full((1, 8, 16), 4.0, np.float32)
    np.testing.assert_allclose(resize_disparity(d, 4, 8), 2.0, atol=1e-6)


def test_resize_rejects_empty_target():
    with pytest.raises(ValueError):
        resize(np.zeros((1, 4, 4)), 0, 4)


def test_flip_involution_and_identity():
    s = generate_synthetic_pair(2)
    assert augment_flip(s, False) is s
    back = augment_flip(augment_flip(s, True), True)
    for f in ("left", "right", "gt_disparity", "occlusion_mask", "gt_disparity_right", "occlusion_mask_right"):
        assert np.array_equal(getattr(back, f), getattr(s, f))


@pytest.mark.parametrize("seed", range(5))
def test_flip_keeps_photometric_oracle(seed):
    err = photometric_errors(augment_flip(generate_synthetic_pair(seed), True))
    assert err["right"] < 1e-5 and err["left"] < 1e-5


# ---------------------------------------------------------------------------
# batching


def test_batches_deterministic_and_cover_epoch():
    ds = SyntheticDataset(10, SMALL, seed=0)
    it = BatchIterator(ds, 3, seed=9)
    assert it.per_epoch == 3
    seen = np.concatenate([it.indices(k) for k in range(3)])
    assert len(set(seen.tolist())) == 9
    assert np.array_equal(it.indices(4), BatchIterator(ds, 3, seed=9).indices(4))
    left, right = it.batch(0)
    assert left.shape == right.shape == (3, 3, 16, 32) and left.dtype == np.float32


def test_batch_iterator_errors():
    ds = SyntheticDataset(2, SMALL)
    with pytest.raises(ValueError):
        BatchIterator(ds, 0)
    with pytest.raises(ValueError):
        BatchIterator(SyntheticDataset(0, SMALL), 1)
    with pytest.raises(ValueError):
        BatchIterator(ds, 3)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_every_epoch_is_a_permutation(seed):
    it = BatchIterator(SyntheticDataset(12, SMALL), 4, seed=seed)
    for epoch in range(2):
        idx = np.concatenate([it.indices(epoch * 3 + k) for k in range(3)])
        assert sorted(idx.tolist()) == list(range(12))
