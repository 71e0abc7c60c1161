import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cycdepth import autodiff as ad
from cycdepth.autodiff import Tensor
from cycdepth.losses import (LossBreakdown, LossWeights, consistency_loss, gan_d_loss, gan_g_loss, rec_loss,
                             total_generator_loss)
from cycdepth.networks import CycleModel, GeneratorConfig
from cycdepth.warp import warp

from test_warp import scalar_warp


def test_rec_identical_zero(rng):
    a = Tensor(rng.random((2, 3, 4, 5)))
    assert rec_loss(a, a).item() == 0


def test_rec_ones_vs_zeros():
    assert rec_loss(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.zeros((1, 3, 2, 2)))).item() == 1.0


def test_rec_matches_scalar_loop(rng):
    a, b = rng.random((2, 3, 4, 5)), rng.random((2, 3, 4, 5))
    total = 0.0
    for v, w in zip(a.ravel(), b.ravel()):
        total += abs(v - w)
    assert rec_loss(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).item() == pytest.approx(total / a.size, rel=1e-12)


def test_rec_shape_mismatch():
    with pytest.raises(ValueError):
        rec_loss(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((1, 3, 2, 3))))


def test_gan_d_closed_form():
    z = Tensor(np.zeros((2, 1, 2, 4)))
    assert gan_d_loss(z, z).item() == pytest.approx(2 * math.log(2), rel=1e-6)


def test_gan_d_perfect_discriminator():
    real, fake = Tensor(np.full((1, 1, 2, 4), 20.0)), Tensor(np.full((1, 1, 2, 4), -20.0))
    assert gan_d_loss(real, fake).item() == pytest.approx(0, abs=1e-6)


def test_gan_d_patch_permutation_symmetric(rng):
    real, fake = rng.standard_normal((1, 1, 2, 4)), rng.standard_normal((1, 1, 2, 4))
    perm = rng.permutation(8)
    a = gan_d_loss(Tensor(real, dtype=np.float64), Tensor(fake, dtype=np.float64)).item()
    b = gan_d_loss(Tensor(real.ravel()[perm].reshape(real.shape), dtype=np.float64),
                   Tensor(fake.ravel()[perm[::-1]].reshape(fake.shape), dtype=np.float64)).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_gan_g_closed_form_and_limit():
    assert gan_g_loss(Tensor(np.zeros((1, 1, 2, 4)))).item() == pytest.approx(math.log(2), rel=1e-6)
    assert gan_g_loss(Tensor(np.full((1, 1, 2, 4), 20.0))).item() == pytest.approx(0, abs=1e-6)


def test_gan_g_gradient_pushes_logits_up(rng):
    z = Tensor(rng.standard_normal((1, 1, 2, 4)), requires_grad=True)
    gan_g_loss(z).backward()
    assert np.all(z.grad < 0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-200, 200), min_size=8, max_size=8), st.lists(st.floats(-200, 200), min_size=8, max_size=8))
def test_gan_losses_nonnegative_and_finite(r, f):
    real, fake = Tensor(np.reshape(r, (1, 1, 2, 4))), Tensor(np.reshape(f, (1, 1, 2, 4)))
    d, g = gan_d_loss(real, fake).item(), gan_g_loss(fake).item()
    assert d >= 0 and g >= 0 and np.isfinite(d) and np.isfinite(g)


def test_consistency_zero_maps():
    z = Tensor(np.zeros((1, 1, 3, 5)))
    assert consistency_loss(z, z).item() == 0


def test_consistency_constant_right():
    c = 2.5
    assert consistency_loss(Tensor(np.zeros((1, 1, 3, 5))), Tensor(np.full((1, 1, 3, 5), c))).item() == c


def test_consistency_scalar_oracle(rng):
    dl, dr = rng.uniform(0, 3, (2, 1, 3, 7)), rng.uniform(0, 3, (2, 1, 3, 7))
    aligned = scalar_warp(dl, dr, -1)
    expected = np.mean(np.abs(dl - aligned))
    got = consistency_loss(Tensor(dl, dtype=np.float64), Tensor(dr, dtype=np.float64)).item()
    assert got == pytest.approx(expected, rel=1e-12)


def test_consistency_zero_for_aligned_copy(rng):
    # integer shift field: d_r placed so that warping it by d_l reproduces d_l
    dl = np.full((1, 1, 2, 8), 2.0)
    dr = np.full((1, 1, 2, 8), 2.0)
    assert consistency_loss(Tensor(dl), Tensor(dr)).item() == 0


def test_total_examples():
    assert total_generator_loss({"rec_right": 0.5, "rec_left": 0.3}, LossWeights(1, 0, 0), "full") == pytest.approx(0.8)
    parts = {k: 1.0 for k in ("rec_right", "rec_left", "gan_g_right", "gan_g_left", "consistency")}
    assert total_generator_loss(parts, LossWeights(), "full") == pytest.approx(2.3)


def test_total_half_mode_ignores_left_and_consistency():
    parts = {k: 1.0 for k in ("rec_right", "rec_left", "gan_g_right", "gan_g_left", "consistency")}
    assert total_generator_loss(parts, LossWeights(), "half") == pytest.approx(1.1)


def test_total_recomputation_oracle(rng):
    vals = dict(zip(("rec_right", "rec_left", "gan_g_right", "gan_g_left", "consistency"), rng.random(5)))
    w = LossWeights(*rng.random(3))
    expected = w.gamma1 * (vals["rec_right"] + vals["rec_left"]) + w.gamma2 * (vals["gan_g_right"] + vals["gan_g_left"]) \
        + w.gamma3 * vals["consistency"]
    assert abs(total_generator_loss(vals, w, "full") - expected) < 1e-6


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(1, -0.1, 0.1)


def test_breakdown_fields():
    assert list(LossBreakdown().as_dict()) == ["rec_right", "rec_left", "gan_g_right", "gan_g_left", "gan_d_right",
                                                "gan_d_left", "consistency", "total"]


def _full_objective(m, left, right, w):
    _, _, d_r = m.G_l(left, right)
    synth_r = warp(d_r, left, 1)
    _, _, d_l = m.G_r(synth_r, left)
    synth_l = warp(d_l, synth_r, -1)
    parts = {"rec_right": rec_loss(right, synth_r), "rec_left": rec_loss(left, synth_l),
             "gan_g_right": gan_g_loss(m.D_r(synth_r)), "gan_g_left": gan_g_loss(m.D_l(synth_l)),
             "consistency": consistency_loss(d_l, d_r)}
    return total_generator_loss(parts, w, "full")


def test_weight_scaling_scales_gradients(rng):
    cfg = GeneratorConfig(levels=2, base_channels=4)
    m = CycleModel("full", cfg, seed=0).astype(np.float64)
    m.eval()  # fixed batch-norm statistics so both passes see the same function
    left = Tensor(rng.random((1, 3, 32, 32)), dtype=np.float64)
    right = Tensor(rng.random((1, 3, 32, 32)), dtype=np.float64)
    c = 3.0
    grads = []
    for w in (LossWeights(), LossWeights(c * 1.0, c * 0.1, c * 0.1)):
        m.zero_grad()
        total = _full_objective(m, left, right, w)
        total.backward()
        grads.append((total.item(), [p.grad.copy() for p in m.parameters()]))
    assert grads[1][0] == pytest.approx(c * grads[0][0], rel=1e-12)
    for g1, g3 in zip(grads[0][1], grads[1][1]):
        np.testing.assert_allclose(g3, c * g1, atol=1e-6, rtol=1e-9)


def test_discriminator_loss_leaves_generator_untouched(rng):
    m = CycleModel("stereo+D", GeneratorConfig(levels=2, base_channels=4), seed=0)
    left, right = Tensor(rng.random((2, 3, 32, 32))), Tensor(rng.random((2, 3, 32, 32)))
    _, _, d_r = m.G_l(left, right)
    fake = warp(d_r, left, 1)
    m.zero_grad()
    gan_d_loss(m.D_r(right), m.D_r(fake.detach())).backward()
    assert all(np.all(p.grad == 0) for p in m.G_l.parameters())
    assert any(np.any(p.grad != 0) for p in m.D_r.parameters())
