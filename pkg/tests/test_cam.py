import logging

import numpy as np
import pytest
import torch
from hypothesis import example, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mrissl.cam import (
    ActivationCapture,
    Heatmap,
    capture,
    eigen_cam,
    grad_cam,
    grad_cam_pp,
    map_statistics,
    overlay,
    random_fraction_mask,
    to_uint8,
    top_fraction_mask,
)
from mrissl.encoders import Classifier, ClassifierHead, ClassifierHeadSpec, Encoder, EncoderSpec
from oracles import grad_cam_pp_loop


def cap(a, g=None, c=0):
    a = np.asarray(a, dtype=np.float64)
    return ActivationCapture("layer", a, None if g is None else np.asarray(g, dtype=np.float64), c)


small = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)),
               elements=st.floats(-3, 3, allow_nan=False))


# -- Grad-CAM ---------------------------------------------------------------------


def test_grad_cam_uniform_and_clamped():
    ones = np.ones((1, 3, 3))
    m = grad_cam(cap(ones, ones))
    assert np.all(m.values == 1.0)
    assert np.all(m.minmax().values == 1.0)
    assert np.all(grad_cam(cap(ones, -ones)).values == 0.0)


def test_grad_cam_channel_weights_are_mean_gradients():
    a = np.stack([np.eye(3), np.ones((3, 3))])
    g = np.stack([np.full((3, 3), 2.0), np.full((3, 3), -0.5)])
    assert np.allclose(grad_cam(cap(a, g)).values, np.maximum(2 * np.eye(3) - 0.5, 0))


def test_zero_gradients_warn_and_give_zero_maps(caplog):
    a = np.random.default_rng(0).random((2, 3, 3))
    with caplog.at_level(logging.WARNING):
        assert not grad_cam(cap(a, np.zeros_like(a))).values.any()
        assert not grad_cam_pp(cap(a, np.zeros_like(a))).values.any()
    assert "zero gradients" in caplog.text


def test_missing_gradients_is_an_error():
    with pytest.raises(ValueError):
        grad_cam(cap(np.ones((1, 2, 2))))


@settings(max_examples=60, deadline=None)
@given(small, st.floats(0.01, 100))
@example(np.array([[[-3.2e-11]]]), 0.25)  # constant map near the degeneracy threshold
def test_grad_cam_scale_invariance(a, scale):
    g = np.roll(a, 1) - 0.3
    base = grad_cam(cap(a, g)).minmax().values
    scaled = grad_cam(cap(a * scale, g * scale)).minmax().values
    assert np.allclose(base, scaled, atol=1e-9)


# -- Grad-CAM++ -------------------------------------------------------------------


def test_grad_cam_pp_single_pixel_support():
    a = np.zeros((2, 4, 4))
    a[:, 1, 2] = [1.5, 0.5]
    g = np.zeros_like(a)
    g[:, 1, 2] = [0.7, 0.2]
    pp = grad_cam_pp(cap(a, g)).values
    gc = grad_cam(cap(a, g)).values
    assert set(zip(*np.nonzero(pp))) == {(1, 2)} == set(zip(*np.nonzero(gc)))


@settings(max_examples=80, deadline=None)
@given(small, st.integers(0, 2**31))
def test_grad_cam_pp_matches_scalar_loop(a, seed):
    g = np.random.default_rng(seed).normal(size=a.shape)
    got = grad_cam_pp(cap(a, g)).values
    assert np.abs(got - grad_cam_pp_loop(a, g)).max() < 1e-6


def test_grad_cam_pp_guarded_denominator():
    # sum(A) = -2 and g = 1 make 2g^2 + sum(A) g^3 vanish
    a = np.array([[[-1.0, -1.0]]])
    g = np.ones_like(a)
    assert np.all(np.isfinite(grad_cam_pp(cap(a, g)).values))
    assert np.all(grad_cam_pp(cap(a, g)).values == 0)


# -- Eigen-CAM --------------------------------------------------------------------


def test_eigen_cam_identical_channels():
    m = np.array([[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]])
    out = eigen_cam(cap(np.stack([m] * 4))).values
    ratio = out[np.abs(m) > 0] / np.abs(m)[np.abs(m) > 0]
    assert np.allclose(ratio, ratio[0], atol=1e-9)
    assert out[1, 1] == pytest.approx(0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_eigen_cam_rank_one_matches_svd_oracle(k, h, w, seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(h, w))
    v = rng.normal(size=k)
    a = v[:, None, None] * u[None]
    out = eigen_cam(cap(a)).values
    # rank one: the first right singular vector is +-v/|v|, so the projection is |u| * |v|
    assert np.abs(out - np.abs(u) * np.linalg.norm(v)).max() < 1e-6


def test_eigen_cam_zero_and_gradient_free(caplog):
    with caplog.at_level(logging.WARNING):
        assert not eigen_cam(cap(np.zeros((3, 2, 2)))).values.any()
    assert "zero activations" in caplog.text
    torch.manual_seed(0)
    model = Classifier(Encoder(EncoderSpec.tiny()), ClassifierHead(ClassifierHeadSpec(128, 4)))
    x = torch.randn(1, 3, 32, 32)
    with_bw = eigen_cam(capture(model, x, with_gradients=True)).values
    without = eigen_cam(capture(model, x, with_gradients=False)).values
    assert np.array_equal(with_bw, without)


# -- captures on a real model -----------------------------------------------------


def test_random_captures_are_nonnegative_with_layer_shape():
    torch.manual_seed(1)
    model = Classifier(Encoder(EncoderSpec.tiny()), ClassifierHead(ClassifierHeadSpec(128, 4)))
    before = [p.detach().clone() for p in model.parameters()]
    gen = torch.Generator().manual_seed(2)
    for i in range(100):
        c = capture(model, torch.randn(1, 3, 32, 32, generator=gen), class_index=i % 4)
        assert c.activations.shape == (128, 8, 8) and c.input_size == (32, 32)
        for fn in (grad_cam, grad_cam_pp):
            v = fn(c).values
            assert v.shape == (8, 8) and v.min() >= 0
    assert all(p.grad is None for p in model.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_capture_defaults_to_predicted_class():
    torch.manual_seed(3)
    model = Classifier(Encoder(EncoderSpec.tiny()), ClassifierHead(ClassifierHeadSpec(128, 4)))
    x = torch.randn(1, 3, 32, 32)
    model.eval()
    with torch.no_grad():
        pred = int(model(x).argmax())
    assert capture(model, x).class_index == pred
    assert capture(model, x, class_index=(pred + 1) % 4).class_index == (pred + 1) % 4


# -- heatmaps and overlays --------------------------------------------------------


def test_minmax_examples():
    assert np.allclose(Heatmap(np.array([[1.0, 3.0], [2.0, 5.0]])).minmax().values, [[0, 0.5], [0.25, 1]])
    assert np.all(Heatmap(np.full((2, 2), 4.0)).minmax().values == 1)
    assert np.all(Heatmap(np.zeros((2, 2))).minmax().values == 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(0, 50)),
       st.integers(1, 40), st.integers(1, 40))
def test_overlay_shape_and_range(values, h, w):
    image = np.linspace(0, 1, h * w).reshape(h, w)
    out = overlay(Heatmap(values), image)
    assert out.shape == (h, w, 3)
    assert out.min() >= -1e-12 and out.max() <= 1 + 1e-12


def test_zero_heatmap_overlay_is_input():
    image = np.random.default_rng(0).random((12, 10))
    out = overlay(Heatmap(np.zeros((3, 3))), image)
    assert np.allclose(out, np.repeat(image[..., None], 3, -1))


def test_ones_heatmap_overlay_is_uniform_tint():
    image = np.random.default_rng(0).random((6, 6))
    out = overlay(Heatmap(np.ones((2, 2))), image)
    assert np.allclose(out, out[0, 0])
    # top of the jet colormap: dark red
    assert np.allclose(out[0, 0], [0.5, 0.0, 0.0], atol=0.01)
    assert to_uint8(out).dtype == np.uint8


def test_upsample_is_bilinear_half_pixel():
    up = Heatmap(np.array([[0.0, 1.0]])).upsample((1, 4)).values
    assert np.allclose(up, [[0.0, 0.25, 0.75, 1.0]])


def test_map_statistics_region_mass():
    hm = Heatmap(np.array([[1.0, 1.0], [0.0, 2.0]]))
    s = map_statistics(hm, (0, 0, 1, 2))
    assert s == {"min": 0.0, "max": 2.0, "mean": 1.0, "mass_in_region": 0.5}


def test_fraction_masks():
    hm = Heatmap(np.arange(10.0).reshape(2, 5))
    m = top_fraction_mask(hm, 0.2)
    assert m.sum() == 2 and m[1, 3] and m[1, 4]
    rng = np.random.default_rng(0)
    assert random_fraction_mask((10, 10), 0.2, rng).sum() == 20
    assert random_fraction_mask((32, 32), 0.2, rng, grid=(8, 8)).sum() == round(0.2 * 1024)


# -- faithfulness on a trained model ------------------------------------------------


def test_cam_faithfulness_on_bright_quadrant_task():
    from quadrant_task import faithfulness, holdout_images, trained_quadrant_model

    model = trained_quadrant_model()
    images, _ = holdout_images()
    for method in ("gradcam", "gradcampp", "eigencam"):
        stats = faithfulness(model, images, method)
        assert stats["inside_rate"] >= 0.9, (method, stats)
        assert stats["occlusion_rate"] >= 0.9, (method, stats)
