import numpy as np
import pytest

from usod.cues import DecisionValueMap
from usod.data import ImageRecord
from usod.postprocess import CrfParams, crf_refine, make_pseudo_label, median_filter, sigmoid


def two_color(h=40, w=48):
    img = np.zeros((h, w, 3), np.uint8)
    img[:] = (30, 60, 200)
    mask = np.zeros((h, w), bool)
    mask[:, w // 2:] = True
    img[mask] = (220, 200, 20)
    return img, mask


def iou(a, b):
    return (a & b).sum() / (a | b).sum()


def test_median_examples():
    x = np.zeros((5, 5))
    x[2, 2] = 1
    assert np.all(median_filter(x, 3) == 0)
    assert np.array_equal(median_filter(x, 1), x)
    c = np.full((6, 6), 0.3)
    for k in (1, 3, 5):
        assert np.array_equal(median_filter(c, k), c)
    with pytest.raises(ValueError):
        median_filter(x, 4)


def test_crf_params_validation():
    with pytest.raises(ValueError):
        CrfParams(iterations=0)
    with pytest.raises(ValueError):
        CrfParams(bilateral_color_sigma=0)


def test_crf_keeps_aligned_hard_labels():
    img, mask = two_color()
    out = crf_refine(img, mask.astype(float))
    assert iou(out > 0.5, mask) >= 0.95


def test_crf_uniform_half_stays_near_half():
    img, _ = two_color()
    out = crf_refine(img, np.full(img.shape[:2], 0.5))
    assert out.min() >= 0.45 and out.max() <= 0.55


def test_crf_one_iteration_moves_towards_colour_regions(rng):
    img, mask = two_color()
    noisy = np.where(mask, 0.65, 0.35) + rng.uniform(-0.25, 0.25, mask.shape)
    out = crf_refine(img, np.clip(noisy, 0, 1), CrfParams(iterations=1))
    target = mask.astype(float)
    assert np.abs(out - target).mean() < np.abs(noisy - target).mean()


def test_crf_rejects_misaligned_inputs():
    img, mask = two_color()
    with pytest.raises(ValueError):
        crf_refine(img, mask[:-1].astype(float))


def _record(h, w):
    return ImageRecord("x", None, None, (h, w))


def test_degenerate_theta_bypasses_crf(caplog):
    img, _ = two_color()
    dvm = DecisionValueMap(np.zeros((10, 12)), -1, 0.0)
    lbl = make_pseudo_label(_record(*img.shape[:2]), dvm, median_kernel=3, rgb=img)
    assert lbl.degenerate
    assert np.all(lbl.values == 0.5)
    assert lbl.values.shape == img.shape[:2]
    assert "skipping CRF" in caplog.text


def test_bimodal_theta_foreground_kept():
    img, mask = two_color()
    theta = np.where(mask, 8.0, -8.0)[::4, ::4]  # low-resolution decision values
    lbl = make_pseudo_label(_record(*img.shape[:2]), DecisionValueMap(theta, 1, 0.0), median_kernel=3, rgb=img)
    assert not lbl.degenerate
    confident = np.kron(sigmoid(theta) > 0.99, np.ones((4, 4), bool))
    assert np.all(lbl.values[confident & mask] > 0.5)
    assert iou(lbl.values > 0.5, mask) >= 0.95


def test_sign_flips_foreground():
    img, mask = two_color()
    theta = np.where(mask, -8.0, 8.0)
    lbl = make_pseudo_label(_record(*img.shape[:2]), DecisionValueMap(theta, -1, 0.0), median_kernel=3, rgb=img)
    assert iou(lbl.values > 0.5, mask) >= 0.95


def test_sigmoid_is_stable():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(800.0) == 1.0 and sigmoid(-800.0) == 0.0
