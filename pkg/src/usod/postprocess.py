"""Decision values -> pseudo label: sign flip, sigmoid, dense CRF, median filter."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import pydensecrf.densecrf as dcrf
from scipy import ndimage

from .cues import DecisionValueMap
from .data import ImageRecord, LabelImage, resize_map

log = logging.getLogger(__name__)

UNARY_CLAMP = 1e-8


@dataclass
class CrfParams:
    spatial_kernel_sigma: float = 3.0
    bilateral_spatial_sigma: float = 60.0
    bilateral_color_sigma: float = 5.0
    spatial_weight: float = 3.0
    bilateral_weight: float = 5.0
    iterations: int = 5

    def __post_init__(self):
        sigmas = (self.spatial_kernel_sigma, self.bilateral_spatial_sigma, self.bilateral_color_sigma)
        if min(sigmas) <= 0:
            raise ValueError("CRF sigmas must be positive")
        if self.iterations < 1:
            raise ValueError("CRF needs at least one mean-field iteration")

    def to_dict(self):
        return asdict(self)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def median_filter(arr: np.ndarray, kernel: int) -> np.ndarray:
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("median kernel must be odd and >= 1")
    if kernel == 1:
        return np.array(arr, copy=True)
    return ndimage.median_filter(arr, size=kernel, mode="nearest")


def crf_refine(image_rgb: np.ndarray, prob: np.ndarray, params: CrfParams = CrfParams()) -> np.ndarray:
    """Two-label fully connected CRF; returns the foreground marginal.

    ``image_rgb`` is H x W x 3, either uint8 or float in [0, 1].
    """
    h, w = prob.shape
    if image_rgb.shape[:2] != (h, w):
        raise ValueError(f"image {image_rgb.shape[:2]} and probability {prob.shape} are misaligned")
    if image_rgb.dtype != np.uint8:
        image_rgb = np.round(np.clip(image_rgb, 0, 1) * 255).astype(np.uint8)
    p = np.clip(prob.astype(np.float64), UNARY_CLAMP, 1 - UNARY_CLAMP)
    unary = -np.log(np.stack([1 - p, p]).reshape(2, -1)).astype(np.float32)

    crf = dcrf.DenseCRF2D(w, h, 2)
    crf.setUnaryEnergy(np.ascontiguousarray(unary))
    crf.addPairwiseGaussian(sxy=params.spatial_kernel_sigma, compat=params.spatial_weight)
    crf.addPairwiseBilateral(sxy=params.bilateral_spatial_sigma, srgb=params.bilateral_color_sigma,
                             rgbim=np.ascontiguousarray(image_rgb), compat=params.bilateral_weight)
    q = np.asarray(crf.inference(params.iterations), dtype=np.float64).reshape(2, h, w)
    return np.clip(q[1], 0.0, 1.0)


def make_pseudo_label(image: ImageRecord, theta_map: DecisionValueMap, crf: CrfParams = CrfParams(),
                      median_kernel: int = 9, rgb: np.ndarray | None = None) -> LabelImage:
    """sign * theta -> sigmoid -> upsample to image size -> CRF -> median filter.

    A constant probability map skips the CRF and is flagged degenerate.
    """
    if median_kernel < 1 or median_kernel % 2 == 0:
        raise ValueError("median kernel must be odd and >= 1")
    rgb = image.image_u8 if rgb is None else rgb
    prob = sigmoid(theta_map.sign * theta_map.theta)
    prob = resize_map(prob.astype(np.float32), rgb.shape[:2], "bilinear").astype(np.float64)
    degenerate = bool(prob.max() - prob.min() == 0)
    if degenerate:
        log.warning("%s: constant probability map, skipping CRF", image.id)
        refined = prob
    else:
        refined = crf_refine(rgb, prob, crf)
    out = median_filter(refined, median_kernel)
    return LabelImage(image.id, np.clip(out, 0, 1).astype(np.float32), 0, degenerate)
