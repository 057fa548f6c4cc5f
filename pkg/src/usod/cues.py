"""Stage-1 saliency cue extraction.

SE heads on top of a frozen encoder turn encoder stages 3-5 into one fused
feature map. Its channel sum, centred on the image's own mean, gives the
per-pixel decision values that the ADB loss pushes away from zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone

log = logging.getLogger(__name__)

LEVELS = ("F3", "F4", "F5", "F")
N_THRESHOLDS = 256


class DBVariant(str, Enum):
    DB1 = "DB1"  # 1^T (f - train-set mean)
    DB2 = "DB2"  # fbar^T f
    DB3 = "DB3"  # fbar^T (f - fbar)
    DB4 = "DB4"  # w^T (f - fbar)
    DB5 = "DB5"  # 1^T (f - fbar), the adaptive boundary


class ThresholdStrategy(str, Enum):
    OTSU = "otsu"
    MEAN = "mean"
    MEDIAN = "median"


class SEHead(nn.Module):
    """3x3 projection to ``width`` channels followed by squeeze-and-excitation gating."""

    def __init__(self, in_channels: int, width: int = 64, reduction: int = 4):
        super().__init__()
        self.in_channels = in_channels
        self.proj = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
        )
        self.fc = nn.Sequential(
            nn.Linear(width, width // reduction),
            nn.ReLU(inplace=True),
            nn.Linear(width // reduction, width),
        )

    def gate(self, projected: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc(projected.mean(dim=(2, 3))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"SE head expects {self.in_channels} channels, got {x.shape[1]}")
        y = self.proj(x)
        return y * self.gate(y)[:, :, None, None]


def upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def fuse_heads(se0: SEHead, f3: torch.Tensor, f4: torch.Tensor, f5: torch.Tensor) -> torch.Tensor:
    """SE_0 over the concatenation of the three branch features, at the largest branch size."""
    size = max((f.shape[-2:] for f in (f3, f4, f5)), key=lambda s: s[0] * s[1])
    ups = [upsample_to(f, size) for f in (f3, f4, f5)]
    if len({tuple(u.shape[-2:]) for u in ups}) != 1:
        raise ValueError("branch features disagree in size after upsampling")
    return se0(torch.cat(ups, dim=1))


class CueNetwork(nn.Module):
    """Frozen encoder plus the four trainable SE heads.

    ``forward`` returns the supervised maps F3, F4, F5 (upsampled to the F3
    size) and the fused map F, each N x width x h x w.
    """

    def __init__(self, backbone: Backbone, width: int = 64, db_variant: DBVariant = DBVariant.DB5):
        super().__init__()
        self.backbone = backbone
        self.width = width
        self.db_variant = DBVariant(db_variant)
        ch = backbone.channels
        self.se3 = SEHead(ch[3], width)
        self.se4 = SEHead(ch[4], width)
        self.se5 = SEHead(ch[5], width)
        self.se0 = SEHead(3 * width, width)
        # DB4 weights start at the all-ones vector, i.e. identical to DB5.
        self.db_weight = nn.Parameter(torch.ones(width), requires_grad=self.db_variant is DBVariant.DB4)
        self.register_buffer("train_mean_feature", torch.zeros(width))
        self.register_buffer("has_train_mean", torch.tensor(False))

    def head_parameters(self):
        for mod in (self.se3, self.se4, self.se5, self.se0):
            yield from mod.parameters()
        if self.db_variant is DBVariant.DB4:
            yield self.db_weight

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        pyr = self.backbone(x, (3, 4, 5))
        f3, f4, f5 = self.se3(pyr[3]), self.se4(pyr[4]), self.se5(pyr[5])
        fused = fuse_heads(self.se0, f3, f4, f5)
        size = fused.shape[-2:]
        return {"F3": f3, "F4": upsample_to(f4, size), "F5": upsample_to(f5, size), "F": fused}

    def theta(self, f: torch.Tensor) -> torch.Tensor:
        aux = None
        if self.db_variant is DBVariant.DB1:
            if not bool(self.has_train_mean):
                raise ValueError("DB1 requires the train-set mean feature; call set_train_mean first")
            aux = self.train_mean_feature
        elif self.db_variant is DBVariant.DB4:
            aux = self.db_weight
        return decision_boundary(self.db_variant, f, aux)

    def set_train_mean(self, mean_feature: torch.Tensor) -> None:
        self.train_mean_feature.copy_(mean_feature.detach())
        self.has_train_mean.fill_(True)


# ---------------------------------------------------------------------------
# Decision values


@dataclass
class DecisionValueMap:
    theta: np.ndarray  # h x w
    sign: int
    mean_feature_projection: float


def activation_map(f: torch.Tensor) -> torch.Tensor:
    """Channel sum; accepts C x h x w or N x C x h x w."""
    return f.sum(dim=-3)


def adb_theta(f: torch.Tensor) -> torch.Tensor:
    """Activation minus its per-image spatial mean (batched, differentiable)."""
    m = activation_map(f)
    return m - m.mean(dim=(-2, -1), keepdim=True)


def decision_boundary(variant, f: torch.Tensor, aux: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Decision values for N x C x h x w (or C x h x w) features.

    ``aux`` is the train-set mean feature for DB1 and the weight vector for DB4.
    """
    variant = DBVariant(variant)
    if variant is DBVariant.DB5:
        return adb_theta(f)
    if variant in (DBVariant.DB1, DBVariant.DB4) and aux is None:
        raise ValueError(f"{variant.value} needs an auxiliary vector")
    fbar = f.mean(dim=(-2, -1), keepdim=True)
    if variant is DBVariant.DB1:
        return (f - aux.view(-1, 1, 1)).sum(dim=-3)
    if variant is DBVariant.DB2:
        return (fbar * f).sum(dim=-3)
    if variant is DBVariant.DB3:
        return (fbar * (f - fbar)).sum(dim=-3)
    return (aux.view(-1, 1, 1) * (f - fbar)).sum(dim=-3)


def orientation_sign(theta) -> int:
    """+1 when the non-negative set is no larger than the negative set, else -1.

    Pixels with theta == 0 count towards the non-negative set.
    """
    theta = np.asarray(theta.theta if isinstance(theta, DecisionValueMap) else theta)
    n_neg = int(np.count_nonzero(theta < 0))
    n_pos = theta.size - n_neg
    return 1 if n_neg >= n_pos else -1


def adb_decision_values(f, variant=DBVariant.DB5, aux=None) -> DecisionValueMap:
    """Single-image DecisionValueMap (C x h x w features, float64 arithmetic)."""
    t = torch.as_tensor(f).detach().to(torch.float64)
    if t.ndim != 3:
        raise ValueError("expected a C x h x w feature map")
    if aux is not None:
        aux = torch.as_tensor(aux, dtype=torch.float64)
    theta = decision_boundary(variant, t, aux).numpy()
    mfp = float(activation_map(t).mean())
    return DecisionValueMap(theta, orientation_sign(theta), mfp)


def adb_loss(thetas: Sequence[torch.Tensor], alpha: float = 0.1, drop_rate: float = 0.5,
             generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Negative mean of D^2 + alpha * D over kept pixels, D = |sigmoid(theta) - 1/2|.

    Every image of every supervised level is one map; the result is the mean
    over maps, so it always lies in [-(0.25 + 0.5 alpha), 0]. Dropout keeps
    exactly ``N - floor(drop_rate * N)`` pixels per map, drawn without
    replacement.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if not 0 <= drop_rate < 1:
        raise ValueError("drop_rate must lie in [0, 1)")
    per_map = []
    for theta in thetas:
        flat = theta.reshape(theta.shape[0], -1) if theta.ndim == 3 else theta.reshape(1, -1)
        n, npx = flat.shape
        d = (torch.sigmoid(flat) - 0.5).abs()
        score = d * d + alpha * d
        n_keep = npx - int(np.floor(drop_rate * npx))
        if n_keep <= 0:
            log.warning("all pixels dropped on a %d-pixel map", npx)
            per_map.append(score.new_zeros(n))
            continue
        if n_keep < npx:
            keep = torch.stack([torch.randperm(npx, generator=generator)[:n_keep] for _ in range(n)])
            score = score.gather(1, keep.to(score.device))
        per_map.append(score.mean(dim=1))
    if not per_map:
        raise ValueError("adb_loss needs at least one map")
    return -torch.cat(per_map).mean()


# ---------------------------------------------------------------------------
# Thresholding study


def inter_group_variance(m, t: float) -> float:
    """p1 * p2 * (mu1 - mu2)^2 for the split {m < t} / {m >= t}; 0 if a group is empty."""
    m = np.asarray(m, dtype=np.float64).ravel()
    hi = m >= t
    n2 = int(np.count_nonzero(hi))
    n1 = m.size - n2
    if n1 == 0 or n2 == 0:
        return 0.0
    p1, p2 = n1 / m.size, n2 / m.size
    mu1, mu2 = m[~hi].mean(), m[hi].mean()
    return float(p1 * p2 * (mu1 - mu2) ** 2)


def otsu_candidates(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return np.linspace(m.min(), m.max(), N_THRESHOLDS)


def is_degenerate(m) -> bool:
    m = np.asarray(m)
    return bool(m.size == 0 or m.min() == m.max())


def threshold_select(m, strategy="otsu") -> float:
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ValueError("empty activation map")
    strategy = ThresholdStrategy(strategy)
    if strategy is ThresholdStrategy.MEAN:
        return float(m.mean())
    if strategy is ThresholdStrategy.MEDIAN:
        return float(np.median(m))
    if is_degenerate(m):
        return float(m.flat[0])
    cands = otsu_candidates(m)
    scores = [inter_group_variance(m, t) for t in cands]
    return float(cands[int(np.argmax(scores))])


def quantize_u8(m) -> np.ndarray:
    """Min-max scale to the integer levels 0..255 (as float64)."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return np.round((m - lo) / (hi - lo) * 255.0)


def strategy_variances(m) -> dict[str, float]:
    """Inter-group variance of each strategy on the 8-bit quantised map, in [0, 1] units.

    Thresholds are chosen on the integer levels, where the otsu candidate
    grid covers every possible split, so otsu bounds the other strategies.
    """
    q = quantize_u8(m)
    return {s.value: inter_group_variance(q, threshold_select(q, s)) / 255.0 ** 2
            for s in ThresholdStrategy}
