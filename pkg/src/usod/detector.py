"""Stage-2 saliency detector with two residual attention modules, and its loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone
from .cues import upsample_to

WIDTH = 64
IOU_EPS = 1.0


def conv_bn_relu(cin: int, cout: int, k: int = 3) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=k // 2, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class ChannelReducer(nn.Module):
    """One conv-BN-ReLU block per encoder stage, all mapping to ``width`` channels."""

    def __init__(self, channels: dict[int, int], width: int = WIDTH):
        super().__init__()
        self.blocks = nn.ModuleDict({str(i): conv_bn_relu(channels[i], width) for i in range(1, 6)})

    def forward(self, pyramid) -> dict[int, torch.Tensor]:
        missing = [i for i in range(1, 6) if i not in pyramid.levels]
        if missing:
            raise ValueError(f"pyramid lacks stage(s) {missing}")
        return {i: self.blocks[str(i)](pyramid[i]) for i in range(1, 6)}


def _largest(*xs):
    return max((x.shape[-2:] for x in xs), key=lambda s: s[0] * s[1])


class RAM(nn.Module):
    """Gate each low-level input by sigmoid(conv(H_i - H_5)), then fuse with H_5.

    With ``attention=False`` the gating is removed and the block reduces to
    the fusion convolution alone (the plain-conv ablation).
    """

    def __init__(self, width: int = WIDTH, kernel: int = 3, attention: bool = True):
        super().__init__()
        self.width = width
        self.attention = attention
        pad = kernel // 2
        if attention:
            self.att = nn.ModuleList(nn.Conv2d(width, width, kernel, padding=pad) for _ in range(2))
            for conv in self.att:
                nn.init.zeros_(conv.bias)
        self.fuse = nn.Conv2d(3 * width, width, kernel, padding=pad)

    def enhance(self, h: torch.Tensor, h5: torch.Tensor, branch: int = 0) -> torch.Tensor:
        return h * torch.sigmoid(self.att[branch](h - h5))

    def forward(self, h_a: torch.Tensor, h_b: torch.Tensor, h5: torch.Tensor) -> torch.Tensor:
        for h in (h_a, h_b, h5):
            if h.shape[1] != self.width:
                raise ValueError(f"RAM expects {self.width}-channel inputs, got {h.shape[1]}")
        size = _largest(h_a, h_b, h5)
        h_a, h_b, h5 = (upsample_to(h, size) for h in (h_a, h_b, h5))
        if self.attention:
            h_a, h_b = self.enhance(h_a, h5, 0), self.enhance(h_b, h5, 1)
        return self.fuse(torch.cat([h_a, h_b, h5], dim=1))


class SaliencyDetector(nn.Module):
    def __init__(self, backbone: Backbone, width: int = WIDTH, use_ram: bool = True):
        super().__init__()
        self.backbone = backbone
        self.reduce = ChannelReducer(backbone.channels, width)
        self.ram_local = RAM(width, attention=use_ram)
        self.ram_regional = RAM(width, attention=use_ram)

    def head_parameters(self):
        for mod in (self.reduce, self.ram_local, self.ram_regional):
            yield from mod.parameters()

    def fused(self, x: torch.Tensor):
        hs = self.reduce(self.backbone(x, (1, 2, 3, 4, 5)))
        r_l = self.ram_local(hs[1], hs[2], hs[5])
        r_r = self.ram_regional(hs[3], hs[4], hs[5])
        size = _largest(r_l, r_r)
        return upsample_to(r_l, size), upsample_to(r_r, size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits N x 1 x H x W at input resolution."""
        r_l, r_r = self.fused(x)
        logits = (r_l * r_r).sum(dim=1, keepdim=True)
        return upsample_to(logits, x.shape[-2:])


@dataclass
class SaliencyPrediction:
    logits: torch.Tensor
    prob: torch.Tensor

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "SaliencyPrediction":
        return cls(logits, torch.sigmoid(logits))


def detector_forward(model: SaliencyDetector, image: torch.Tensor) -> SaliencyPrediction:
    if image.ndim == 3:
        image = image[None]
    return SaliencyPrediction.from_logits(model(image))


# ---------------------------------------------------------------------------
# Loss


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).to(dtype)[None, None]


def ssim(x: torch.Tensor, y: torch.Tensor, window_size: int = 11) -> torch.Tensor:
    """Mean windowed SSIM of N x 1 x H x W maps (zero-padded Gaussian window)."""
    win = gaussian_window(window_size, dtype=x.dtype).to(x.device)
    pad = window_size // 2
    mu_x = F.conv2d(x, win, padding=pad)
    mu_y = F.conv2d(y, win, padding=pad)
    sxx = F.conv2d(x * x, win, padding=pad) - mu_x * mu_x
    syy = F.conv2d(y * y, win, padding=pad) - mu_y * mu_y
    sxy = F.conv2d(x * y, win, padding=pad) - mu_x * mu_y
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return (num / den).mean()


def iou_loss(prob: torch.Tensor, target: torch.Tensor, eps: float = IOU_EPS) -> torch.Tensor:
    dims = tuple(range(1, prob.ndim))
    inter = (prob * target).sum(dim=dims)
    union = prob.sum(dim=dims) + target.sum(dim=dims) - inter
    return (1 - (inter + eps) / (union + eps)).mean()


def hybrid_loss(pred, target: torch.Tensor):
    """BCE + (1 - SSIM) + IoU loss against a soft target; returns (total, bce, ssim, iou)."""
    prob = pred.prob if isinstance(pred, SaliencyPrediction) else pred
    if prob.shape != target.shape:
        raise ValueError(f"prediction {tuple(prob.shape)} and target {tuple(target.shape)} differ")
    if prob.ndim == 2:
        prob, target = prob[None, None], target[None, None]
    elif prob.ndim == 3:
        prob, target = prob[:, None], target[:, None]
    bce = F.binary_cross_entropy(prob, target)
    l_ssim = 1 - ssim(prob, target)
    l_iou = iou_loss(prob, target)
    return bce + l_ssim + l_iou, bce, l_ssim, l_iou


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def prob_to_numpy(pred: SaliencyPrediction) -> np.ndarray:
    return pred.prob.detach().cpu().numpy().squeeze()
