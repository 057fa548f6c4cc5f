"""Pre-trained ResNet encoder exposing five feature stages.

Stage numbering: stage 1 is the stem after max-pooling (stride 4), stages
2-5 are the four residual layers (strides 4, 8, 16, 32).
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import torch
import torch.nn as nn
import torchvision

log = logging.getLogger(__name__)

ARCHITECTURES = {
    "resnet18": (torchvision.models.resnet18, (64, 64, 128, 256, 512)),
    "resnet34": (torchvision.models.resnet34, (64, 64, 128, 256, 512)),
    "resnet50": (torchvision.models.resnet50, (64, 256, 512, 1024, 2048)),
    "resnet101": (torchvision.models.resnet101, (64, 256, 512, 1024, 2048)),
}
STRIDES = {1: 4, 2: 4, 3: 8, 4: 16, 5: 32}
# Key prefixes found in self-supervised checkpoints, tried in order.
KNOWN_PREFIXES = ("module.encoder_q.", "encoder_q.", "module.base_encoder.", "module.", "encoder.")


class BackboneError(RuntimeError):
    pass


@dataclass
class FeaturePyramid:
    levels: dict[int, torch.Tensor] = field(default_factory=dict)
    strides: dict[int, int] = field(default_factory=dict)

    def __getitem__(self, stage: int) -> torch.Tensor:
        if stage not in self.levels:
            raise KeyError(f"stage {stage} not in pyramid (have {sorted(self.levels)})")
        return self.levels[stage]

    def __len__(self):
        return len(self.levels)


class Backbone(nn.Module):
    """ResNet trunk without pooling/classifier; holds the trainable flag.

    A frozen backbone stays in eval mode even when its parent calls
    ``train()``, so BN running statistics never move.
    """

    def __init__(self, architecture_id: str = "resnet50"):
        super().__init__()
        if architecture_id not in ARCHITECTURES:
            raise BackboneError(f"unknown architecture {architecture_id!r}")
        ctor, channels = ARCHITECTURES[architecture_id]
        net = ctor(weights=None)
        self.architecture_id = architecture_id
        self.channels = dict(zip(range(1, 6), channels))
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4
        self.source_checksum = ""
        self._trainable = False
        self.set_trainable(False)

    @property
    def trainable(self) -> bool:
        return self._trainable

    def set_trainable(self, flag: bool) -> "Backbone":
        self._trainable = bool(flag)
        for p in self.parameters():
            p.requires_grad_(self._trainable)
        if not self._trainable:
            super().train(False)
        return self

    def train(self, mode: bool = True):
        return super().train(mode and self._trainable)

    def stages(self):
        return (self.stem, self.layer1, self.layer2, self.layer3, self.layer4)

    def forward(self, x: torch.Tensor, stages: Iterable[int] = (1, 2, 3, 4, 5)) -> FeaturePyramid:
        wanted = set(stages)
        bad = wanted - set(STRIDES)
        if bad:
            raise BackboneError(f"architecture {self.architecture_id} has no stage(s) {sorted(bad)}")
        pyr = FeaturePyramid()
        if not wanted:
            return pyr
        last = max(wanted)
        with torch.set_grad_enabled(torch.is_grad_enabled() and self._trainable):
            for idx, block in enumerate(self.stages()[:last], start=1):
                x = block(x)
                if idx in wanted:
                    pyr.levels[idx] = x
                    pyr.strides[idx] = STRIDES[idx]
        return pyr


def state_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _strip_prefix(state: dict, prefix: Optional[str]) -> dict:
    if prefix is None:
        for cand in KNOWN_PREFIXES:
            if any(k.startswith(cand) for k in state):
                prefix = cand
                break
        else:
            prefix = ""
    if not prefix:
        return dict(state)
    return {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}


def _remap(key: str) -> Optional[str]:
    """torchvision ResNet key -> Backbone key; ``None`` for head parameters."""
    if key.startswith(("fc.", "head.", "classifier.")):
        return None
    for src, dst in (("conv1.", "stem.0."), ("bn1.", "stem.1.")):
        if key.startswith(src):
            return dst + key[len(src):]
    if key.startswith(("layer1.", "layer2.", "layer3.", "layer4.")):
        return key
    return None


def load_backbone(weights_path, architecture_id: str = "resnet50",
                  prefix: Optional[str] = None) -> Backbone:
    """Load encoder weights; classifier/projection heads in the file are ignored.

    ``prefix`` is stripped from every key; ``None`` auto-detects the usual
    MoCo/DataParallel prefixes.
    """
    path = Path(weights_path)
    if not path.exists():
        raise BackboneError(f"weights file {path} not found")
    raw = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(raw, dict) and "state_dict" in raw and isinstance(raw["state_dict"], dict):
        raw = raw["state_dict"]
    state = _strip_prefix(raw, prefix)

    model = Backbone(architecture_id)
    target = model.state_dict()
    loaded = {}
    for k, v in state.items():
        mk = _remap(k)
        if mk is None:
            continue
        if mk not in target:
            raise BackboneError(f"parameter {k!r} does not exist in {architecture_id}")
        if tuple(v.shape) != tuple(target[mk].shape):
            raise BackboneError(
                f"shape mismatch for {k!r}: file {tuple(v.shape)} vs {architecture_id} {tuple(target[mk].shape)}")
        loaded[mk] = v
    missing = sorted(set(target) - set(loaded))
    missing = [m for m in missing if not m.endswith("num_batches_tracked")]
    if missing:
        raise BackboneError(f"weights file lacks {len(missing)} encoder tensors, first: {missing[0]!r}")
    model.load_state_dict(loaded, strict=False)
    h = hashlib.sha256(path.read_bytes()).hexdigest()
    model.source_checksum = h
    return model


def random_backbone(architecture_id: str = "resnet50", seed: int = 0) -> Backbone:
    """Seeded randomly-initialised encoder, for runs without pre-trained weights."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = Backbone(architecture_id)
    model.source_checksum = f"random:{architecture_id}:{seed}"
    return model


def save_backbone_weights(model: Backbone, path, prefix: str = "") -> Path:
    """Write weights in torchvision key layout (optionally prefixed)."""
    out = {}
    for k, v in model.state_dict().items():
        if k.startswith("stem.0."):
            k = "conv1." + k[len("stem.0."):]
        elif k.startswith("stem.1."):
            k = "bn1." + k[len("stem.1."):]
        out[prefix + k] = v.clone()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": out}, path)
    return path


def extract_features(state: Backbone, images: torch.Tensor, stages: Iterable[int]) -> FeaturePyramid:
    if images.ndim == 3:
        images = images[None]
    return state(images, stages)


def set_trainable(state: Backbone, flag: bool) -> Backbone:
    return state.set_trainable(flag)
