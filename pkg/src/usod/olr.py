"""Online label rectifying: an epoch-versioned store of soft pseudo labels.

At the end of epoch j each label becomes ``lam * G_j + (1 - lam) * Y_j``
where ``Y_j`` is the detector's prediction made while training on ``G_j``.
Stores are immutable; an update returns a new store, so a reader holding
an epoch's store never sees a half-written version.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .data import LabelImage, read_label, write_label


@dataclass(frozen=True)
class LambdaSchedule:
    warmup_epochs: int = 2
    warmup_value: float = 1.0
    value: float = 0.4

    def __post_init__(self):
        for v in (self.warmup_value, self.value):
            if not 0.0 <= v <= 1.0:
                raise ValueError("lambda must lie in [0, 1]")

    def __call__(self, epoch: int) -> float:
        if epoch < 1:
            raise ValueError("epochs are numbered from 1")
        return self.warmup_value if epoch <= self.warmup_epochs else self.value


def lambda_schedule(epoch: int, warmup_epochs: int = 2, value: float = 0.4) -> float:
    return LambdaSchedule(warmup_epochs, 1.0, value)(epoch)


@dataclass(frozen=True)
class LabelStore:
    labels: Mapping[str, np.ndarray]
    epoch: int = 1
    schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    lambdas: tuple[float, ...] = ()  # lambda applied at the end of epochs 1 .. epoch-1

    @classmethod
    def from_labels(cls, labels: Mapping[str, np.ndarray], schedule: LambdaSchedule | None = None):
        frozen = {}
        for k, v in labels.items():
            arr = np.array(v, dtype=np.float32)
            if arr.size and (arr.min() < 0 or arr.max() > 1):
                raise ValueError(f"label {k} has values outside [0, 1]")
            arr.setflags(write=False)
            frozen[k] = arr
        return cls(MappingProxyType(frozen), 1, schedule or LambdaSchedule())

    def __contains__(self, image_id):
        return image_id in self.labels

    def __len__(self):
        return len(self.labels)

    def ids(self) -> list[str]:
        return sorted(self.labels)

    def __getitem__(self, image_id) -> np.ndarray:
        return self.labels[image_id]


def snapshot(store: LabelStore, image_id: str) -> LabelImage:
    if image_id not in store.labels:
        raise KeyError(f"no pseudo label for {image_id!r}")
    return LabelImage(image_id, store.labels[image_id].copy(), store.epoch)


def update_labels(store: LabelStore, predictions: Mapping[str, np.ndarray]) -> LabelStore:
    """Blend every label with its prediction and advance the epoch."""
    missing = sorted(set(store.labels) - set(predictions))
    if missing:
        raise KeyError(f"no prediction for {len(missing)} training id(s), first {missing[0]!r}")
    extra = sorted(set(predictions) - set(store.labels))
    if extra:
        raise KeyError(f"prediction for unknown id(s), first {extra[0]!r}")
    lam = store.schedule(store.epoch)
    new = {}
    for k, g in store.labels.items():
        y = np.asarray(predictions[k], dtype=np.float32)
        if y.shape != g.shape:
            raise ValueError(f"prediction for {k} has shape {y.shape}, label has {g.shape}")
        # G + (1 - lam)(Y - G) is exact at lam == 1 and at G == Y; clipping
        # keeps float rounding inside the convex hull.
        out = g + np.float32(1.0 - lam) * (y - g)
        out = np.clip(out, np.minimum(g, y), np.maximum(g, y))
        out.setflags(write=False)
        new[k] = out
    return LabelStore(MappingProxyType(new), store.epoch + 1, store.schedule, store.lambdas + (lam,))


def epoch_dir(root, epoch: int) -> Path:
    return Path(root) / f"epoch_{epoch}"


def save_store(store: LabelStore, root) -> Path:
    """Write ``<root>/epoch_<j>/<id>.png`` (8-bit, quantised once) and update the manifest."""
    out = epoch_dir(root, store.epoch)
    for k in store.ids():
        write_label(LabelImage(k, store.labels[k], store.epoch), out)
    manifest = Path(root) / "manifest.txt"
    lines = [f"lambda_epoch_{j}={lam}" for j, lam in enumerate(store.lambdas, start=1)]
    schedule = store.schedule
    lines += [f"warmup_epochs={schedule.warmup_epochs}", f"warmup_lambda={schedule.warmup_value}",
              f"lambda={schedule.value}", f"latest_epoch={store.epoch}"]
    persisted = set()
    if manifest.exists():
        for line in manifest.read_text().splitlines():
            if line.startswith("persisted_epochs="):
                persisted.update(int(x) for x in line.split("=", 1)[1].split(",") if x)
    persisted.add(store.epoch)
    lines.append("persisted_epochs=" + ",".join(str(e) for e in sorted(persisted)))
    manifest.write_text("\n".join(lines) + "\n")
    return out


def load_store(root, epoch: int, schedule: LambdaSchedule | None = None) -> LabelStore:
    d = epoch_dir(root, epoch)
    labels = {p.stem: read_label(p).values for p in sorted(d.glob("*.png"))}
    store = LabelStore.from_labels(labels, schedule)
    return LabelStore(store.labels, epoch, store.schedule, ())
