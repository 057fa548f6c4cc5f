"""Dataset loading, preprocessing, flip augmentation and 8-bit label I/O.

Datasets follow the usual SOD benchmark layout::

    <root>/<name>/images/<id>.jpg|png
    <root>/<name>/gt/<id>.png
    <root>/<name>/<split>.txt        (optional, one id per line)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset

log = logging.getLogger(__name__)

IMAGE_EXTS = (".jpg", ".jpeg", ".png", ".bmp")
SPLITS = ("train", "val", "test", "all")

# ImageNet statistics, which MoCo-style ResNet checkpoints are trained with.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DatasetError(RuntimeError):
    """Raised for a missing or malformed dataset layout."""


@dataclass
class ImageRecord:
    """One dataset sample. Pixels are decoded on access to bound memory use."""

    id: str
    image_path: Path
    gt_path: Optional[Path]
    source_size: tuple[int, int]

    @property
    def image(self) -> np.ndarray:
        with Image.open(self.image_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
        return arr / 255.0

    @property
    def image_u8(self) -> np.ndarray:
        with Image.open(self.image_path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()

    @property
    def gt(self) -> Optional[np.ndarray]:
        if self.gt_path is None:
            return None
        with Image.open(self.gt_path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
        return (arr >= 128).astype(np.float32)


@dataclass
class NormalizedImage:
    id: str
    pixels: np.ndarray  # size x size x 3, standardized
    flip_applied: bool = False
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1)))

    def denormalize(self) -> np.ndarray:
        return self.pixels * np.asarray(self.std, np.float32) + np.asarray(self.mean, np.float32)


@dataclass
class LabelImage:
    id: str
    values: np.ndarray  # h x w in [0, 1]
    epoch_version: int = 0
    degenerate: bool = False

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"label {self.id}: expected a 2-D map, got shape {self.values.shape}")


@dataclass
class SkipReport:
    entries: list[tuple[str, str]] = field(default_factory=list)

    def add(self, image_id: str, reason: str) -> None:
        log.warning("skipping %s: %s", image_id, reason)
        self.entries.append((image_id, reason))

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{i}\t{r}\n" for i, r in self.entries))


def _split_ids(ds_dir: Path, split: str) -> Optional[set[str]]:
    """Ids listed for ``split``; ``None`` means every image in the directory."""
    parts = split.split("+")
    for p in parts:
        if p not in SPLITS:
            raise DatasetError(f"unknown split {p!r}; expected one of {SPLITS}")
    if "all" in parts:
        return None
    ids: set[str] = set()
    for p in parts:
        list_file = ds_dir / f"{p}.txt"
        if not list_file.exists():
            log.warning("%s has no %s.txt; using every image for split %r", ds_dir, p, split)
            return None
        ids.update(x.strip() for x in list_file.read_text().splitlines() if x.strip())
    return ids


def load_dataset(root, dataset_name: str, split: str = "all",
                 skip_report: Optional[SkipReport] = None) -> list[ImageRecord]:
    ds_dir = Path(root) / dataset_name
    img_dir = ds_dir / "images"
    if not img_dir.is_dir():
        raise DatasetError(f"missing image directory {img_dir}")
    wanted = _split_ids(ds_dir, split)
    gt_dir = ds_dir / "gt"
    gt_files = {p.stem: p for p in gt_dir.glob("*.png")} if gt_dir.is_dir() else {}

    records = []
    for path in sorted(img_dir.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTS:
            continue
        if wanted is not None and path.stem not in wanted:
            continue
        try:
            with Image.open(path) as im:
                w, h = im.size
        except (UnidentifiedImageError, OSError) as exc:
            if skip_report is not None:
                skip_report.add(path.stem, f"unreadable: {exc}")
            else:
                log.warning("skipping unreadable %s: %s", path, exc)
            continue
        records.append(ImageRecord(path.stem, path, gt_files.get(path.stem), (h, w)))
    records.sort(key=lambda r: r.id)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"duplicate image ids in {img_dir}")
    return records


def resize_map(arr: np.ndarray, size: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    """Resize an H x W or H x W x C float array to ``size`` = (height, width)."""
    if arr.shape[:2] == tuple(size):
        return arr.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    t = t[None, None] if t.ndim == 2 else t.permute(2, 0, 1)[None]
    kw = {"align_corners": False} if mode == "bilinear" else {}
    out = F.interpolate(t, size=tuple(size), mode=mode, **kw)[0]
    out = out[0] if arr.ndim == 2 else out.permute(1, 2, 0)
    return out.numpy()


def preprocess(record: ImageRecord, size: int = 320, mean=IMAGENET_MEAN, std=IMAGENET_STD,
               image: Optional[np.ndarray] = None) -> NormalizedImage:
    if size <= 0:
        raise ValueError("size must be positive")
    if any(s == 0 for s in std):
        raise ValueError("std components must be nonzero")
    img = record.image if image is None else image
    if img.shape[0] == 1 and img.shape[1] == 1:
        log.warning("%s is a 1x1 image", record.id)
    img = resize_map(img, (size, size), "bilinear")
    pixels = (img - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return NormalizedImage(record.id, pixels.astype(np.float32), False, tuple(mean), tuple(std))


def flip_decision(seed: int, epoch: int, index: int) -> bool:
    """Seeded fair coin, independent of worker layout."""
    return bool(np.random.default_rng([seed, epoch, index]).random() < 0.5)


def augment(image: NormalizedImage, label: Optional[LabelImage], flip: bool):
    if not flip:
        return image, label
    out_img = NormalizedImage(image.id, image.pixels[:, ::-1].copy(), not image.flip_applied,
                              image.mean, image.std)
    out_lbl = None
    if label is not None:
        if label.values.shape != image.pixels.shape[:2]:
            raise ValueError(f"label {label.id} not aligned with its image")
        out_lbl = LabelImage(label.id, label.values[:, ::-1].copy(), label.epoch_version,
                             label.degenerate)
    return out_img, out_lbl


def to_u8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_label(label: LabelImage, directory) -> Path:
    directory = Path(directory)
    path = directory / f"{label.id}.png"
    if np.any(label.values < 0) or np.any(label.values > 1):
        raise ValueError(f"label {label.id} has values outside [0, 1]")
    try:
        directory.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_u8(label.values), mode="L").save(path)
    except OSError as exc:
        raise OSError(f"failed to write label {path}: {exc}") from exc
    return path


def read_label(path, epoch_version: int = 0) -> LabelImage:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except OSError as exc:
        raise OSError(f"failed to read label {path}: {exc}") from exc
    return LabelImage(path.stem, arr / 255.0, epoch_version)


class SaliencyDataset(Dataset):
    """Resized, standardized training/eval images with optional soft targets.

    ``labels`` maps id -> size x size array; targets are looked up at item
    time so the caller can swap label versions between epochs.
    """

    def __init__(self, records: Sequence[ImageRecord], size: int, mean=IMAGENET_MEAN,
                 std=IMAGENET_STD, seed: int = 0, flip: bool = False, labels=None):
        self.records = list(records)
        self.size = size
        self.mean, self.std = mean, std
        self.seed = seed
        self.flip = flip
        self.labels = labels
        self.epoch = 0

    def __len__(self):
        return len(self.records)

    def __getitem__(self, index):
        rec = self.records[index]
        img = preprocess(rec, self.size, self.mean, self.std)
        lbl = None
        if self.labels is not None:
            lbl = LabelImage(rec.id, np.array(self.labels[rec.id], np.float32))
        flip = self.flip and flip_decision(self.seed, self.epoch, index)
        img, lbl = augment(img, lbl, flip)
        item = {"index": index, "image": img.to_tensor(), "flip": flip}
        if lbl is not None:
            item["label"] = torch.from_numpy(np.ascontiguousarray(lbl.values))[None]
        return item
