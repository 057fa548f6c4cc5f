"""ave-F_beta over 256 thresholds, MAE, and dataset-level reports."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .cues import is_degenerate, strategy_variances
from .data import load_dataset, read_label, resize_map

log = logging.getLogger(__name__)

BETA2 = 0.3
N_LEVELS = 256
RESOLUTION_NOTE = "metrics at ground-truth resolution; predictions resized bilinearly"


def f_beta(precision: float, recall: float, beta2: float = BETA2) -> float:
    den = beta2 * precision + recall
    if den == 0:
        return 0.0
    return (1 + beta2) * precision * recall / den


def pr_curve(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall at thresholds t = 0..255, positive iff 255 * pred >= t.

    Precision is 0 where nothing is predicted positive; recall is 0 for an
    empty ground truth.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    scores = 255.0 * np.asarray(pred, dtype=np.float64).ravel()
    fg = np.asarray(gt).ravel() > 0.5
    t = np.arange(N_LEVELS, dtype=np.float64)
    s_all = np.sort(scores)
    s_fg = np.sort(scores[fg])
    n_pos = scores.size - np.searchsorted(s_all, t, side="left")
    tp = s_fg.size - np.searchsorted(s_fg, t, side="left")
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(n_pos > 0, tp / np.maximum(n_pos, 1), 0.0)
    recall = tp / s_fg.size if s_fg.size else np.zeros(N_LEVELS)
    return precision, recall


def f_curve(precision: np.ndarray, recall: np.ndarray, beta2: float = BETA2) -> np.ndarray:
    den = beta2 * precision + recall
    with np.errstate(divide="ignore", invalid="ignore"):
        f = (1 + beta2) * precision * recall / den
    return np.where(den > 0, f, 0.0)


def ave_f_beta(pred: np.ndarray, gt: np.ndarray, beta2: float = BETA2) -> float:
    p, r = pr_curve(pred, gt)
    return float(f_curve(p, r, beta2).mean())


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return float(np.abs(pred - gt).mean())


@dataclass
class ImageScore:
    id: str
    ave_f_beta: float
    mae: float
    precision: np.ndarray
    recall: np.ndarray
    empty_gt: bool


def score_image(image_id: str, pred: np.ndarray, gt: np.ndarray, beta2: float = BETA2) -> ImageScore:
    if pred.shape != gt.shape:
        pred = resize_map(pred, gt.shape, "bilinear")
    pred = np.clip(pred, 0, 1)
    p, r = pr_curve(pred, gt)
    return ImageScore(image_id, float(f_curve(p, r, beta2).mean()), mae(pred, gt), p, r,
                      not bool(np.any(gt > 0.5)))


@dataclass
class MetricReport:
    dataset: str
    ave_f_beta: float
    mae: float
    pr_curve: np.ndarray  # 256 x 2 (precision, recall), mean over images
    n_images: int
    n_empty_gt: int = 0
    empty_gt_ids: list[str] = field(default_factory=list)
    beta2: float = BETA2
    note: str = RESOLUTION_NOTE

    @classmethod
    def from_scores(cls, dataset: str, scores: list[ImageScore], beta2: float = BETA2):
        if not scores:
            raise ValueError(f"no images scored for {dataset}")
        scores = sorted(scores, key=lambda s: s.id)
        curve = np.stack([np.mean([s.precision for s in scores], axis=0),
                          np.mean([s.recall for s in scores], axis=0)], axis=1)
        empty = [s.id for s in scores if s.empty_gt]
        return cls(dataset, float(np.mean([s.ave_f_beta for s in scores])),
                   float(np.mean([s.mae for s in scores])), curve, len(scores), len(empty), empty, beta2)

    def as_dict(self) -> dict[str, object]:
        return {"dataset": self.dataset, "ave_f_beta": self.ave_f_beta, "mae": self.mae,
                "n_images": self.n_images, "n_empty_gt": self.n_empty_gt, "beta2": self.beta2,
                "resolution": self.note}

    def table(self) -> str:
        return (f"{'dataset':<16}{'ave-F':>8}{'MAE':>8}{'images':>8}{'empty-gt':>10}\n"
                f"{self.dataset:<16}{self.ave_f_beta:>8.4f}{self.mae:>8.4f}"
                f"{self.n_images:>8d}{self.n_empty_gt:>10d}\n# {self.note}\n")

    def write(self, out_dir, pr_csv: bool = True) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = self.dataset.replace("/", "_").replace(":", "_")
        (out / f"{stem}.txt").write_text(self.table())
        (out / f"{stem}.kv").write_text("".join(f"{k}={v}\n" for k, v in self.as_dict().items()))
        if pr_csv:
            rows = ["threshold,precision,recall"]
            rows += [f"{t},{p:.10g},{r:.10g}" for t, (p, r) in enumerate(self.pr_curve)]
            (out / f"{stem}_pr.csv").write_text("\n".join(rows) + "\n")
        return out / f"{stem}.kv"


def read_kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line and not line.startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def evaluate_dataset(predictions_dir, root, name: str, split: str = "all",
                     beta2: float = BETA2) -> MetricReport:
    """Score ``<predictions_dir>/<id>.png`` against every ground-truth mask of the split."""
    records = [r for r in load_dataset(root, name, split) if r.gt_path is not None]
    pred_dir = Path(predictions_dir)
    missing = [r.id for r in records if not (pred_dir / f"{r.id}.png").exists()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} prediction(s) missing in {pred_dir}: {', '.join(missing[:20])}")
    scores = [score_image(r.id, read_label(pred_dir / f"{r.id}.png").values, r.gt, beta2) for r in records]
    label = name if split == "all" else f"{name}:{split}"
    return MetricReport.from_scores(label, scores, beta2)


def strategy_variance_report(activation_maps: Iterable[np.ndarray]) -> tuple[dict[str, float], int]:
    """Dataset mean inter-group variance per thresholding strategy.

    Constant maps are excluded; their count is returned alongside.
    """
    sums: dict[str, float] = {}
    n, n_degenerate = 0, 0
    for m in activation_maps:
        if is_degenerate(m):
            n_degenerate += 1
            continue
        for k, v in strategy_variances(m).items():
            sums[k] = sums.get(k, 0.0) + v
        n += 1
    if n == 0:
        return {}, n_degenerate
    return {k: v / n for k, v in sums.items()}, n_degenerate
