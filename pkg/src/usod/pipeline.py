"""Config-driven training, extraction, inference, evaluation and ablation runs.

Workdir layout::

    <workdir>/config.txt, manifest.txt
    <workdir>/stage1/{manifest.txt, loss_log.tsv, checkpoint.pt}
    <workdir>/pseudo/init/<id>.png            stage-1 pseudo labels
    <workdir>/pseudo/epoch_<j>/<id>.png       OLR versions (configured epochs)
    <workdir>/stage2/{manifest.txt, loss_log.tsv, checkpoint.pt}
    <workdir>/predictions/<dataset>/<id>.png
    <workdir>/reports/<dataset>.{txt,kv}, <dataset>_pr.csv
    <workdir>/ablation/<cell>/...
"""
from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
from torch.utils.data import DataLoader

from . import __version__
from .backbone import Backbone, load_backbone, random_backbone, state_checksum
from .config import RunConfig, copy_config
from .cues import LEVELS, CueNetwork, DBVariant, activation_map, adb_decision_values, adb_loss
from .data import (LabelImage, SaliencyDataset, SkipReport, load_dataset, read_label, resize_map,
                   write_label)
from .detector import SaliencyDetector, hybrid_loss
from .metrics import MetricReport, evaluate_dataset, strategy_variance_report
from .olr import LabelStore, LambdaSchedule, save_store, update_labels
from .postprocess import make_pseudo_label

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def lr_at(base: float, epoch: int, decay_epochs: Iterable[int], factor: float) -> float:
    """Learning rate for 1-based ``epoch``; a decay at epoch d applies from epoch d + 1."""
    return base * factor ** sum(1 for d in decay_epochs if epoch > d)


def lr_trace(stage_cfg) -> list[float]:
    return [lr_at(stage_cfg.lr, e, stage_cfg.decay_epochs, stage_cfg.decay_factor)
            for e in range(1, stage_cfg.epochs + 1)]


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


def build_backbone(cfg: RunConfig) -> Backbone:
    if cfg.backbone_weights:
        prefix = None if cfg.backbone_prefix == "auto" else cfg.backbone_prefix
        return load_backbone(cfg.backbone_weights, cfg.backbone_arch, prefix)
    log.warning("no backbone weights configured; using a seeded random %s", cfg.backbone_arch)
    return random_backbone(cfg.backbone_arch, cfg.seed)


def train_records(cfg: RunConfig, skip: Optional[SkipReport] = None):
    recs = load_dataset(cfg.data_root, cfg.train_dataset, cfg.train_split, skip)
    return recs[:cfg.max_images] if cfg.max_images else recs


def write_manifest(path: Path, cfg: RunConfig, **extra) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    items = {"config_hash": cfg.digest(), "code_version": __version__, "seed": cfg.seed,
             "backbone_arch": cfg.backbone_arch, "momentum": cfg.momentum,
             "weight_decay": cfg.weight_decay, "written": time.strftime("%Y-%m-%dT%H:%M:%S")}
    items.update(extra)
    path.write_text("".join(f"{k}={v}\n" for k, v in items.items()))
    (path.parent / "config.txt").write_text(cfg.to_text())
    return path


def _loader(ds: SaliencyDataset, cfg: RunConfig, epoch: int, shuffle: bool) -> DataLoader:
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + epoch)
    return DataLoader(ds, batch_size=cfg.batch_size, shuffle=shuffle, generator=gen,
                      num_workers=cfg.num_workers)


def _sgd(params, cfg: RunConfig, lr: float):
    return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def read_loss_log(path) -> list[dict[str, float]]:
    lines = Path(path).read_text().splitlines()
    keys = lines[0].split("\t")
    return [dict(zip(keys, map(float, ln.split("\t")))) for ln in lines[1:]]


# ---------------------------------------------------------------------------
# stage 1


def build_cue_network(cfg: RunConfig, backbone: Optional[Backbone] = None) -> CueNetwork:
    bb = backbone or build_backbone(cfg)
    bb.set_trainable(not cfg.stage1.freeze_encoder)
    return CueNetwork(bb, cfg.stage1.head_width, DBVariant(cfg.stage1.db_variant))


@torch.no_grad()
def train_mean_feature(net: CueNetwork, ds: SaliencyDataset, cfg: RunConfig) -> torch.Tensor:
    """Mean fused feature over the training split (DB1's fixed bias)."""
    net.eval()
    total, count = torch.zeros(net.width), 0
    for batch in _loader(ds, cfg, 0, shuffle=False):
        f = net(batch["image"])["F"]
        total += f.sum(dim=(0, 2, 3))
        count += f.shape[0] * f.shape[2] * f.shape[3]
    return total / max(count, 1)


def stage1_guard(alpha: float) -> tuple[float, float]:
    return -(0.25 + 0.5 * alpha) - 0.05, 0.05


def run_stage1_train(cfg: RunConfig) -> Path:
    cfg.validate()
    out = Path(cfg.workdir) / "stage1"
    seed_everything(cfg.seed)
    net = build_cue_network(cfg)
    s1 = cfg.stage1
    write_manifest(out / "manifest.txt", cfg, stage=1, alpha=s1.alpha, drop_rate=s1.drop_rate,
                   head_width=s1.head_width, db_variant=s1.db_variant,
                   se_head="conv3x3-bn > gap > linear(C,C/4) > relu > linear(C/4,C) > sigmoid",
                   aux_supervision=s1.aux_supervision, freeze_encoder=s1.freeze_encoder,
                   architecture_id=net.backbone.architecture_id,
                   backbone_source=net.backbone.source_checksum)
    skip = SkipReport()
    records = train_records(cfg, skip)
    skip.write(out / "skipped.txt")
    ds = SaliencyDataset(records, cfg.image_size, cfg.mean, cfg.std, cfg.seed, flip=True)
    if net.db_variant is DBVariant.DB1:
        ds.flip = False
        net.set_train_mean(train_mean_feature(net, ds, cfg))
        ds.flip = True

    params = list(net.head_parameters())
    if net.backbone.trainable:
        params += list(net.backbone.parameters())
    opt = _sgd(params, cfg, s1.lr)
    levels = LEVELS if s1.aux_supervision else ("F",)
    lo, hi = stage1_guard(s1.alpha)
    gen = torch.Generator().manual_seed(cfg.seed)
    log_lines = ["epoch\tlr\tloss"]
    for epoch in range(1, s1.epochs + 1):
        lr = lr_at(s1.lr, epoch, s1.decay_epochs, s1.decay_factor)
        for g in opt.param_groups:
            g["lr"] = lr
        ds.epoch = epoch
        net.train()
        total, n = 0.0, 0
        for batch in _loader(ds, cfg, epoch, shuffle=True):
            outs = net(batch["image"])
            loss = adb_loss([net.theta(outs[k]) for k in levels], s1.alpha, s1.drop_rate, gen)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            bs = batch["image"].shape[0]
            total += float(loss.detach()) * bs
            n += bs
        mean_loss = total / max(n, 1)
        log.info("stage1 epoch %d lr %.4g loss %.5f", epoch, lr, mean_loss)
        log_lines.append(f"{epoch}\t{lr:.10g}\t{mean_loss:.10g}")
        (out / "loss_log.tsv").write_text("\n".join(log_lines) + "\n")
        if not (lo <= mean_loss <= hi) or math.isnan(mean_loss):
            raise TrainingDiverged(
                f"stage-1 loss {mean_loss:.4f} left [{lo:.3f}, {hi:.3f}] at epoch {epoch}")
    (out / "loss_log.tsv").write_text("\n".join(log_lines) + "\n")
    return save_cue_checkpoint(net, cfg, out / "checkpoint.pt")


def save_cue_checkpoint(net: CueNetwork, cfg: RunConfig, path: Path) -> Path:
    state = {k: v for k, v in net.state_dict().items()
             if net.backbone.trainable or not k.startswith("backbone.")}
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": state, "config": cfg.to_text(),
                "backbone_checksum": state_checksum(net.backbone),
                "encoder_included": net.backbone.trainable}, path)
    return path


def load_cue_network(cfg: RunConfig, checkpoint) -> CueNetwork:
    path = Path(checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"stage-1 checkpoint {path} not found")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    net = build_cue_network(cfg)
    missing, unexpected = net.load_state_dict(ckpt["state_dict"], strict=False)
    if unexpected or any(not k.startswith("backbone.") for k in missing):
        raise ValueError(f"checkpoint {path} does not match the configured heads")
    if not ckpt["encoder_included"] and state_checksum(net.backbone) != ckpt["backbone_checksum"]:
        raise ValueError(f"checkpoint {path} was trained on different encoder weights")
    net.backbone.set_trainable(False)
    net.eval()
    return net


@torch.no_grad()
def fused_features(net: CueNetwork, records, cfg: RunConfig):
    """Yield (record, fused feature C x h x w) for every record, un-flipped."""
    net.eval()
    ds = SaliencyDataset(records, cfg.image_size, cfg.mean, cfg.std, cfg.seed, flip=False)
    for batch in _loader(ds, cfg, 0, shuffle=False):
        feats = net(batch["image"])["F"]
        for i, f in zip(batch["index"].tolist(), feats):
            yield records[i], f


def _aux_vector(net: CueNetwork):
    if net.db_variant is DBVariant.DB1:
        return net.train_mean_feature
    if net.db_variant is DBVariant.DB4:
        return net.db_weight.detach()
    return None


def run_extract(cfg: RunConfig, stage1_checkpoint, out_dir=None) -> Path:
    net = load_cue_network(cfg, stage1_checkpoint)
    out = Path(out_dir) if out_dir else Path(cfg.workdir) / "pseudo" / "init"
    out.mkdir(parents=True, exist_ok=True)
    records = train_records(cfg)
    aux = _aux_vector(net)
    degenerate = []
    for rec, f in fused_features(net, records, cfg):
        dvm = adb_decision_values(f, net.db_variant, aux)
        label = make_pseudo_label(rec, dvm, cfg.crf, cfg.median_kernel)
        if label.degenerate:
            degenerate.append(rec.id)
        write_label(label, out)
    report = [f"n_images={len(records)}", f"n_degenerate={len(degenerate)}",
              f"degenerate_ids={','.join(degenerate)}", f"checkpoint={stage1_checkpoint}"]
    (out.parent / f"{out.name}_report.txt").write_text("\n".join(report) + "\n")
    return out


def run_activation_baseline(cfg: RunConfig, stage1_checkpoint, out_dir) -> Path:
    """Raw activation maps binarised at their mean, upsampled to source size (no sign, no CRF)."""
    net = load_cue_network(cfg, stage1_checkpoint)
    out = Path(out_dir)
    for rec, f in fused_features(net, train_records(cfg), cfg):
        m = activation_map(f.double()).numpy()
        binary = (m >= m.mean()).astype(np.float32)
        write_label(LabelImage(rec.id, resize_map(binary, rec.source_size, "nearest")), out)
    return out


def run_strategy_report(cfg: RunConfig, stage1_checkpoint) -> tuple[dict[str, float], int]:
    net = load_cue_network(cfg, stage1_checkpoint)
    maps = (activation_map(f.double()).numpy() for _, f in fused_features(net, train_records(cfg), cfg))
    return strategy_variance_report(maps)


# ---------------------------------------------------------------------------
# stage 2


def _persist_epochs(text: str, total: int) -> set[int]:
    out = set()
    for tok in text.split(","):
        tok = tok.strip()
        if tok == "initial":
            out.add(1)
        elif tok == "final":
            out.add(total + 1)
        elif tok:
            out.add(int(tok))
    return out


def load_pseudo_labels(records, pseudo_dir, size: int) -> dict[str, np.ndarray]:
    pseudo_dir = Path(pseudo_dir)
    missing = [r.id for r in records if not (pseudo_dir / f"{r.id}.png").exists()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} training id(s) lack a pseudo label in {pseudo_dir}, "
                                f"first {missing[0]!r}")
    return {r.id: resize_map(read_label(pseudo_dir / f"{r.id}.png").values, (size, size), "bilinear")
            for r in records}


def run_stage2_train(cfg: RunConfig, pseudo_dir) -> Path:
    cfg.validate()
    s2 = cfg.stage2
    out = Path(cfg.workdir) / "stage2"
    seed_everything(cfg.seed)
    backbone = build_backbone(cfg).set_trainable(True)
    model = SaliencyDetector(backbone, use_ram=s2.use_ram)
    write_manifest(out / "manifest.txt", cfg, stage=2, olr=s2.olr, use_ram=s2.use_ram,
                   lambda_after_warmup=s2.lambda_after_warmup, warmup_epochs=s2.warmup_epochs,
                   architecture_id=backbone.architecture_id, backbone_source=backbone.source_checksum,
                   pseudo_dir=pseudo_dir)
    records = train_records(cfg)
    schedule = LambdaSchedule(s2.warmup_epochs, 1.0, s2.lambda_after_warmup)
    store = LabelStore.from_labels(load_pseudo_labels(records, pseudo_dir, cfg.image_size), schedule)
    store_root = Path(cfg.workdir) / "pseudo"
    persist = _persist_epochs(s2.persist_epochs, s2.epochs)
    if s2.olr and store.epoch in persist:
        save_store(store, store_root)

    ds = SaliencyDataset(records, cfg.image_size, cfg.mean, cfg.std, cfg.seed, flip=True, labels=store)
    opt = _sgd(model.parameters(), cfg, s2.lr)
    log_lines = ["epoch\tlr\tloss\tbce\tssim\tiou\tlabel_epoch"]
    for epoch in range(1, s2.epochs + 1):
        lr = lr_at(s2.lr, epoch, s2.decay_epochs, s2.decay_factor)
        for g in opt.param_groups:
            g["lr"] = lr
        ds.epoch, ds.labels = epoch, store
        model.train()
        sums, n = np.zeros(4), 0
        preds: dict[str, np.ndarray] = {}
        for batch in _loader(ds, cfg, epoch, shuffle=True):
            prob = torch.sigmoid(model(batch["image"]))
            total, bce, l_ssim, l_iou = hybrid_loss(prob, batch["label"])
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            bs = prob.shape[0]
            sums += bs * np.array([float(v.detach()) for v in (total, bce, l_ssim, l_iou)])
            n += bs
            p = prob.detach()[:, 0].numpy()
            for j, (idx, flipped) in enumerate(zip(batch["index"].tolist(), batch["flip"].tolist())):
                preds[records[idx].id] = p[j, :, ::-1].copy() if flipped else p[j].copy()
        means = sums / max(n, 1)
        log.info("stage2 epoch %d lr %.4g loss %.5f (label epoch %d)", epoch, lr, means[0], store.epoch)
        log_lines.append(f"{epoch}\t{lr:.10g}\t" + "\t".join(f"{v:.10g}" for v in means)
                         + f"\t{store.epoch}")
        (out / "loss_log.tsv").write_text("\n".join(log_lines) + "\n")
        if s2.olr:
            store = update_labels(store, preds)
            if store.epoch in persist:
                save_store(store, store_root)
    path = out / "checkpoint.pt"
    torch.save({"state_dict": model.state_dict(), "config": cfg.to_text()}, path)
    return path


def load_detector(cfg: RunConfig, checkpoint) -> SaliencyDetector:
    path = Path(checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"stage-2 checkpoint {path} not found")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    model = SaliencyDetector(Backbone(cfg.backbone_arch).set_trainable(True), use_ram=cfg.stage2.use_ram)
    model.load_state_dict(ckpt["state_dict"])
    model.backbone.set_trainable(False)
    model.eval()
    return model


def _dataset_dirname(name: str, split: str) -> str:
    return name if split == "all" else f"{name}_{split}"


@torch.no_grad()
def run_infer(cfg: RunConfig, stage2_checkpoint, dataset: str, split: str = "all", out_dir=None) -> Path:
    model = load_detector(cfg, stage2_checkpoint)
    records = load_dataset(cfg.data_root, dataset, split)
    out = Path(out_dir) if out_dir else Path(cfg.workdir) / "predictions" / _dataset_dirname(dataset, split)
    out.mkdir(parents=True, exist_ok=True)
    ds = SaliencyDataset(records, cfg.image_size, cfg.mean, cfg.std, cfg.seed, flip=False)
    for batch in _loader(ds, cfg, 0, shuffle=False):
        prob = torch.sigmoid(model(batch["image"]))[:, 0].numpy()
        for i, p in zip(batch["index"].tolist(), prob):
            rec = records[i]
            full = np.clip(resize_map(p, rec.source_size, "bilinear"), 0, 1)
            write_label(LabelImage(rec.id, full), out)
    return out


def run_eval(cfg: RunConfig, dataset: str, split: str = "all", predictions_dir=None,
             report_dir=None) -> MetricReport:
    pred = Path(predictions_dir) if predictions_dir else \
        Path(cfg.workdir) / "predictions" / _dataset_dirname(dataset, split)
    report = evaluate_dataset(pred, cfg.data_root, dataset, split)
    report.write(Path(report_dir) if report_dir else Path(cfg.workdir) / "reports")
    return report


# ---------------------------------------------------------------------------
# ablation

STAGE1_CELLS = {"A0", "A1", "A2", "A3", "DB1", "DB2", "DB3", "DB4", "DB5"}
STAGE2_CELLS = {"RAM", "CONV", "OLR-on", "OLR-off"}


@dataclass
class Cell:
    name: str
    stage: int
    changes: dict


def parse_cell(name: str) -> Cell:
    if name == "A0":
        return Cell(name, 1, {"stage1.freeze_encoder": "false"})
    if name == "A1":
        return Cell(name, 1, {"stage1.aux_supervision": "false"})
    if name == "A2":
        return Cell(name, 1, {"stage1.drop_rate": "0"})
    if name in ("A3", "DB5"):
        return Cell(name, 1, {})
    if name in STAGE1_CELLS:
        return Cell(name, 1, {"stage1.db_variant": name})
    if name.startswith("alpha="):
        return Cell(name, 1, {"stage1.alpha": str(float(name.split("=", 1)[1]))})
    if name.startswith("lambda="):
        return Cell(name, 2, {"stage2.lambda_after_warmup": str(float(name.split("=", 1)[1]))})
    if name == "RAM":
        return Cell(name, 2, {"stage2.use_ram": "true"})
    if name == "CONV":
        return Cell(name, 2, {"stage2.use_ram": "false"})
    if name == "OLR-on":
        return Cell(name, 2, {"stage2.olr": "true"})
    if name == "OLR-off":
        return Cell(name, 2, {"stage2.olr": "false"})
    raise ValueError(f"unknown ablation cell {name!r}")


def _cell_config(cfg: RunConfig, workdir: Path, changes: dict) -> RunConfig:
    new = copy_config(cfg, **{k.replace(".", "__"): v for k, v in changes.items()})
    new.workdir = workdir
    return new


def run_ablation(cfg: RunConfig, cells: Iterable[str]) -> Path:
    """One sub-run per cell under ``<workdir>/ablation/<cell>/`` plus ``report.tsv``.

    Stage-1 cells score their pseudo labels on the training split; stage-2
    cells reuse the default stage-1 labels and score every test dataset.
    """
    parsed = [parse_cell(c) for c in cells]  # validate all names first
    root = Path(cfg.workdir) / "ablation"
    rows = ["cell\tdataset\tave_f_beta\tmae\tstatus"]
    base_pseudo = None
    for cell in parsed:
        sub = _cell_config(cfg, root / cell.name, cell.changes)
        try:
            if cell.stage == 1:
                ckpt = run_stage1_train(sub)
                pseudo = run_extract(sub, ckpt)
                rep = evaluate_dataset(pseudo, sub.data_root, sub.train_dataset, sub.train_split)
                rows.append(f"{cell.name}\t{rep.dataset}\t{rep.ave_f_beta:.4f}\t{rep.mae:.4f}\tok")
            else:
                if base_pseudo is None:
                    base = _cell_config(cfg, root / "_base", {})
                    base_pseudo = run_extract(base, run_stage1_train(base))
                ckpt = run_stage2_train(sub, base_pseudo)
                for name, split in sub.test_sets():
                    run_infer(sub, ckpt, name, split)
                    rep = run_eval(sub, name, split)
                    rows.append(f"{cell.name}\t{rep.dataset}\t{rep.ave_f_beta:.4f}\t{rep.mae:.4f}\tok")
        except TrainingDiverged as exc:
            log.warning("cell %s diverged: %s", cell.name, exc)
            rows.append(f"{cell.name}\t-\tnan\tnan\tdiverged")
        (root / "report.tsv").parent.mkdir(parents=True, exist_ok=True)
        (root / "report.tsv").write_text("\n".join(rows) + "\n")
    return root / "report.tsv"
