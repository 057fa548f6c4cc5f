"""Run configuration: nested dataclasses serialised as flat ``key=value`` text."""
from __future__ import annotations

import hashlib
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .data import IMAGENET_MEAN, IMAGENET_STD
from .postprocess import CrfParams


class ConfigError(ValueError):
    pass


def _check_schedule(name: str, epochs: int, decay_epochs: list[int]) -> None:
    if epochs < 0:
        raise ConfigError(f"{name}.epochs must be >= 0")
    if any(b <= a for a, b in zip(decay_epochs, decay_epochs[1:])):
        raise ConfigError(f"{name}.decay_epochs must be strictly increasing")
    if decay_epochs and epochs and decay_epochs[-1] >= epochs:
        raise ConfigError(f"{name}.decay_epochs must be < {name}.epochs")


@dataclass
class Stage1Config:
    epochs: int = 20
    lr: float = 1.0
    decay_epochs: list[int] = field(default_factory=lambda: [10, 16])
    decay_factor: float = 0.1
    alpha: float = 0.1
    drop_rate: float = 0.5
    db_variant: str = "DB5"
    aux_supervision: bool = True  # False = ablation A1 (supervise F only)
    freeze_encoder: bool = True  # False = ablation A0
    head_width: int = 64

    def validate(self):
        _check_schedule("stage1", self.epochs, self.decay_epochs)
        if self.db_variant not in ("DB1", "DB2", "DB3", "DB4", "DB5"):
            raise ConfigError(f"unknown decision boundary {self.db_variant!r}")
        if not 0 <= self.drop_rate < 1:
            raise ConfigError("stage1.drop_rate must lie in [0, 1)")


@dataclass
class Stage2Config:
    epochs: int = 25
    lr: float = 0.005
    decay_epochs: list[int] = field(default_factory=lambda: [15, 20])
    decay_factor: float = 0.1
    lambda_after_warmup: float = 0.4
    warmup_epochs: int = 2
    olr: bool = True
    use_ram: bool = True
    persist_epochs: str = "initial,final"  # or a comma list of epoch numbers

    def validate(self):
        _check_schedule("stage2", self.epochs, self.decay_epochs)
        if not 0 <= self.lambda_after_warmup <= 1:
            raise ConfigError("stage2.lambda_after_warmup must lie in [0, 1]")


@dataclass
class RunConfig:
    seed: int = 0
    workdir: Path = Path("runs/default")
    data_root: Path = Path("data")
    train_dataset: str = "MSRA-B"
    train_split: str = "train+val"
    test_datasets: list[str] = field(default_factory=lambda: ["ECSSD", "MSRA-B:test"])
    image_size: int = 320
    batch_size: int = 8
    max_images: int = 0  # 0 = every image of the split
    num_workers: int = 0
    backbone_arch: str = "resnet50"
    backbone_weights: str = ""  # empty = seeded random initialisation
    backbone_prefix: str = "auto"
    mean: list[float] = field(default_factory=lambda: list(IMAGENET_MEAN))
    std: list[float] = field(default_factory=lambda: list(IMAGENET_STD))
    momentum: float = 0.9
    weight_decay: float = 5e-4
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    crf: CrfParams = field(default_factory=CrfParams)
    median_kernel: int = 9

    def validate(self) -> "RunConfig":
        self.stage1.validate()
        self.stage2.validate()
        if self.image_size <= 0 or self.batch_size <= 0:
            raise ConfigError("image_size and batch_size must be positive")
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ConfigError("median_kernel must be odd and >= 1")
        return self

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in flatten(self).items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def test_sets(self) -> list[tuple[str, str]]:
        out = []
        for entry in self.test_datasets:
            name, _, split = entry.partition(":")
            out.append((name, split or "all"))
        return out


def tiny_profile(**overrides) -> RunConfig:
    """Desk-scale profile: 50 images, 3 + 3 epochs at 160 px."""
    cfg = RunConfig(image_size=160, max_images=50)
    cfg.stage1 = Stage1Config(epochs=3, decay_epochs=[])
    cfg.stage2 = Stage2Config(epochs=3, decay_epochs=[])
    cfg.median_kernel = 5
    for k, v in overrides.items():
        set_value(cfg, k, v)
    return cfg.validate()


# ---------------------------------------------------------------------------
# flat key=value mapping


def _format(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def flatten(obj, prefix: str = "") -> dict[str, str]:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if is_dataclass(v):
            out.update(flatten(v, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = _format(v)
    return out


def _coerce(tp, raw: str):
    origin = typing.get_origin(tp)
    if origin in (list, tuple):
        (inner,) = typing.get_args(tp)[:1]
        return [_coerce(inner, x.strip()) for x in raw.split(",") if x.strip()]
    if tp is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if tp is Path:
        return Path(raw)
    return tp(raw)


def set_value(cfg, key: str, raw) -> None:
    obj = cfg
    *path, leaf = key.split(".")
    for part in path:
        if not hasattr(obj, part) or not is_dataclass(getattr(obj, part)):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    hints = typing.get_type_hints(type(obj))
    if leaf not in hints or is_dataclass(getattr(obj, leaf, None)):
        raise ConfigError(f"unknown config key {key!r}")
    value = raw if not isinstance(raw, str) else _coerce(hints[leaf], raw)
    try:
        setattr(obj, leaf, value)
    except Exception as exc:  # frozen or bad value
        raise ConfigError(f"cannot set {key}: {exc}") from exc
    if is_dataclass(obj) and hasattr(obj, "__post_init__") and isinstance(obj, CrfParams):
        obj.__post_init__()


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        set_value(cfg, k.strip(), v.strip())
    return cfg


def load_config(path=None, overrides: list[str] | None = None, tiny: bool = False) -> RunConfig:
    cfg = tiny_profile() if tiny else RunConfig()
    if path:
        cfg = parse_text(Path(path).read_text(), cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        set_value(cfg, k.strip(), v.strip())
    return cfg.validate()


def copy_config(cfg: RunConfig, **changes) -> RunConfig:
    """Deep-ish copy with dotted-key changes applied."""
    new = parse_text(cfg.to_text(), RunConfig())
    for k, v in changes.items():
        set_value(new, k.replace("__", "."), v)
    return new.validate()
