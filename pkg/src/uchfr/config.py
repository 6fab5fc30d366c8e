"""Strict JSON run configuration.

One document drives every pipeline stage. Sections map one-to-one onto the
module configs; unknown keys anywhere are rejected so typos fail loudly
instead of silently falling back to defaults. The canonical resolved form
(defaults applied, keys sorted) is hashed, and that hash is embedded in every
artifact a run produces, so artifacts with equal hashes came from identical
configurations.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .backbone import BackboneConfig
from .data import SynthConfig, SamplerConfig
from .discriminator import DEFAULT_HIDDEN
from .evaluation import ProtocolConfig
from .losses import LossConfig
from .training import AblationSpec, OptimConfig


class ConfigError(ValueError):
    pass


def _strict(section, allowed, where):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def _build(cls, section, where, **computed):
    _strict(section, set(cls.__dataclass_fields__) - set(computed), where)
    try:
        return cls(**section, **computed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


@dataclass
class DataSection:
    num_classes: int = 50
    samples_per_class_per_modality: int = 16
    raw_dim: int = 64
    gap_severity: float = 2.0
    noise_scale: float = 0.1
    train_classes: int = 40

    def __post_init__(self):
        if not 0 < self.train_classes < self.num_classes:
            raise ValueError(f"train_classes must be in (0, num_classes={self.num_classes})")

    def synth_config(self, seed) -> SynthConfig:
        return SynthConfig(num_classes=self.num_classes,
                           samples_per_class_per_modality=self.samples_per_class_per_modality,
                           raw_dim=self.raw_dim, gap_severity=self.gap_severity,
                           noise_scale=self.noise_scale, seed=seed)


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneConfig = None
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = None
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: ProtocolConfig = field(default_factory=ProtocolConfig)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    disc_hidden: tuple = DEFAULT_HIDDEN

    def resolved_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": asdict(self.data),
            "backbone": asdict(self.backbone),
            "loss": asdict(self.loss),
            "sampler": asdict(self.sampler),
            "optim": asdict(self.optim),
            "eval": asdict(self.eval),
            "ablation": asdict(self.ablation),
            "disc_hidden": list(self.disc_hidden),
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.resolved_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


TOP_LEVEL_KEYS = ("seed", "output_dir", "data", "backbone", "loss", "sampler",
                  "optim", "eval", "ablation", "disc_hidden")


def parse_config(doc: dict) -> RunConfig:
    """Resolve a raw JSON document into validated section configs."""
    _strict(doc, TOP_LEVEL_KEYS, "config")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")

    data = _build(DataSection, doc.get("data", {}), "data")

    backbone_sec = dict(doc.get("backbone", {}))
    # geometry follows the data section unless the user pins it explicitly
    backbone_sec.setdefault("mode", "vector")
    if backbone_sec["mode"] == "vector":
        backbone_sec.setdefault("input_dim", data.raw_dim)
    backbone_sec.setdefault("num_classes", data.train_classes)
    backbone = _build(BackboneConfig, backbone_sec, "backbone")

    sampler_sec = dict(doc.get("sampler", {}))
    sampler_sec.setdefault("seed", seed)
    sampler = _build(SamplerConfig, sampler_sec, "sampler")

    loss_sec = dict(doc.get("loss", {}))
    preset = loss_sec.pop("preset", None)
    if preset is not None:
        from .losses import PRESETS
        if preset not in PRESETS:
            raise ConfigError(f"unknown loss preset {preset!r}, expected one of {sorted(PRESETS)}")
        for key, value in PRESETS[preset].items():
            loss_sec.setdefault(key, value)
    loss = _build(LossConfig, loss_sec, "loss")
    optim = _build(OptimConfig, doc.get("optim", {}), "optim")
    protocol = _build(ProtocolConfig, doc.get("eval", {}), "eval")
    ablation = _build(AblationSpec, doc.get("ablation", {"seeds": (seed,)}), "ablation")

    disc_hidden = tuple(doc.get("disc_hidden", DEFAULT_HIDDEN))
    if not disc_hidden or not all(isinstance(h, int) and h > 0 for h in disc_hidden):
        raise ConfigError("disc_hidden must be a list of positive integers")

    return RunConfig(seed=seed, output_dir=doc.get("output_dir", "runs/default"),
                     data=data, backbone=backbone, loss=loss, sampler=sampler,
                     optim=optim, eval=protocol, ablation=ablation,
                     disc_hidden=disc_hidden)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc)
