"""Run configuration: TOML file + dotted overrides -> validated dataclasses."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .backbone import BackboneConfig
from .detector.model import FeatureConfig, HeadConfig, ModelConfig
from .errors import ConfigError
from .trainer import TrainConfig


@dataclass
class DataConfig:
    train_json: str = ""          # empty: use the synthetic generator
    train_images: str = ""
    val_json: str = ""
    val_images: str = ""
    image_size: int = 256
    synthetic_n: int = 8
    synthetic_seed: int = 0
    synthetic_overlap: float = 0.3


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.backbone, self.feature, self.heads)


SECTIONS = {"backbone": BackboneConfig, "feature": FeatureConfig, "heads": HeadConfig,
            "train": TrainConfig, "data": DataConfig}
# fields that are derived and not settable from a file
HIDDEN = {("backbone", "stage_specs")}


def _fields(section: str):
    return [f for f in dataclasses.fields(SECTIONS[section]) if (section, f.name) not in HIDDEN]


def parse_value(text: str):
    """Interpret an override value as a TOML literal, else as a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like section.key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
    node[parts[-1]] = parse_value(value.strip())


def _coerce(section: str, name: str, value, default):
    where = f"{section}.{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, float) or (default is None and isinstance(value, (int, float))):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table, got {value!r}")
        return {**default, **value}
    return value


def from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig, rejecting unknown sections/keys with their dotted name."""
    doc = dict(doc)
    out = {}
    output_dir = doc.pop("output_dir", "runs/default")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir: expected a string")
    for section, table in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section or key {section!r}")
        if not isinstance(table, dict):
            raise ConfigError(f"{section}: expected a table")
    for section, cls in SECTIONS.items():
        table = dict(doc.get(section, {}))
        defaults = cls()
        known = {f.name for f in _fields(section)}
        unknown = sorted(set(table) - known)
        if unknown:
            raise ConfigError(f"unknown key {section}.{unknown[0]}")
        kwargs = {}
        for name, value in table.items():
            kwargs[name] = _coerce(section, name, value, getattr(defaults, name))
        if section == "feature" and kwargs.get("topology") == "":
            kwargs["topology"] = None
        try:
            out[section] = cls(**kwargs)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{section}: {exc}") from exc
    cfg = RunConfig(**out, output_dir=output_dir)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    h = cfg.heads
    if h.mask_loss not in ("bce", "dice"):
        raise ConfigError(f"heads.mask_loss: expected bce or dice, got {h.mask_loss!r}")
    if cfg.feature.kind not in ("c4", "fpn", "nasfpn"):
        raise ConfigError(f"feature.kind: expected c4, fpn or nasfpn, got {cfg.feature.kind!r}")
    if cfg.feature.topology is not None and not Path(cfg.feature.topology).exists():
        raise ConfigError(f"feature.topology: file {cfg.feature.topology!r} not found")
    if h.num_classes < 1:
        raise ConfigError("heads.num_classes: must be >= 1")
    for name in ("score_thresh", "nms_thresh", "rpn_nms", "rpn_pos_iou", "rpn_neg_iou", "roi_pos_iou", "roi_neg_iou"):
        v = getattr(h, name)
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"heads.{name}: must lie in [0, 1], got {v}")
    if h.rpn_neg_iou > h.rpn_pos_iou or h.roi_neg_iou > h.roi_pos_iou:
        raise ConfigError("heads: negative IoU threshold above positive threshold")
    if not h.anchor_ratios or not h.anchor_scales:
        raise ConfigError("heads.anchor_ratios and heads.anchor_scales must be non-empty")
    if cfg.data.image_size % 32:
        raise ConfigError(f"data.image_size: must be a multiple of 32, got {cfg.data.image_size}")
    bad = set(cfg.train.augment) - {"hflip", "vflip", "scale_jitter"}
    if bad:
        raise ConfigError(f"train.augment: unknown ops {sorted(bad)}")


def load_config(path=None, overrides=()) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = tomli.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for assignment in overrides:
        apply_override(doc, assignment)
    return from_dict(doc)


# -- resolved dump ------------------------------------------------------------------------

def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k} = {_toml_value(x)}" for k, x in v.items()) + "}"
    raise ConfigError(f"cannot serialize {v!r}")


def to_dict(cfg: RunConfig) -> dict:
    doc = {"output_dir": cfg.output_dir}
    for section in SECTIONS:
        obj = getattr(cfg, section)
        table = {}
        for f in _fields(section):
            v = getattr(obj, f.name)
            if section == "feature" and f.name == "topology" and v is None:
                v = ""
            table[f.name] = list(v) if isinstance(v, tuple) else v
        doc[section] = table
    return doc


def dump_config(cfg: RunConfig) -> str:
    """Every field, defaults included, as TOML that :func:`load_config` reads back."""
    doc = to_dict(cfg)
    lines = [f"output_dir = {_toml_value(doc.pop('output_dir'))}"]
    for section, table in doc.items():
        lines.append("")
        lines.append(f"[{section}]")
        for k, v in table.items():
            lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def ablation_grid(base: RunConfig | None = None):
    """All (sam, csp, feature kind, mask loss) combinations of the ablation study."""
    base = base or RunConfig()
    for sam in (False, True):
        for csp in (False, True):
            for kind in ("c4", "fpn", "nasfpn"):
                for loss in ("bce", "dice"):
                    yield (sam, csp, kind, loss), ModelConfig(
                        dataclasses.replace(base.backbone, use_sam=sam, use_csp=csp, stage_specs=()),
                        dataclasses.replace(base.feature, kind=kind),
                        dataclasses.replace(base.heads, mask_loss=loss))
