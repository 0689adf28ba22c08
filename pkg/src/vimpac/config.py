"""Flat ``section.key = value`` run configuration files.

Blank lines and ``#`` comments are ignored; unknown keys are errors. Every
run writes the fully resolved configuration back out with :func:`dump`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction

from .masking import MaskingConfig
from .model import ModelConfig
from .objectives import ContrastiveConfig, ObjectiveConfig
from .pipeline import CropConfig, FinetuneConfig, PairSamplerConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    crops: CropConfig = field(default_factory=CropConfig)


# section name -> (getter, setter) over RunConfig
_NESTED = {
    "masking": ("train", "masking"),
    "sampler": ("train", "sampler"),
    "objective": ("train", "objective"),
}
_SKIP = {("train", "masking"), ("train", "sampler"), ("train", "objective"), ("objective", "contrastive")}


def _sections(cfg: RunConfig):
    """Yield ``(section, dataclass instance)`` pairs in dump order."""
    yield "model", cfg.model
    yield "train", cfg.train
    yield "masking", cfg.train.masking
    yield "sampler", cfg.train.sampler
    yield "objective", cfg.train.objective
    yield "contrastive", cfg.train.objective.contrastive
    yield "finetune", cfg.finetune
    yield "crops", cfg.crops


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return str(value)


def _parse(raw, default, key):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, Fraction) or key == "sampler.fps":
            return None if text.lower() == "none" else Fraction(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def known_keys(cfg: RunConfig | None = None):
    cfg = cfg or RunConfig()
    return [f"{sec}.{f.name}" for sec, obj in _sections(cfg) for f in fields(obj) if (sec, f.name) not in _SKIP]


def _with(cfg: RunConfig, section, **changes):
    try:
        if section in ("model", "train", "finetune", "crops"):
            return replace(cfg, **{section: replace(getattr(cfg, section), **changes)})
        if section == "contrastive":
            obj = cfg.train.objective
            return _with(cfg, "objective", contrastive=replace(obj.contrastive, **changes))
        outer, attr = _NESTED[section]
        inner = replace(getattr(cfg.train, attr), **changes)
        return replace(cfg, train=replace(cfg.train, **{attr: inner}))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def apply_overrides(cfg: RunConfig, pairs):
    """Apply ``(key, raw string)`` pairs in order."""
    valid = set(known_keys(cfg))
    current = dict(_sections(cfg))
    pending = {}
    for key, raw in pairs:
        if key not in valid:
            raise ConfigError(f"unknown config key {key!r}")
        sec, name = key.split(".", 1)
        default = getattr(current[sec], name)
        pending.setdefault(sec, {})[name] = _parse(raw, default, key)
    # nested sections first so that validation of outer sections sees the final values
    for sec in ("contrastive", "objective", "masking", "sampler", "model", "finetune", "crops", "train"):
        if sec in pending:
            cfg = _with(cfg, sec, **pending[sec])
    return cfg


def parse(text, base: RunConfig | None = None):
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs.append((key, value))
    try:
        return apply_overrides(base or RunConfig(), pairs)
    except ConfigError as exc:
        raise ConfigError(f"{exc}") from None


def load(path, base: RunConfig | None = None):
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), base)


def dump(cfg: RunConfig):
    lines = []
    for sec, obj in _sections(cfg):
        lines.append(f"# {sec}")
        for f in fields(obj):
            if (sec, f.name) in _SKIP:
                continue
            lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def tiny_config(**model_overrides) -> RunConfig:
    """A desk-scale configuration that trains in seconds on toy stores."""
    model = ModelConfig(vq_size=64, layers=2, hidden=64, heads=4, head_dim=16, mlp_dim=128, max_t=4, max_h=4, max_w=4,
                        dropout=0.0, cl_hidden=64, cl_out=32)
    model = replace(model, **model_overrides)
    train = TrainConfig(group_size=16, accumulation_target=16, steps=400, peak_lr=2e-3, weight_decay=0.0,
                        masking=MaskingConfig(num_blocks=5), sampler=PairSamplerConfig(clip_len=4),
                        objective=ObjectiveConfig(contrastive=ContrastiveConfig()))
    finetune = FinetuneConfig(batch_size=8, steps=100, peak_lr=1e-3, clip_len=4)
    return RunConfig(model=model, train=train, finetune=finetune, crops=CropConfig(temporal_crops=2))
