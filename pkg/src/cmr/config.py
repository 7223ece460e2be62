"""Training configuration and its line-oriented ``key = value`` text form.

Keys are dotted ``section.field`` names, e.g. ``train.seed = 3`` or
``encoder.widths = 16, 32, 64, 64, 64``. Lines starting with ``#`` are ignored.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from cmr.regressor import EncoderConfig, RegressorConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSection:
    data: str = ""
    seed: int = 0
    batch_size: int = 16
    stage1_steps: int = 5000
    stage2_steps: int = 2000
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 100.0
    checkpoint_every: int = 1000
    subset: int = 0
    use_weak: bool = True
    model: str = "graph"

    def __post_init__(self):
        for k in ("batch_size", "stage1_steps", "stage2_steps"):
            if getattr(self, k) < 1:
                raise ConfigError(f"train.{k} must be positive")
        if self.checkpoint_every < 0 or self.subset < 0:
            raise ConfigError("train.checkpoint_every and train.subset must be >= 0")
        if not self.lr > 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or not self.eps > 0:
            raise ConfigError("invalid Adam hyperparameters")
        if self.grad_clip < 0:
            raise ConfigError("train.grad_clip must be >= 0 (0 disables clipping)")
        if self.model not in ("graph", "fc"):
            raise ConfigError(f"train.model must be 'graph' or 'fc', got {self.model!r}")


@dataclass(frozen=True)
class FCSection:
    hidden: int = 0  # 0: match the graph head's parameter count

    def __post_init__(self):
        if self.hidden < 0:
            raise ConfigError("fc.hidden must be >= 0")


@dataclass(frozen=True)
class MLPSection:
    hidden: tuple = (256, 256)
    lambda_beta: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ConfigError("mlp.hidden widths must be positive")
        if not self.lambda_beta >= 0:
            raise ConfigError("mlp.lambda_beta must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    train: TrainSection = field(default_factory=TrainSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    fc: FCSection = field(default_factory=FCSection)
    mlp: MLPSection = field(default_factory=MLPSection)

    def to_text(self):
        lines = []
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                lines.append(f"{sec.name}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, pairs):
        """Apply ``(dotted_key, text_value)`` pairs; unknown keys are rejected."""
        sections = {s.name: {} for s in dataclasses.fields(self)}
        for key, raw in pairs:
            sec, _, name = key.partition(".")
            if sec not in sections or not name:
                raise ConfigError(f"unknown config key {key!r}")
            obj = getattr(self, sec)
            types = {f.name: f for f in dataclasses.fields(obj)}
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            sections[sec][name] = _parse(key, raw, getattr(obj, name))
        try:
            return TrainConfig(**{s: dataclasses.replace(getattr(self, s), **kv) if kv else getattr(self, s)
                                  for s, kv in sections.items()})
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_text(cls, text, base=None):
        return (base or cls()).with_overrides(parse_pairs(text))


def parse_pairs(text, source="<config>"):
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def _format(v):
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key, raw, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x for x in raw.strip("()[] ").replace(",", " ").split()]
            return tuple(int(x) for x in items)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
