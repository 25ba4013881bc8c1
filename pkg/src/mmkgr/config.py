"""Run configuration: a flat INI-style key/value file with one section
per subsystem, every key also exposed as a CLI flag (flags override
file values). The effective configuration is serialized verbatim into
each output directory, and its hash is embedded in reports.

Sections and keys mirror the dataclasses:

    [run]        seed
    [synth]      SynthConfig fields
    [model]      ModelSettings fields
    [structure]  StructureEncoderConfig fields + projection mode
    [fusion]     FusionConfig fields
    [train]      TrainSettings fields
    [eval]       EvalSettings fields
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass

from .evaluate import config_hash_of
from .fusion import FusionConfig
from .structure import StructureEncoderConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSettings:
    dim: int = 64
    heads: int = 4
    text_layers: int = 2
    vision_layers: int = 2
    fusion_layers: int = 2
    ffn_dim: int = 128
    max_seq_len: int = 64
    max_patches: int = 16
    seed: int = 0


@dataclass
class StructureSettings(StructureEncoderConfig):
    projection: str = "orthonormal"   # or "trainable"

    def validate(self):
        super().validate()
        if self.projection not in ("orthonormal", "trainable"):
            raise ConfigError(f"unknown projection mode {self.projection!r}")

    def encoder_config(self) -> StructureEncoderConfig:
        fields = {f.name for f in dataclasses.fields(StructureEncoderConfig)}
        return StructureEncoderConfig(
            **{k: v for k, v in dataclasses.asdict(self).items() if k in fields}
        )


@dataclass
class TrainSettings:
    pretrain_epochs: int = 1
    finetune_epochs: int = 2
    batch_size: int = 16
    lr: float = 1e-3


@dataclass
class EvalSettings:
    head_prediction: bool = False
    dump_ranks: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    model: ModelSettings = dataclasses.field(default_factory=ModelSettings)
    structure: StructureSettings = dataclasses.field(default_factory=StructureSettings)
    fusion: FusionConfig = dataclasses.field(default_factory=FusionConfig)
    train: TrainSettings = dataclasses.field(default_factory=TrainSettings)
    eval: EvalSettings = dataclasses.field(default_factory=EvalSettings)

    def validate(self):
        self.synth.validate()
        self.structure.validate()
        self.fusion.validate()

    # -- INI round trip ------------------------------------------------------

    def sections(self) -> dict[str, object]:
        return {
            "synth": self.synth,
            "model": self.model,
            "structure": self.structure,
            "fusion": self.fusion,
            "train": self.train,
            "eval": self.eval,
        }

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser["run"] = {"seed": str(self.seed)}
        for name, obj in self.sections().items():
            parser[name] = {
                f.name: _format_value(getattr(obj, f.name))
                for f in dataclasses.fields(obj)
            }
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def hash(self) -> str:
        return config_hash_of(self.to_ini())

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        cfg = cls()
        if parser.has_option("run", "seed"):
            cfg.seed = int(parser["run"]["seed"])
        for name, obj in cfg.sections().items():
            if not parser.has_section(name):
                continue
            fields = {f.name: f for f in dataclasses.fields(obj)}
            updates = {}
            for key, raw in parser[name].items():
                if key not in fields:
                    raise ConfigError(f"[{name}] has no key {key!r}")
                updates[key] = _parse_value(raw, type(getattr(obj, key)))
            setattr(cfg, name, dataclasses.replace(obj, **updates))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_ini(fh.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_ini())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, kind: type):
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


# ---------------------------------------------------------------------------
# argparse integration: one flag per config key
# ---------------------------------------------------------------------------


def add_config_flags(parser):
    import argparse

    parser.add_argument("--config", help="run configuration INI file")
    parser.add_argument("--seed", type=int, default=None, help="override [run] seed")
    sample = RunConfig()
    for section, obj in sample.sections().items():
        for f in dataclasses.fields(obj):
            flag = f"--{section}-{f.name}".replace("_", "-")
            kind = type(getattr(obj, f.name))
            if kind is bool:
                parser.add_argument(flag, dest=f"{section}__{f.name}",
                                    action=argparse.BooleanOptionalAction, default=None)
            else:
                parser.add_argument(flag, dest=f"{section}__{f.name}",
                                    type=kind, default=None)


def config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for section, obj in cfg.sections().items():
        updates = {}
        for f in dataclasses.fields(obj):
            value = getattr(args, f"{section}__{f.name}", None)
            if value is not None:
                updates[f.name] = value
        if updates:
            setattr(cfg, section, dataclasses.replace(obj, **updates))
    cfg.validate()
    return cfg
