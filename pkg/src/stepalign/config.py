"""Flat ``key = value`` configuration shared by the CLI and the golden defaults file.

Keys are the field names of :class:`ModelConfig`, :class:`TrainConfig`,
:class:`Stage1Config`, :class:`Stage2Config` and :class:`SynthConfig`. ``seed`` is global.
Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .curation import Stage1Config, Stage2Config
from .model import ModelConfig
from .numerics import ConfigError
from .synthgen import SynthConfig
from .training import TrainConfig

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "synth": SynthConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0

    def set(self, key: str, raw) -> None:
        if key == "seed":
            self.seed = int(raw)
            for sec in ("model", "train", "synth"):
                setattr(getattr(self, sec), "seed", self.seed)
            return
        hits = [s for s in SECTIONS if key in _field_types(SECTIONS[s])]
        if not hits:
            raise ConfigError(f"unknown config key {key!r}")
        for s in hits:
            obj = getattr(self, s)
            setattr(obj, key, _coerce(raw, _field_types(SECTIONS[s])[key], key))

    def to_dict(self) -> dict:
        d = {s: dataclasses.asdict(getattr(self, s)) for s in SECTIONS}
        d["seed"] = self.seed
        return d


def _field_types(cls) -> dict:
    return {f.name: type(f.default) if f.default is not dataclasses.MISSING else f.type
            for f in fields(cls) if f.name != "seed"}


def _coerce(raw, typ, key):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return tuple(int(x) for x in raw.split(","))
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e


def parse_config_text(text: str, base: RunConfig | None = None, name: str = "<config>") -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{name}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        try:
            cfg.set(key, value)
        except ConfigError as e:
            raise ConfigError(f"{name}:{lineno}: {e}") from e
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base, str(path))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# Where each default comes from; emitted as comments in the defaults file.
# "published" marks values taken from the method's reported setup.
SOURCES = {
    "D": "published: model dimension 256",
    "d": "published: projection dimension 64",
    "n_enc_layers": "published: 3 encoder blocks",
    "n_dec_layers": "published: 3 decoder blocks",
    "n_heads": "published: 8-head attention",
    "ffn_mult": "implementation choice: FFN width 4*D",
    "dropout": "implementation choice: no dropout",
    "tau": "published: loss temperature 0.07",
    "lr0": "published: AdamW initial learning rate 1e-4 with cosine decay",
    "epochs": "published: 12 epochs",
    "batch_size": "published: batch size 8",
    "max_video_s": "published: videos longer than 1200 s are truncated",
    "narration_prob": "published: narration type-token with 50% probability",
    "lambda_alignability": "implementation choice: alignability head untrained",
    "weight_decay": "implementation choice: AdamW decay",
    "rotate_features": "implementation choice: augmentation off",
    "nu": "not published: mirrors tau",
    "zeta": "published: zeta 0.7",
    "eps1": "published: epsilon1 0.20",
    "eps2": "published: epsilon2 0.8",
    "delta_sec": "published: best constant duration 8 s",
    "position": "published: peak taken as the step start",
    "iterations": "published: one self-training round by default",
}


def dump_config(cfg: RunConfig, sections=("model", "train", "stage1", "stage2")) -> str:
    lines = [f"seed = {cfg.seed}"]
    for s in sections:
        lines.append(f"\n# [{s}]")
        for f in fields(SECTIONS[s]):
            if f.name == "seed":
                continue
            line = f"{f.name} = {_fmt(getattr(getattr(cfg, s), f.name))}"
            if f.name in SOURCES:
                line += f"  # {SOURCES[f.name]}"
            lines.append(line)
    return "\n".join(lines) + "\n"
