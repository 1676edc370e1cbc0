"""Training configuration: flat ``section.key = value`` files plus overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .graph import GSO_KINDS
from .model import NONLINEARITIES
from .runtime import EXEC_MODES, MODE_ENV
from .scheduler import KINDS as SCHEDULER_KINDS

ARMS = ("varco", "full", "fixed", "none")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synth"
    n: int = 1000
    classes: int = 3
    p_in: float = 0.02
    p_out: float = 0.004
    feat_dim: int = 16
    noise: float = 1.5
    seed: int = 0
    edges: str = ""
    features: str = ""
    labels: str = ""
    split: str = ""


@dataclass
class PartitionConfig:
    method: str = "random"
    q: int = 4
    seed: int = 0
    path: str = ""


@dataclass
class ModelConfig:
    layers: int = 3
    hidden: int = 32
    k: int = 2
    nonlinearity: str = "relu"
    gso: str = "mean-neighbor"
    init_seed: int = 0
    clip: float = 0.0


@dataclass
class OptimConfig:
    eta: float = 0.05
    epochs: int = 300


@dataclass
class SchedulerConfig:
    kind: str = "clamped-linear"
    c_max: float = 128.0
    c_min: float = 1.0
    slope: float = 5.0
    step: float = 0.01
    base: float = 1.05


@dataclass
class CodecConfig:
    key: str = ""
    unbiased: bool = False


@dataclass
class TrainSection:
    arm: str = "varco"


@dataclass
class RuntimeConfig:
    mode: str = field(default_factory=lambda: os.environ.get(MODE_ENV, "sequential"))


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainSection = field(default_factory=TrainSection)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def set(self, dotted: str, raw: str) -> None:
        try:
            section_name, key = dotted.strip().split(".", 1)
        except ValueError:
            raise ConfigError(f"config key {dotted!r} must look like section.key") from None
        section = getattr(self, section_name, None)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigError(f"unknown config section {section_name!r}")
        hints = typing.get_type_hints(type(section))
        if key not in hints:
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(section, key, _coerce(dotted, hints[key], raw.strip()))

    def flat(self) -> dict[str, object]:
        out = {}
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            for sf in dataclasses.fields(section):
                out[f"{f.name}.{sf.name}"] = getattr(section, sf.name)
        return out

    def master_key(self) -> bytes:
        if self.codec.key:
            try:
                key = bytes.fromhex(self.codec.key)
            except ValueError:
                raise ConfigError("codec.key must be 32 hex digits") from None
            if len(key) != 16:
                raise ConfigError("codec.key must be 32 hex digits")
            return key
        seed = f"{self.data.seed}:{self.partition.seed}:{self.model.init_seed}".encode()
        return hashlib.blake2b(seed, digest_size=16, person=b"varco-keygen").digest()

    def validate(self) -> None:
        d, p, m, o, s = self.data, self.partition, self.model, self.optim, self.scheduler
        _choice("data.source", d.source, ("synth", "files"))
        if d.source == "synth":
            if not 0 <= d.p_out <= d.p_in <= 1:
                raise ConfigError(f"need 0 <= data.p_out <= data.p_in <= 1 (got {d.p_in}, {d.p_out})")
            if not 1 <= d.classes <= d.n:
                raise ConfigError("data.classes must lie in [1, data.n]")
        else:
            for key in ("edges", "features", "labels"):
                _existing(f"data.{key}", getattr(d, key))
            if d.split:
                _existing("data.split", d.split)
        _choice("partition.method", p.method, ("random", "bfs", "file"))
        if p.method == "file":
            _existing("partition.path", p.path)
        elif p.q < 1:
            raise ConfigError("partition.q must be >= 1")
        if m.layers < 1 or m.hidden < 1 or m.k < 1:
            raise ConfigError("model.layers, model.hidden and model.k must be positive")
        _choice("model.nonlinearity", m.nonlinearity, NONLINEARITIES)
        _choice("model.gso", m.gso, GSO_KINDS)
        if m.clip < 0:
            raise ConfigError("model.clip must be >= 0 (0 disables clipping)")
        if o.epochs < 1:
            raise ConfigError("optim.epochs must be >= 1")
        if not o.eta > 0:
            raise ConfigError("optim.eta must be > 0")
        _choice("scheduler.kind", s.kind, SCHEDULER_KINDS)
        if s.c_min < 1 or s.c_max < s.c_min:
            raise ConfigError("need 1 <= scheduler.c_min <= scheduler.c_max")
        _choice("train.arm", self.train.arm, ARMS)
        _choice("runtime.mode", self.runtime.mode, EXEC_MODES)
        self.master_key()


def _choice(name, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {', '.join(allowed)}; got {value!r}")


def _existing(name, path):
    if not path or not Path(path).exists():
        raise ConfigError(f"{name}: file {path!r} does not exist")


def _coerce(name: str, typ, raw: str):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None
    return raw


def parse_config_text(text: str, cfg: TrainConfig | None = None) -> TrainConfig:
    cfg = cfg or TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        cfg.set(key, value)
    return cfg


def load_config(path=None, overrides: list[str] | None = None) -> TrainConfig:
    cfg = TrainConfig()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        parse_config_text(text, cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be key=value")
        key, value = item.split("=", 1)
        cfg.set(key, value)
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.flat().items())
