"""Run configuration: flat ``section.key = value`` text files.

Example::

    run.seed = 0
    data.kind = synthetic
    model.widths = 8,16,32
    model.bits = 2,3,4
    stage3.k = 0.75

Unknown keys are rejected.  Lists are comma separated; ``weight_bit_map`` is
written as ``2:1,3:3``; ``none`` stands for an empty optional.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .errors import InputError


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"


@dataclass
class DataConfig:
    kind: str = "synthetic"
    classes: int = 10
    dim: int = 16
    noise: float = 3.0
    seed: int = 1234
    train_per_class: int = 300
    test_per_class: int = 60
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_limit: int = 0
    test_limit: int = 0
    hflip: bool = True


@dataclass
class ModelConfig:
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    granularity: str = "per_layer"
    bits: tuple = (2, 3, 4)
    n: int = 4
    mode: str = "scale_symmetric_floor"
    tie_scales: bool = False
    transitional_bn: bool = True
    weight_bit_map: dict = field(default_factory=dict)
    init_seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 128
    lr: float = 1e-3
    warmup_epochs: int = 1
    weight_decay: float = 1e-4
    eval_batch_size: int = 500


@dataclass
class Stage3Config:
    k: float = 0.75
    ramp_end_epoch: int = 8


@dataclass
class DistillSection:
    teacher: str = "none"  # none | fp32 | stage1
    teacher_ckpt: str = ""
    temperature: float = 2.0
    weight: float = 0.5


@dataclass
class SearchConfig:
    hessian_batch: int = 512
    power_iters: int = 50
    power_tol: float = 1e-4
    descending: bool = True
    enum_cap: int = 200_000
    sample_count: int = 100_000


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    distill: DistillSection = field(default_factory=DistillSection)
    search: SearchConfig = field(default_factory=SearchConfig)

    def to_text(self) -> str:
        lines = []
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                lines.append(f"{sec.name}.{f.name} = {_fmt(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, val = line.partition("=")
            if not eq:
                raise InputError(f"line {lineno}: expected 'section.key = value'")
            sec, dot, name = key.strip().partition(".")
            if not dot or not hasattr(cfg, sec):
                raise InputError(f"line {lineno}: unknown section in {key.strip()!r}")
            obj = getattr(cfg, sec)
            fields = {f.name: f for f in dataclasses.fields(obj)}
            if name not in fields:
                raise InputError(f"line {lineno}: unknown key {key.strip()!r}")
            try:
                setattr(obj, name, _parse(val.strip(), getattr(obj, name)))
            except ValueError as e:
                raise InputError(f"line {lineno}: bad value for {key.strip()}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_text(f.read())

    def save(self, path):
        from .checkpoint import atomic_write

        atomic_write(path, self.to_text().encode())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, dict):
        return ",".join(f"{k}:{v[k]}" for k in sorted(v)) or "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(s: str, like):
    if isinstance(like, bool):
        if s.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {s}")
        return s.lower() in ("true", "1", "yes")
    if isinstance(like, int):
        return int(s)
    if isinstance(like, float):
        return float(s)
    if isinstance(like, tuple):
        return tuple(int(x) for x in s.split(",") if x.strip())
    if isinstance(like, dict):
        if s.lower() in ("none", ""):
            return {}
        out = {}
        for item in s.split(","):
            k, _, v = item.partition(":")
            out[int(k)] = int(v)
        return out
    return s
