"""Run configuration: nested dataclasses with a flat dotted key-value form.

A config file is either JSON (nested or flat) or ``key = value`` lines such
as ``optimizer.lr = 1e-4``. The config hash is the SHA-256 of the flat form
serialized with sorted keys.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..ccae import ContrastiveConfig
from ..dataio import parse_kv
from ..encoders import EncoderConfig
from ..hasf import HasfConfig

PROMPT_OPTIONS = ("none", "1", "2", "3")


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-4
    lr_min: float = 1e-6
    schedule: str = "cosine"
    batch: int = 8
    steps: int = 1000
    weight_decay: float = 0.01


@dataclass
class DataConfig:
    root: str = ""  # dataset root; empty means phantom data
    split: str = "stratified"  # stratified | none (train = val = test = everything)
    crop: str = "region_mean"
    augment_strength: float = 0.5
    # phantom corpus
    phantom_volumes: int = 20
    phantom_slices: int = 2
    phantom_noise: float = 0.05
    phantom_min_vertebrae: int = 4
    phantom_max_vertebrae: int = 7
    phantom_seed: int = 0


@dataclass
class ModulesConfig:
    hasf_on: bool = True
    ccae_on: bool = True


@dataclass
class RunConfig:
    taxonomy: str = "MRSpineSeg"
    prompt_option: str = "3"
    paper_verbatim: bool = False
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 500
    eval_splits: tuple[str, ...] = ("train", "test")
    data: DataConfig = field(default_factory=DataConfig)
    modules: ModulesConfig = field(default_factory=ModulesConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hasf: HasfConfig = field(default_factory=HasfConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def validate(self) -> "RunConfig":
        opt = self.optimizer
        if not opt.lr >= opt.lr_min > 0:
            raise ValueError(f"need lr >= lr_min > 0, got lr={opt.lr}, lr_min={opt.lr_min}")
        if opt.batch < 1 or opt.steps < 1:
            raise ValueError("batch and steps must be >= 1")
        if opt.kind != "adamw" or opt.schedule != "cosine":
            raise ValueError("only the adamw optimizer with a cosine schedule is supported")
        if str(self.prompt_option) not in PROMPT_OPTIONS:
            raise ValueError(f"prompt_option must be one of {PROMPT_OPTIONS}")
        if self.data.split not in ("stratified", "none"):
            raise ValueError(f"unknown split mode {self.data.split!r}")
        self.encoder.validate()
        self.hasf.validate(self.encoder.visual_widths)
        self.contrastive.validate()
        return self

    @property
    def hasf_active(self) -> bool:
        # no prompt means no holistic text to fuse
        return self.modules.hasf_on and str(self.prompt_option) != "none"

    @property
    def ccae_active(self) -> bool:
        return self.modules.ccae_on

    def to_flat(self) -> dict[str, Any]:
        return flatten(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_flat(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **flat_overrides) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"optimizer.lr": 1e-3})``."""
        flat = self.to_flat()
        for k, v in flat_overrides.items():
            if k not in flat:
                raise KeyError(f"unknown config key {k!r}")
            flat[k] = v
        return from_flat(flat)


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        elif isinstance(v, tuple):
            out[key] = list(v)
        else:
            out[key] = v
    return out


def _build(cls, values: dict[str, Any]):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    nested: dict[str, dict] = {}
    for key, value in values.items():
        head, _, rest = key.partition(".")
        if head not in fields:
            raise KeyError(f"unknown config key {key!r} for {cls.__name__}")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            kwargs[head] = value
    for head, sub in nested.items():
        sub_cls = fields[head].default_factory  # type: ignore[misc]
        kwargs[head] = _build(sub_cls, sub)
    for name, f in fields.items():
        if name in kwargs and isinstance(kwargs[name], list):
            kwargs[name] = tuple(kwargs[name])
        if name == "prompt_option" and name in kwargs:
            kwargs[name] = str(kwargs[name])
    return cls(**kwargs)


def from_flat(flat: dict[str, Any]) -> RunConfig:
    return _build(RunConfig, flat).validate()


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    flat: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        if str(path).endswith(".json"):
            flat = flatten(json.loads(text))
        else:
            flat = parse_kv(text)
    flat.update(overrides or {})
    return from_flat(flat)
