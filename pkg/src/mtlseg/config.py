"""Run configuration: one JSON document, strict keys, defaults materialised on save."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SyntheticRingSpec, spec_from_dict, spec_to_dict
from .network import NetConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class NetSection:
    input_size: int = 64
    depth: int = 3
    base_channels: int = 8
    area_scale_mm2: float = 100.0


@dataclass
class TrainSection:
    epochs: int = 50
    lr0: float = 1e-3
    decay: float = 0.95
    alpha: float = 0.99
    eps: float = 1e-8
    batch_size: int = 8
    select_on: str = "test"
    augment: bool = True
    target_spacing_mm: float = 1.5625
    area_label_noise_mm2: float = 0.0
    folds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])


@dataclass
class LossSection:
    form: str = "precision"


@dataclass
class SynthSection:
    n_patients: int = 25
    phases: int = 2
    slices: int = 5
    spec: dict = field(default_factory=lambda: {k: v for k, v in spec_to_dict(SyntheticRingSpec()).items()
                                                if k != "seed"})


@dataclass
class ReportSection:
    n_resamples: int = 1000
    confidence: float = 0.99


@dataclass
class RunConfig:
    seed: int = 0
    net: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    synth: SynthSection = field(default_factory=SynthSection)
    report: ReportSection = field(default_factory=ReportSection)
    dataset_path: str | None = None
    output_dir: str | None = None

    # ------------------------------------------------------------ builders

    def net_config(self) -> NetConfig:
        return NetConfig(seed=self.seed, **asdict(self.net))

    def train_config(self) -> TrainConfig:
        t = asdict(self.train)
        t["folds"] = tuple(t["folds"])
        return TrainConfig(seed=self.seed, loss_form=self.loss.form, net=self.net_config(), **t)

    def ring_spec(self) -> SyntheticRingSpec:
        return spec_from_dict({**self.synth.spec, "seed": self.seed})

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


_SECTIONS = {"net": NetSection, "train": TrainSection, "loss": LossSection,
             "synth": SynthSection, "report": ReportSection}


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return cls(**d)


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    sections = {}
    for key, cls in _SECTIONS.items():
        if key in d:
            sections[key] = _strict(cls, d.pop(key), key)
    if "synth" in sections:
        spec = sections["synth"].spec
        allowed = {f.name for f in fields(SyntheticRingSpec)} - {"seed"}
        unknown = sorted(set(spec) - allowed)
        if unknown:
            raise ConfigError(f"synth.spec: unknown key(s) {', '.join(unknown)}")
        sections["synth"].spec = {**SynthSection().spec, **spec}
    cfg = _strict(RunConfig, d, "config")
    for key, val in sections.items():
        setattr(cfg, key, val)
    return cfg


def load(path=None) -> RunConfig:
    """Read a config file (or defaults when ``path`` is None); ``MTL_SEED`` overrides the seed."""
    if path is None:
        cfg = RunConfig()
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = from_dict(raw)
    env = os.environ.get("MTL_SEED")
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"MTL_SEED must be an integer, got {env!r}") from exc
    return cfg
