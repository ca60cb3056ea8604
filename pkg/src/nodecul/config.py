"""Experiment configuration from an INI-style file.

Sections: ``[data]``, ``[model]``, ``[train]``, ``[unlearn]``, ``[attack]``
and ``[experiment]``. Relative paths resolve against the config file's
directory. Unknown keys are rejected so typos do not pass silently.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .trainer import TrainConfig
from .unlearn import UnlearnConfig

SECTIONS = ("data", "model", "train", "unlearn", "attack", "experiment")


@dataclass(frozen=True)
class DataConfig:
    dataset: Optional[Path] = None
    content: Optional[Path] = None
    cites: Optional[Path] = None
    test_fraction: float = 0.1
    unlearn_fraction: float = 0.1
    eval_fraction: float = 0.5


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "gcn"
    hidden_dim: int = 64
    embedding_dim: int = 64
    num_layers: int = 2
    dropout: float = 0.5
    gin_eps: float = 0.0


@dataclass(frozen=True)
class AttackConfig:
    n_shadow: int = 16
    enabled: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0
    out: Path = Path("runs")
    ratios: tuple[float, ...] = ()
    retain_structure: bool = False
    jobs: int = 1

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Propagate one seed to every stage."""
        return replace(self, seed=seed, train=replace(self.train, seed=seed),
                       unlearn=replace(self.unlearn, seed=seed))

    def with_ratio(self, ratio: float) -> "ExperimentConfig":
        return replace(self, data=replace(self.data, unlearn_fraction=ratio))


def _convert(value: str, typ, key: str, base: Path):
    text = value.strip()
    try:
        if typ in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ in (int, "int"):
            return int(text)
        if typ in (float, "float"):
            return float(text)
        if typ in ("Optional[int]",):
            return None if text.lower() in ("", "none") else int(text)
        if typ in ("Optional[Path]", "Path"):
            if not text:
                return None
            p = Path(text).expanduser()
            return p if p.is_absolute() else (base / p)
        if typ in ("tuple[float, ...]",):
            return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None
    return text


def _fill(cls, section: configparser.SectionProxy | None, base: Path, name: str, **extra):
    if section is None:
        return cls(**extra)
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = dict(extra)
    for key, value in section.items():
        if key not in types:
            raise ConfigError(f"unknown key [{name}] {key}")
        kwargs[key] = _convert(value, types[key], f"[{name}] {key}", base)
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    """Parse ``path``; missing sections and keys take their defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}] in {path}")
    base = path.parent
    sect = {name: (parser[name] if parser.has_section(name) else None) for name in SECTIONS}
    data = _fill(DataConfig, sect["data"], base, "data")
    if data.dataset is None and (data.content is None or data.cites is None):
        raise ConfigError("[data] needs either dataset or both content and cites")
    for p in (data.dataset, data.content, data.cites):
        if p is not None and not p.exists():
            raise ConfigError(f"[data] path {p} does not exist")
    exp = sect["experiment"]
    exp_kwargs = {}
    if exp is not None:
        types = {"seed": int, "out": "Path", "ratios": "tuple[float, ...]", "retain_structure": bool, "jobs": int}
        for key, value in exp.items():
            if key not in types:
                raise ConfigError(f"unknown key [experiment] {key}")
            exp_kwargs[key] = _convert(value, types[key], f"[experiment] {key}", base)
    if exp_kwargs.get("out") is None:
        exp_kwargs["out"] = base / "runs"
    cfg = ExperimentConfig(
        data=data,
        model=_fill(ModelConfig, sect["model"], base, "model"),
        train=_fill(TrainConfig, sect["train"], base, "train"),
        unlearn=_fill(UnlearnConfig, sect["unlearn"], base, "unlearn"),
        attack=_fill(AttackConfig, sect["attack"], base, "attack"),
        **exp_kwargs,
    )
    return cfg.with_seed(cfg.seed)
