"""Run configuration: one YAML document with a section per module.

Every key can be overridden on the command line with ``--set section.key=value``;
values are parsed as YAML scalars or flow sequences (``--set bank.grid=[4,4]``).
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import STRATEGIES, AugmentConfig
from .dataset import SynthConfig
from .encoder import TrainConfig
from .saliency import PAPER_LEVELS


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = ""  # empty: use <out>/dataset, synthesizing it if needed
    category: str = "synthetic"
    resolution: int = 128


@dataclass
class SaliencyConfig:
    source: str = "builtin"  # builtin | external
    external_dir: str = ""
    total_levels: int = 30
    levels: tuple[int, ...] = PAPER_LEVELS
    sigma_min: float = 0.5
    sigma_max: float = 8.0


@dataclass
class ClusterConfig:
    k: int = 4
    max_iters: int = 100
    tol: float = 1e-6


@dataclass
class BankConfig:
    grid: tuple[int, int] = (8, 8)
    coreset_ratio: float = 0.01
    min_bank_size: int = 10
    smooth_sigma: float = 4.0


@dataclass
class EvalConfig:
    coreset_ratios: tuple[float, ...] = (0.01,)
    pixel_pooling: str = "global"  # global | per-image
    write_heatmaps: bool = True


@dataclass
class AblateConfig:
    seeds: tuple[int, ...] = (0,)
    k_values: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    cluster_choices: tuple[str, ...] = ("kmeans-random", "kmeans-min", "kmeans-max")
    level_combos: tuple[tuple[int, ...], ...] = (
        (4,), (16,), (30,), (4, 16), (16, 30), (4, 16, 30), (4, 9, 16, 23, 30),
    )
    anchor_strategies: tuple[str, ...] = ("kmeans-max", "saliency-sort-topM")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def validate(self) -> None:
        try:
            self.synth.validate()
            self.augment.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        s = self.saliency
        if s.source not in ("builtin", "external"):
            raise ConfigError(f"saliency.source must be builtin or external, got {s.source!r}")
        if s.source == "external" and not s.external_dir:
            raise ConfigError("saliency.external_dir is required for external maps")
        if not s.levels or any(not 1 <= i <= s.total_levels for i in s.levels):
            raise ConfigError(f"saliency.levels must lie in [1, {s.total_levels}]")
        if list(s.levels) != sorted(set(s.levels)):
            raise ConfigError("saliency.levels must be strictly increasing")
        if self.cluster.k < 1:
            raise ConfigError("cluster.k must be >= 1")
        if self.data.resolution < 8:
            raise ConfigError("data.resolution must be >= 8")
        rows, cols = self.bank.grid
        if not (1 <= rows <= self.data.resolution and 1 <= cols <= self.data.resolution):
            raise ConfigError(f"bank.grid {self.bank.grid} does not fit the working resolution")
        for r in (self.bank.coreset_ratio, *self.eval.coreset_ratios):
            if not 0 < r <= 1:
                raise ConfigError(f"coreset ratio {r} outside (0, 1]")
        if self.eval.pixel_pooling not in ("global", "per-image"):
            raise ConfigError("eval.pixel_pooling must be global or per-image")
        for strat in (*self.ablate.cluster_choices, *self.ablate.anchor_strategies):
            if strat not in STRATEGIES:
                raise ConfigError(f"unknown anchor strategy {strat!r}")


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a mapping")
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where} needs {len(args)} entries")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value


def _build(cls, data: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}".lstrip(".")) for k, v in data.items()}
    return cls(**kwargs)


def to_dict(cfg) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v

    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = to_dict(v) if dataclasses.is_dataclass(v) else plain(v)
    return out


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {})


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value for {key}: {exc}") from exc
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key} does not name a config key")
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
    data = apply_overrides(data, list(overrides))
    if seed is not None:
        data["seed"] = seed
    cfg = from_dict(data)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump_config(cfg))
