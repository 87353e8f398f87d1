"""Experiment configuration: INI sections per module, typed by the dataclass defaults.

Unknown sections or keys are rejected by name. :func:`dump_config` writes the
effective configuration (defaults filled in) in the same format, so a run can
be reproduced from its own echo.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .augment import AugmentSpec
from .datagen import NoiseSpec, OOD_SOURCES
from .losses import LossWeights
from .mixematch import MixParams
from .pipeline import OptimConfig, PipelineConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_per_class: int = 500
    n_classes: int = 4
    dim: int = 2
    spread: float = 1.0
    test_per_class: int = 100
    ood_source: str = "uniform_ring"

    def __post_init__(self):
        if self.ood_source not in OOD_SOURCES:
            raise ValueError(f"ood_source must be one of {OOD_SOURCES}")
        if self.test_per_class < 1:
            raise ValueError("test_per_class must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    baseline: bool = False

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if not self.out_dir:
            raise ValueError("out_dir must not be empty")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            run=replace(self.run, seed=seed),
            noise=replace(self.noise, seed=seed),
            pipeline=replace(self.pipeline, seed=seed),
        )

    def with_out_dir(self, out_dir: str) -> "ExperimentConfig":
        return replace(self, run=replace(self.run, out_dir=str(out_dir)))


_NESTED = {"mix": MixParams, "loss": LossWeights, "augment": AugmentSpec, "optim": OptimConfig}
_SKIP = {"pipeline": {"mix", "loss", "augment", "optim", "seed"}, "noise": {"seed"}}


def _sections() -> dict[str, type]:
    return {"data": DataConfig, "noise": NoiseSpec, "pipeline": PipelineConfig, **_NESTED, "run": RunConfig}


def _keys(section: str, cls) -> dict[str, object]:
    defaults = cls()
    return {
        f.name: getattr(defaults, f.name)
        for f in dataclasses.fields(cls)
        if f.name not in _SKIP.get(section, ())
    }


def _parse_value(section: str, key: str, raw: str, default):
    where = f"[{section}] {key}"
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(part) for part in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str  # keep key case so typos are reported verbatim
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    sections = _sections()
    values: dict[str, dict] = {name: {} for name in sections}
    for section in cp.sections():
        if section not in sections:
            raise ConfigError(f"{source}: unknown section [{section}]")
        known = _keys(section, sections[section])
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
            values[section][key] = _parse_value(section, key, raw, known[key])
    return _build(values, source)


def _build(values: dict[str, dict], source: str) -> ExperimentConfig:
    try:
        run = RunConfig(**values["run"])
        nested = {name: cls(**values[name]) for name, cls in _NESTED.items()}
        pipeline = PipelineConfig(**values["pipeline"], **nested, seed=run.seed)
        noise = NoiseSpec(**values["noise"], seed=run.seed)
        data = DataConfig(**values["data"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return ExperimentConfig(data, noise, pipeline, run)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    objects = {
        "data": cfg.data,
        "noise": cfg.noise,
        "pipeline": cfg.pipeline,
        "mix": cfg.pipeline.mix,
        "loss": cfg.pipeline.loss,
        "augment": cfg.pipeline.augment,
        "optim": cfg.pipeline.optim,
        "run": cfg.run,
    }
    lines = []
    for section, obj in objects.items():
        lines.append(f"[{section}]")
        for key in _keys(section, type(obj)):
            lines.append(f"{key} = {_format_value(getattr(obj, key))}")
        lines.append("")
    return "\n".join(lines)
