"""Experiment configuration: a small hierarchical key=value file format.

One file per experiment; `--set section.key=value` flags override the file,
the file overrides defaults. Unknown keys are rejected. The resolved
configuration is snapshotted into the run directory and reproduces the run
(same root seed, same artifacts) when fed back in.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .active_loop import ALConfig
from .trainer import TrainConfig


class ConfigError(Exception):
    pass


@dataclass
class RunMeta:
    name: str = "run"
    label: str = ""            # report column label; defaults to a derived one
    seed: int = 1


@dataclass
class DataConfig:
    source_file: str = ""
    target_file: str = ""
    prefix: str = "data/prepared"
    dev_size: int = 2000
    test_size: int = 2000
    script_src: str = "any"
    script_trg: str = "any"
    baseline_fraction: float = 0.7
    remove_stop_words: bool = False
    stop_words_file: str = ""
    synthetic: str = ""        # "", "copy" or "reverse": generate instead of reading
    synthetic_size: int = 2000
    corpus: str = "train"      # which split the train mode consumes: train|baseline


@dataclass
class BpeConfig:
    merges: int = 16000


@dataclass
class ModelSection:
    d: int = 64
    heads: int = 4
    layers: int = 2
    ffn_width: int = 256
    max_length: int = 60
    tie_weights: bool = True
    scaled_attention: bool = True


@dataclass
class DecodeConfig:
    beam: int = 5
    n_best: int = 5


@dataclass
class ExperimentConfig:
    run: RunMeta = field(default_factory=RunMeta)
    data: DataConfig = field(default_factory=DataConfig)
    bpe: BpeConfig = field(default_factory=BpeConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    al: ALConfig = field(default_factory=ALConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def label(self) -> str:
        return self.run.label or self.run.name


_SECTIONS = {
    "run": RunMeta, "data": DataConfig, "bpe": BpeConfig, "model": ModelSection,
    "train": TrainConfig, "al": ALConfig, "decode": DecodeConfig,
}


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}")
    return raw


def parse_assignments(lines, origin: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected 'section.key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_FIELD_TYPES: dict[str, dict] = {
    section: {f.name: f.type for f in dataclasses.fields(cls)}
    for section, cls in _SECTIONS.items()
}
_TYPE_NAMES = {"int": int, "float": float, "str": str, "bool": bool}


def _field_type(section: str, name: str, key: str):
    fields = _FIELD_TYPES.get(section)
    if fields is None:
        raise ConfigError(f"unknown config section {section!r} in {key!r}")
    if name not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    typ = fields[name]
    if isinstance(typ, str):
        typ = _TYPE_NAMES.get(typ, str)
    return typ


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> ExperimentConfig:
    """Defaults <- file <- --set overrides; a single root seed (run.seed)
    drives every component unless train.seed / al.seed are set explicitly."""
    assignments: dict[str, str] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        assignments.update(parse_assignments(text.splitlines(), str(path)))
    for item in overrides or []:
        assignments.update(parse_assignments([item], "--set"))

    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, raw in assignments.items():
        if key.count(".") != 1:
            raise ConfigError(f"config keys are section.field, got {key!r}")
        section, name = key.split(".")
        typ = _field_type(section, name, key)
        values[section][name] = _coerce(raw, typ, key)

    root_seed = values["run"].get("seed", RunMeta.seed)
    values["train"].setdefault("seed", root_seed)
    values["al"].setdefault("seed", root_seed)
    try:
        sections = {name: cls(**values[name]) for name, cls in _SECTIONS.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    return ExperimentConfig(**sections)


def snapshot(config: ExperimentConfig) -> str:
    """Serialize back to the config format, every key explicit."""
    lines = []
    for section_name in sorted(_SECTIONS):
        section = getattr(config, section_name)
        for f in dataclasses.fields(section):
            lines.append(f"{section_name}.{f.name} = {getattr(section, f.name)}")
    return "\n".join(lines) + "\n"


def write_snapshot(config: ExperimentConfig, run_dir: str | Path) -> Path:
    path = Path(run_dir) / "config.snapshot.cfg"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(snapshot(config), encoding="utf-8")
    return path
