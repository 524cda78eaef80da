"""INI experiment configuration with strict key checking.

Example::

    [experiment]
    schemes = cepam-gaussian, fl+gaussian+sdq
    seeds = 0, 1, 2, 3, 4

    [training]
    iterations = 900
    tau = 15
    clients = 10
    sigma = 0.001

    [data]
    data_dir = /data/mnist
    train = 6000
    val = 500
    test = 1000

    [output]
    out_dir = results
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .fl.sim import SCHEMES, TrainingConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(",", " ").split())


_TRAINING_TYPES = {
    "hidden": _int_tuple,
    "sdq_alpha": _optional_float,
    "iid": _bool,
}


def _training_converter(name: str, default):
    if name in _TRAINING_TYPES:
        return _TRAINING_TYPES[name]
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


TRAINING_KEYS = {f.name: f.default for f in dataclasses.fields(TrainingConfig) if f.name not in ("scheme", "seed")}


@dataclass
class ExperimentConfig:
    training: TrainingConfig = field(default_factory=TrainingConfig)
    schemes: tuple[str, ...] = ("cepam-gaussian",)
    seeds: tuple[int, ...] = (0,)
    data_dir: str | None = None
    n_train: int = 6000
    n_val: int = 500
    n_test: int = 1000
    out_dir: str = "results"

    def __post_init__(self):
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ConfigError(f"unknown scheme(s) {bad}; choose from {', '.join(SCHEMES)} or 'all'")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("dataset sizes must be positive")

    def runs(self) -> list[TrainingConfig]:
        return [replace(self.training, scheme=s, seed=seed) for s in self.schemes for seed in self.seeds]


def parse_schemes(text: str) -> tuple[str, ...]:
    names = tuple(p.strip() for p in text.split(",") if p.strip())
    if names == ("all",):
        return SCHEMES
    return names


_SECTIONS = {
    "experiment": {"schemes", "seeds"},
    "training": set(TRAINING_KEYS),
    "data": {"data_dir", "train", "val", "test"},
    "output": {"out_dir"},
}


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        unknown = set(parser[section]) - _SECTIONS[section]
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    try:
        kwargs = {}
        if parser.has_section("training"):
            for key, text in parser["training"].items():
                kwargs[key] = _training_converter(key, TRAINING_KEYS[key])(text)
        exp, data, out = (parser[s] if parser.has_section(s) else {} for s in ("experiment", "data", "output"))
        training = TrainingConfig(**kwargs) if kwargs else TrainingConfig()
        return ExperimentConfig(
            training=training,
            schemes=parse_schemes(exp.get("schemes", "cepam-gaussian")),
            seeds=_int_tuple(exp.get("seeds", "0")),
            data_dir=(data.get("data_dir") or None),
            n_train=int(data.get("train", 6000)),
            n_val=int(data.get("val", 500)),
            n_test=int(data.get("test", 1000)),
            out_dir=out.get("out_dir", "results"),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def default_config_text() -> str:
    lines = ["[experiment]", "schemes = cepam-gaussian", "seeds = 0", "", "[training]"]
    for key, default in TRAINING_KEYS.items():
        if isinstance(default, tuple):
            default = ", ".join(map(str, default))
        lines.append(f"{key} = {'auto' if default is None else default}")
    lines += ["", "[data]", "data_dir =", "train = 6000", "val = 500", "test = 1000", "", "[output]", "out_dir = results", ""]
    return "\n".join(lines)
