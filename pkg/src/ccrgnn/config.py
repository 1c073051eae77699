# Copyright (c) 2021 Leiden University Medical Center
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in
# all copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.

"""Pipeline configuration files.

A configuration file is TOML with a top-level ``seed`` and the tables
``[data]``, ``[schema]``, ``[synth]``, ``[model]``, ``[train]`` and
``[baseline]``. Every key is optional. The seed is set once at the top level
and shared by training and the baselines; the L2 weight is set once in
``[train]``.

The ``CCRGNN_SEED`` environment variable overrides the seed from the file.
"""

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, Union

import tomli_w

from .errors import ConfigError
from .evaluation import BaselineConfig
from .model import CcrGnnConfig
from .train import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = ["SEED_ENVIRONMENT_VARIABLE", "DataPaths", "SchemaOptions",
           "SynthOptions", "PipelineConfig", "parse_config", "load_config",
           "dump_config", "save_config", "apply_environment"]

SEED_ENVIRONMENT_VARIABLE = "CCRGNN_SEED"

PathLike = Union[str, os.PathLike]
T = TypeVar("T")


@dataclass
class DataPaths:
    train: Optional[str] = None
    test: Optional[str] = None
    schema: Optional[str] = None
    out_dir: str = "."


@dataclass
class SchemaOptions:
    missing_drop_fraction: float = 0.5
    test_fraction: float = 0.2
    smote: bool = True
    smote_k: int = 5

    def __post_init__(self):
        if not 0 < self.missing_drop_fraction <= 1:
            raise ConfigError("missing_drop_fraction must lie in (0, 1]")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.smote_k < 1:
            raise ConfigError("smote_k must be at least 1")


@dataclass
class SynthOptions:
    """Synthetic dataset settings. ``imbalance`` holds one class proportion
    per class; ``None`` means equally sized classes."""
    n: int = 900
    d: int = 39
    m: int = 9
    separation: float = 1.0
    noise: float = 0.08
    imbalance: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.imbalance is not None:
            self.imbalance = tuple(float(p) for p in self.imbalance)
        if self.n < 1 or self.d < 1 or self.m < 2:
            raise ConfigError("synth needs n >= 1, d >= 1 and m >= 2")


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataPaths = field(default_factory=DataPaths)
    schema: SchemaOptions = field(default_factory=SchemaOptions)
    synth: SynthOptions = field(default_factory=SynthOptions)
    model: CcrGnnConfig = field(default_factory=CcrGnnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        self.train = dataclasses.replace(self.train, seed=self.seed)
        self.baseline = dataclasses.replace(self.baseline, seed=self.seed,
                                            num_classes=self.model.num_classes)
        self.model = dataclasses.replace(self.model,
                                         l2=self.train.l2_penalty)

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, seed=seed)


# Keys kept in sync by PipelineConfig and therefore not written per table.
_DERIVED = {
    "train": {"seed"},
    "baseline": {"seed", "num_classes"},
    "model": {"l2"},
}
_SECTIONS: Dict[str, Type] = {
    "data": DataPaths,
    "schema": SchemaOptions,
    "synth": SynthOptions,
    "model": CcrGnnConfig,
    "train": TrainConfig,
    "baseline": BaselineConfig,
}


def _build_section(name: str, cls: Type[T], table: Any) -> T:
    if not isinstance(table, dict):
        raise ConfigError(f"[{name}] must be a table")
    allowed = ({item.name for item in dataclasses.fields(cls)} -
               _DERIVED.get(name, set()))
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"Unknown key(s) in [{name}]: "
                          f"{', '.join(sorted(unknown))}")
    try:
        return cls(**table)
    except TypeError as error:
        raise ConfigError(f"Invalid value in [{name}]: {error}") from error


def _from_document(document: Mapping[str, Any]) -> PipelineConfig:
    unknown = set(document) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"Unknown configuration entries: "
                          f"{', '.join(sorted(unknown))}")
    seed = document.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    sections = {name: _build_section(name, cls, document.get(name, {}))
                for name, cls in _SECTIONS.items()}
    return PipelineConfig(seed=seed, **sections)


def parse_config(text: str) -> PipelineConfig:
    try:
        document = tomllib.loads(text)
    except tomllib.TOMLDecodeError as error:
        raise ConfigError(f"Invalid configuration file: {error}") from error
    return _from_document(document)


def load_config(path: PathLike) -> PipelineConfig:
    with open(path, "rt", encoding="utf-8") as config_h:
        return parse_config(config_h.read())


def _table(name: str, section) -> Dict[str, Any]:
    table = {}
    for item in dataclasses.fields(section):
        if item.name in _DERIVED.get(name, set()):
            continue
        value = getattr(section, item.name)
        if value is None:
            continue
        table[item.name] = list(value) if isinstance(value, tuple) else value
    return table


def dump_config(config: PipelineConfig) -> str:
    """Every effective setting as TOML. Unset optional values are left
    out."""
    document: Dict[str, Any] = {"seed": config.seed}
    for name in _SECTIONS:
        document[name] = _table(name, getattr(config, name))
    return tomli_w.dumps(document)


def save_config(config: PipelineConfig, path: PathLike):
    with open(path, "wt", encoding="utf-8") as config_h:
        config_h.write(dump_config(config))


def apply_environment(config: PipelineConfig,
                      environ: Optional[Mapping[str, str]] = None
                      ) -> PipelineConfig:
    environ = os.environ if environ is None else environ
    value = environ.get(SEED_ENVIRONMENT_VARIABLE)
    if value is None or value == "":
        return config
    try:
        seed = int(value)
    except ValueError:
        raise ConfigError(f"{SEED_ENVIRONMENT_VARIABLE} must be an integer, "
                          f"got {value!r}")
    return config.with_seed(seed)
