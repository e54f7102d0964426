"""Run configuration.

Values come from, in increasing priority, the dataclass defaults, a YAML
file, ``LOG_CTDG_<SECTION>__<KEY>`` environment variables and explicit
overrides (the CLI flags). Environment values are parsed as YAML scalars, so
``LOG_CTDG_TRAIN__EPOCHS=3`` gives an int and ``LOG_CTDG_TRAIN__HOP_SET=[0,1,2]``
a list.
"""

import dataclasses
import hashlib
import logging
import os
from collections.abc import Mapping
from typing import Any, Optional

import yaml

from . import json
from .ctdg import FeatureSwitches
from .detector import ModelConfig, TrainConfig
from .errors import ContractViolation
from .synth import SynthSpec

logger = logging.getLogger(__name__)

ENV_PREFIX = "LOG_CTDG_"
EMBEDDING_PROVIDERS = ("hashed", "external")


@dataclasses.dataclass
class DataConfig:
    path: Optional[str] = None
    format: str = "bgl"
    head_limit: Optional[int] = None
    split_ratio: float = 0.5


@dataclasses.dataclass
class ParserConfig:
    depth: int = 4
    st: float = 0.5
    max_children: int = 100


@dataclasses.dataclass
class EmbeddingConfig:
    provider: str = "hashed"
    # precomputed vectors for the external provider
    path: Optional[str] = None


@dataclasses.dataclass
class DetectConfig:
    # falls back to train.threshold
    threshold: Optional[float] = None


@dataclasses.dataclass
class RunConfig:
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    parser: ParserConfig = dataclasses.field(default_factory=ParserConfig)
    embedding: EmbeddingConfig = dataclasses.field(default_factory=EmbeddingConfig)
    graph: FeatureSwitches = dataclasses.field(default_factory=FeatureSwitches)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    detect: DetectConfig = dataclasses.field(default_factory=DetectConfig)
    synth: SynthSpec = dataclasses.field(default_factory=SynthSpec)
    seed: int = 0
    out_dir: str = "log-ctdg-out"

    def __post_init__(self):
        # the run seed drives every random stream
        self.train.seed = self.seed

    @property
    def threshold(self) -> float:
        if self.detect.threshold is not None:
            return self.detect.threshold
        return self.train.threshold

    def validate(self, need_data: bool = False) -> None:
        if not 0 < self.data.split_ratio < 1:
            raise ContractViolation(
                f"data.split_ratio must be in (0, 1), got {self.data.split_ratio}"
            )
        if self.data.head_limit is not None and self.data.head_limit < 1:
            raise ContractViolation(f"data.head_limit must be >= 1, got {self.data.head_limit}")
        if self.embedding.provider not in EMBEDDING_PROVIDERS:
            raise ContractViolation(f"unknown embedding provider {self.embedding.provider!r}")
        if self.embedding.provider == "external":
            if self.embedding.path is None:
                raise ContractViolation("the external embedding provider needs embedding.path")
            if not os.path.exists(self.embedding.path):
                raise FileNotFoundError(f"embedding file does not exist: {self.embedding.path}")
        if not 0 < self.threshold < 1:
            raise ContractViolation(f"threshold must be in (0, 1), got {self.threshold}")
        if need_data:
            if self.data.path is None:
                raise ContractViolation("data.path is not set")
            if not os.path.exists(self.data.path):
                raise FileNotFoundError(f"input file does not exist: {self.data.path}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self, *sections: str) -> str:
        """Stable hash of the given sections, or of the whole config."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d).encode("utf-8")).hexdigest()[:16]

    def write(self, path: str) -> None:
        json.dump_path(self.to_dict(), path)


def _merge(base: dict, extra: Mapping) -> dict:
    out = dict(base)
    for key, val in extra.items():
        if isinstance(val, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> dict:
    """Collect ``LOG_CTDG_*`` variables into a nested dict."""
    environ = os.environ if environ is None else environ
    out: dict[str, Any] = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX) :].lower()
        value = yaml.safe_load(raw) if raw != "" else None
        if "__" in key:
            section, field = key.split("__", 1)
            out.setdefault(section, {})[field] = value
        else:
            out[key] = value
        logger.debug("config override from %s", name)
    return out


def _build(cls, values: Mapping, where: str):
    if not isinstance(values, Mapping):
        raise ContractViolation(f"config section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ContractViolation(f"unknown keys in config section {where!r}: {unknown}")
    kwargs = dict(values)
    for f in dataclasses.fields(cls):
        # YAML 1.1 reads "1e-3" as a string
        if f.type is float and isinstance(kwargs.get(f.name), (str, int)):
            try:
                kwargs[f.name] = float(kwargs[f.name])
            except ValueError as e:
                raise ContractViolation(f"{where}.{f.name} must be a number") from e
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ContractViolation(f"bad config section {where!r}: {e}") from e


_SECTIONS = {f.name for f in dataclasses.fields(RunConfig)}
_SECTION_TYPES = {
    "data": DataConfig,
    "parser": ParserConfig,
    "embedding": EmbeddingConfig,
    "graph": FeatureSwitches,
    "model": ModelConfig,
    "train": TrainConfig,
    "detect": DetectConfig,
    "synth": SynthSpec,
}


def config_from_dict(values: Mapping) -> RunConfig:
    unknown = sorted(set(values) - set(_SECTIONS))
    if unknown:
        raise ContractViolation(f"unknown config keys: {unknown}")
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        section = values.get(name) or {}
        if name == "train":
            section = {k: v for k, v in section.items() if k != "seed"}
        kwargs[name] = _build(cls, section, name)
    if values.get("seed") is not None:
        kwargs["seed"] = int(values["seed"])
    if values.get("out_dir") is not None:
        kwargs["out_dir"] = str(values["out_dir"])
    return RunConfig(**kwargs)


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Resolve a RunConfig from a YAML file, the environment and overrides.

    Parameters
    ----------
    path : str, optional
        YAML file with any of the sections ``data``, ``parser``,
        ``embedding``, ``graph``, ``model``, ``train``, ``detect``,
        ``synth`` and the top-level keys ``seed`` and ``out_dir``.
    overrides : mapping, optional
        Nested values that win over everything else. ``None`` leaves are
        ignored so unset CLI flags do not clobber the file.
    environ : mapping, optional
        Defaults to ``os.environ``.
    """
    values: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file does not exist: {path}")
        if path.endswith(".json"):
            # a config.json written by an earlier run
            values = json.load_path(path)
        else:
            with open(path) as fp:
                values = yaml.safe_load(fp) or {}
        if not isinstance(values, Mapping):
            raise ContractViolation(f"{path}: config must be a mapping")
    values = _merge(values, env_overrides(environ))
    if overrides:
        values = _merge(values, _drop_none(overrides))
    return config_from_dict(values)


def _drop_none(values: Mapping) -> dict:
    out = {}
    for key, val in values.items():
        if isinstance(val, Mapping):
            val = _drop_none(val)
            if val:
                out[key] = val
        elif val is not None:
            out[key] = val
    return out
