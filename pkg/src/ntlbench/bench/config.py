"""Experiment configuration: one YAML file describes a whole run."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import Field, ValidationError, field_validator, model_validator

from ..attacks import AttackSpec
from ..core import FrozenModel, NTLError, RunConfig
from ..data import ShiftSpec, TriggerSpec
from ..methods import MethodSpec


class ConfigError(NTLError):
    """Invalid experiment configuration; ``paths`` lists the offending fields."""

    def __init__(self, message: str, paths: list[str] | None = None):
        super().__init__(message)
        self.paths = paths or []


class DatasetBlock(FrozenModel):
    base: Literal["synthetic_glyphs", "digits_idx"] = "synthetic_glyphs"
    seed: int = 0
    paths: tuple[str, str] | None = None
    n: int = Field(2000, ge=10)
    image_size: int = Field(32, gt=0)
    split_seed: int = 0
    shift: list[ShiftSpec] | None = None
    trigger: TriggerSpec | None = None
    application: Literal["ov", "aa"] | None = None

    @model_validator(mode="after")
    def _one_domain_source(self):
        if (self.shift is None) == (self.trigger is None):
            raise ValueError("exactly one of shift or trigger must be given")
        if self.trigger is not None and self.application is None:
            raise ValueError("trigger datasets need application: ov or aa")
        if self.base == "digits_idx" and self.paths is None:
            raise ValueError("digits_idx needs paths: [images, labels]")
        return self

    @field_validator("shift", mode="before")
    @classmethod
    def _listify(cls, v):
        return [v] if isinstance(v, dict) else v


class SweepBlock(FrozenModel):
    param_path: str
    values: list[Any]

    @field_validator("values")
    @classmethod
    def _five(cls, v):
        if len(v) != 5:
            raise ValueError(f"sweep needs exactly 5 values, got {len(v)}")
        return v


class ExperimentConfig(FrozenModel):
    dataset: DatasetBlock
    method: MethodSpec = Field(default_factory=MethodSpec)
    run: RunConfig = Field(default_factory=RunConfig)
    arch: dict[str, Any] = Field(default_factory=dict)
    attacks: list[AttackSpec] = Field(default_factory=list)
    sweep: SweepBlock | None = None
    sweep_index: int | None = None
    output_dir: str = "runs"

    def canonical(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)

    def run_id(self) -> str:
        """Hash of the canonical config; the seed lives in ``run.seed`` and so is covered."""
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _error_paths(err: ValidationError) -> list[str]:
    return [".".join(str(p) for p in e["loc"]) or "<root>" for e in err.errors()]


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        lines = [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in err.errors()]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines), _error_paths(err)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping", ["<root>"])
    return parse_config(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.canonical(), sort_keys=False)


def set_path(data: dict, path: str, value) -> dict:
    """Copy of ``data`` with the dotted ``path`` replaced; list items use integer keys."""
    out = copy.deepcopy(data)
    keys = path.split(".")
    node = out
    for k in keys[:-1]:
        node = node[int(k)] if isinstance(node, list) else node.setdefault(k, {})
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value
    return out


def sweep_variants(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    if cfg.sweep is None:
        raise ConfigError("config has no sweep block", ["sweep"])
    base = cfg.canonical()
    base["sweep"] = None
    return [parse_config({**set_path(base, cfg.sweep.param_path, v), "sweep_index": i})
            for i, v in enumerate(cfg.sweep.values)]
