"""Append-only run registry: one JSON file per record, named by run_id."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

from pydantic import BaseModel, Field

from ..core import Metrics, NTLError

REGISTRY_ENV = "NTLBENCH_REGISTRY"


class UnknownRunError(NTLError):
    pass


class MetricBlock(BaseModel):
    SA: float
    TA: float
    OA: float

    @classmethod
    def of(cls, m: Metrics) -> "MetricBlock":
        return cls(**m.as_dict())


class AttackResult(BaseModel):
    spec: dict[str, Any]
    label: str
    pre: MetricBlock
    post: MetricBlock
    provenance: dict[str, Any] = Field(default_factory=dict)

    @property
    def deltas(self) -> dict[str, float]:
        return {k: getattr(self.post, k) - getattr(self.pre, k) for k in ("SA", "TA", "OA")}


class RunRecord(BaseModel):
    run_id: str
    kind: str = "train"
    parent_run_id: str | None = None
    config: dict[str, Any]
    pretrain: MetricBlock
    pretrain_val: MetricBlock
    attacks: list[AttackResult] = Field(default_factory=list)
    wall_time_s: float
    artifacts: dict[str, str] = Field(default_factory=dict)

    @property
    def method(self) -> str:
        return self.config["method"]["name"]

    @property
    def dataset(self) -> str:
        ds = self.config["dataset"]
        if ds.get("trigger") is not None:
            return f"{ds['base']}:{ds['application']}"
        shifts = "+".join(f"{s['kind']}{s['magnitude']:g}" for s in ds.get("shift") or [])
        return f"{ds['base']}:{shifts}"


def registry_root(root: str | Path | None = None) -> Path:
    return Path(root or os.environ.get(REGISTRY_ENV, "ntlbench_registry"))


class Registry:
    def __init__(self, root: str | Path | None = None):
        self.root = registry_root(root)
        self.records = self.root / "records"

    def path(self, run_id: str) -> Path:
        return self.records / f"{run_id}.json"

    def exists(self, run_id: str) -> bool:
        return self.path(run_id).exists()

    def append(self, record: RunRecord) -> bool:
        """Write a new record; returns False if ``run_id`` is already present (never overwrites)."""
        self.records.mkdir(parents=True, exist_ok=True)
        try:
            with open(self.path(record.run_id), "x") as fh:
                fh.write(record.model_dump_json(indent=2))
        except FileExistsError:
            return False
        return True

    def get(self, run_id: str) -> RunRecord:
        p = self.path(run_id)
        if not p.exists():
            raise UnknownRunError(f"unknown run_id {run_id!r} in {self.root}")
        return RunRecord.model_validate(json.loads(p.read_text()))

    def ids(self) -> list[str]:
        if not self.records.exists():
            return []
        return sorted(p.stem for p in self.records.glob("*.json"))
