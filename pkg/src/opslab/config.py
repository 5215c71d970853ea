"""Run configuration schema (YAML or JSON), validated before any work starts."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .methods import validate_method


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EnvSection(_Strict):
    kind: str = "gridworld"
    parameters: dict = Field(default_factory=dict)
    seed: int = 0


class DataSection(_Strict):
    regime: Literal["well_covered", "well_covered_plus_optimal"] = "well_covered"
    n: int = Field(1000, ge=1)
    seed: int = 0
    mixing: Literal["episode", "state"] = "episode"
    optimal_eps: float = Field(0.4, ge=0.0, le=1.0)


class CandidateSection(_Strict):
    grid: Optional[dict] = None
    path: Optional[str] = None
    master_seed: int = 0
    train_episodes: int = Field(300, ge=1)
    train_eps: float = Field(0.4, ge=0.0, le=1.0)

    @field_validator("grid")
    @classmethod
    def _axes(cls, g):
        if g is None:
            return g
        allowed = {"learning_rate", "class_size", "alpha", "iterations"}
        unknown = set(g) - allowed
        if unknown:
            raise ValueError(f"unknown grid axes {sorted(unknown)}")
        for k, v in g.items():
            if not isinstance(v, list) or not v:
                raise ValueError(f"grid axis {k!r} must be a nonempty list")
        return g


class SweepSection(_Strict):
    n_grid: list[int] = Field(default_factory=lambda: [100, 316, 1000, 3162, 10000])
    seeds: list[int] = Field(default_factory=lambda: list(range(10)))
    k: list[int] = Field(default_factory=lambda: [1])
    jobs: int = Field(1, ge=1)
    record_time: bool = True
    random_repeats: int = Field(10_000, ge=1)

    @field_validator("n_grid", "k")
    @classmethod
    def _positive(cls, v):
        if not v or any(x < 1 for x in v):
            raise ValueError("entries must be positive and the list nonempty")
        return v


class OutputSection(_Strict):
    directory: str = "runs/default"


class RunConfig(_Strict):
    env: EnvSection = Field(default_factory=EnvSection)
    data: DataSection = Field(default_factory=DataSection)
    candidates: CandidateSection = Field(default_factory=CandidateSection)
    methods: list[str] = Field(default_factory=lambda: ["tde", "sbv", "ibes", "fqe", "is", "fqe+ibes(k1=10)"])
    sweep: SweepSection = Field(default_factory=SweepSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @field_validator("methods")
    @classmethod
    def _methods(cls, v):
        if not v:
            raise ValueError("at least one method is required")
        for m in v:
            validate_method(m)
        return v

    @model_validator(mode="after")
    def _env(self):
        from .envs import EnvSpec
        EnvSpec(self.env.kind, self.env.parameters, self.env.seed)
        return self

    def config_id(self) -> str:
        """Short hash of everything that affects results (output location and job count excluded)."""
        d = self.model_dump()
        d.pop("output")
        d["sweep"].pop("jobs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return RunConfig.model_validate(data or {})
