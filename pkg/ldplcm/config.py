"""Configuration module for ldplcm.

This module defines the pydantic models an experiment is parameterized with
and loads them from YAML (or JSON) files, with environment variable expansion
and cross-field validation. Execution options that never change results, like
the worker count or the output directory, are deliberately not part of it.
"""

import os
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ldplcm.datasets import DEFAULT_MAX_RANK
from ldplcm.errors import ConfigError
from ldplcm.frequency_model import BoostingParams

CONFIG_VERSION = 1
_ZIPF_FIELDS = ("n", "s", "max_rank")


class ZipfSpec(BaseModel):
    """Synthetic Zipf dataset.

    Attributes:
        n: Number of clients (records)
        s: Skewness
        max_rank: Largest rank the generator may draw
    """

    model_config = ConfigDict(extra="forbid")

    n: int = Field(default=100_000, ge=1)
    s: float = Field(default=1.1, ge=0)
    max_rank: int = Field(default=DEFAULT_MAX_RANK, ge=1)


class CsvSpec(BaseModel):
    """Dataset ingested from a ``token`` / ``token,count`` CSV file."""

    model_config = ConfigDict(extra="forbid")

    path: str


class DatasetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    zipf: Optional[ZipfSpec] = None
    csv: Optional[CsvSpec] = None


class ExperimentConfig(BaseModel):
    """Full parameterization of one protocol run.

    Attributes:
        version: Config file format version
        epsilon: Privacy budget
        m: Sketch width (hash range)
        k: Sketch depth (number of hash rows)
        r: Phase-1 sampling rate
        theta: Ratio of total frequency mass attributed to high-frequent items
        t: Number of domain items the frequency model is trained on
        model: ``gbdt`` for the learned model, ``oracle`` for exact frequencies
        boosting: Gradient boosting hyperparameters
        dataset: Zipf generator settings or a CSV path
        seed: Master seed every random stream derives from
        trials: Seeds per configuration in sweeps and benches
        baseline: Also run Apple-CMS on the same data and seed
    """

    model_config = ConfigDict(extra="forbid")

    version: int = CONFIG_VERSION
    epsilon: float = 4.0
    m: int = 128
    k: int = 16
    r: float = 0.1
    theta: float = 0.5
    t: int = 10_000
    model: Literal["gbdt", "oracle"] = "gbdt"
    boosting: BoostingParams = Field(default_factory=BoostingParams)
    dataset: DatasetSpec = Field(default_factory=lambda: DatasetSpec(zipf=ZipfSpec()))
    seed: int = Field(default=1, ge=0, le=2**64 - 1)
    trials: int = Field(default=10, ge=1)
    baseline: bool = True

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        """Load configuration from a YAML or JSON file."""
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigError(f"Invalid config: {e}") from e
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"Invalid config: expected a mapping at the top of {path}")
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        try:
            config = cls(**data)
        except ValidationError as e:
            raise ConfigError(f"Invalid config: {e}") from e
        config.expand_vars()
        config.validate_config()
        return config

    def expand_vars(self):
        """Expand environment variables in paths."""
        if self.dataset.csv is not None:
            self.dataset.csv.path = os.path.expandvars(self.dataset.csv.path)

    def validate_config(self):
        """Validate configuration values and relationships."""
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"Unsupported config version: {self.version}")
        if (self.dataset.zipf is None) == (self.dataset.csv is None):
            raise ConfigError("dataset must name exactly one of 'zipf' or 'csv'")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.r < 1:
            raise ConfigError(f"r must be in (0, 1) so both phases have clients, got {self.r}")
        if not 0 < self.theta <= 1:
            raise ConfigError(f"theta must be in (0, 1], got {self.theta}")
        if self.m < 2:
            raise ConfigError(f"m must be >= 2, got {self.m}")
        if not 1 <= self.k < 65536:
            raise ConfigError(f"k must be in [1, 65535] to fit the report row field, got {self.k}")
        if self.t < 1:
            raise ConfigError(f"t must be >= 1, got {self.t}")

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Validated copy with the given fields replaced; ``None`` values are ignored.

        ``n``, ``s`` and ``max_rank`` address the Zipf dataset, ``csv`` replaces
        the dataset by a CSV file.
        """
        data = self.model_dump()
        for key, value in overrides.items():
            if value is None:
                continue
            if key in _ZIPF_FIELDS:
                if data["dataset"]["zipf"] is None:
                    raise ConfigError(f"'{key}' only applies to a zipf dataset")
                data["dataset"]["zipf"][key] = value
            elif key == "csv":
                data["dataset"] = {"csv": {"path": str(value)}}
            else:
                data[key] = value
        return type(self).from_dict(data)

    def resolved(self) -> dict[str, Any]:
        """The fully resolved config as plain JSON-compatible data."""
        return self.model_dump(mode="json", exclude_none=True)
