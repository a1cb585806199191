"""
Experiment configuration schema and loader.

Configs are JSON documents with a versioned `schema_version`. Unknown keys are
rejected; JSON syntax errors are reported with their line and schema errors
with the dotted field path, both as ConfigError.
"""

import json
import logging
import os
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.core.errors import ConfigError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAX_AXIS = 256
MIN_AXIS = 8
MAX_SEED = 2 ** 64 - 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TestbedConfig(_Strict):
    """Which triple to build: A = P^1 x P^1 / O(a,b), B = torus x P^1, C = P(O(a) + O(b))."""

    __test__ = False

    id: Literal["A", "B", "C"] = "A"
    a: int = 1
    b: int = 1
    omega_scale: float = Field(1.0, gt=0)
    preset: Optional[str] = None

    @model_validator(mode="after")
    def _check_degrees(self):
        if self.id == "A" and self.b < 1:
            raise ValueError("testbed A needs fiber degree b >= 1")
        return self


class GridConfig(_Strict):
    n_base: int = Field(64, ge=MIN_AXIS, le=MAX_AXIS)
    n_fiber: int = Field(64, ge=MIN_AXIS, le=MAX_AXIS)
    base_extent: float = Field(12.0, gt=0)
    fiber_extent: float = Field(12.0, gt=0)
    symmetry: Literal["auto", "full", "circle-invariant", "bi-invariant"] = "auto"


class FlowConfig(_Strict):
    dt0: float = Field(0.05, gt=0)
    tol_ge: float = Field(1e-5, gt=0)
    max_iter: int = Field(500, ge=0)
    dt_min: float = Field(1e-10, gt=0)
    dt_max: float = Field(50.0, gt=0)
    scheme: Optional[Literal["explicit", "semi-implicit"]] = None
    perturbation: float = Field(0.2, ge=0)


class GeodesicConfig(_Strict):
    n_times: int = Field(17, ge=5, le=MAX_AXIS)
    epsilons: List[float] = Field(default_factory=lambda: [1e-2, 1e-3, 1e-4])
    perturbation: float = Field(0.1, ge=0)

    @field_validator("epsilons")
    @classmethod
    def _check_epsilons(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("at least one epsilon is required")
        if any(not 0 < eps <= 1 for eps in value):
            raise ValueError("epsilons must lie in (0, 1]")
        return value


class StabilityConfig(_Strict):
    degree_range: Tuple[int, int] = (-2, 2)
    fiber_degree_range: Tuple[int, int] = (1, 3)
    k_max: int = Field(10, ge=1)

    @field_validator("degree_range", "fiber_degree_range")
    @classmethod
    def _ordered(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if value[0] > value[1]:
            raise ValueError("range must be (low, high) with low <= high")
        return value


class BridgeConfig(_Strict):
    degrees: List[Tuple[int, int]] = Field(default_factory=lambda: [(1, 1), (2, 0), (1, -1)])
    epsilons: List[float] = Field(default_factory=lambda: [0.0, 0.1, -0.1])
    n_fiber: int = Field(160, ge=MIN_AXIS, le=MAX_AXIS)
    fiber_extent: float = Field(60.0, gt=0)
    tolerance: float = Field(1e-3, gt=0)


class VerifyConfig(_Strict):
    decomposition_samples: int = Field(50, ge=1)
    schur_samples: int = Field(1000, ge=1)
    lambda_potentials: int = Field(10, ge=1)
    variation_paths: int = Field(20, ge=1)
    flow_starts: int = Field(10, ge=1)
    minimum_candidates: int = Field(10, ge=1)
    lower_bound_potentials: int = Field(20, ge=1)


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    testbed: TestbedConfig = Field(default_factory=TestbedConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    geodesic: GeodesicConfig = Field(default_factory=GeodesicConfig)
    stability: StabilityConfig = Field(default_factory=StabilityConfig)
    bridge: BridgeConfig = Field(default_factory=BridgeConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)
    seed: int = Field(0, ge=0, le=MAX_SEED)
    output_dir: str = "out"

    @model_validator(mode="after")
    def _check_flow_steps(self):
        if self.flow.dt_max < self.flow.dt_min:
            raise ValueError("flow.dt_max must not be below flow.dt_min")
        if self.grid.symmetry == "full" and self.testbed.id != "B":
            raise ValueError("full symmetry mode is only available on testbed B")
        return self


def _field_path(error: dict) -> str:
    return ".".join(str(part) for part in error.get("loc", ()))


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(first.get("msg", "invalid value"), field=_field_path(first)) from exc


def load_config(path: str, seed: Optional[int] = None, output_dir: Optional[str] = None) -> ExperimentConfig:
    """Read, validate and apply command-line overrides."""
    if not os.path.exists(path):
        raise ConfigError(f"config file '{path}' not found")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object", line=1)
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = output_dir
    config = parse_config(data)
    logger.info("[Config] Loaded %s (testbed %s, seed %d)", path, config.testbed.id, config.seed)
    return config
