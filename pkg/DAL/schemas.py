"""
Pydantic models for experiment configurations and reports.

Every experiment has its own config class carrying all of its numeric
parameters with defaults; the classes share ``ExperimentConfigBase`` for the
seed, output location and worker count. ``ExperimentConfig`` is the union of
all of them, discriminated on the ``experiment`` field, and
``parse_config`` validates a raw mapping into the right class. Unknown keys
are rejected so a misspelt parameter never silently falls back to a default.
"""

from __future__ import annotations

import math
import os
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, TypeAdapter, field_validator, model_validator

U64_MAX = 2**64 - 1


def _default_threads() -> int:
    try:
        return max(1, int(os.getenv("POPGRAD_THREADS", "1")))
    except ValueError:
        return 1


### Shared configuration ###


class ExperimentConfigBase(BaseModel):
    """Fields common to every experiment."""

    seed: int = Field(0, ge=0, le=U64_MAX)
    stream_id: int = Field(0, ge=0, le=U64_MAX)
    output_path: Optional[str] = None
    threads: int = Field(default_factory=_default_threads, ge=1, le=256)
    write_xlsx: bool = False

    model_config = {"extra": "forbid"}


class FlowSettings(BaseModel):
    """Integrator settings shared by the flow experiments."""

    step: float = Field(0.1, gt=0)
    max_steps: int = Field(20000, ge=1)
    tol: float = Field(1e-8, gt=0)


### Monte-Carlo checks ###


class VerifyFormulaConfig(ExperimentConfigBase):
    experiment: Literal["verify_formula"] = "verify_formula"
    d: int = Field(100, ge=2)
    sizes: List[int] = Field(default_factory=lambda: [1000, 10000, 100000])
    pairs: int = Field(20, ge=1)
    theta_max: float = Field(math.pi / 2, gt=0, le=math.pi)
    max_pair_error: float = Field(0.08, gt=0)

    @field_validator("sizes")
    def check_sizes(cls, sizes: List[int]) -> List[int]:
        if len(sizes) < 2 or any(n < 1 for n in sizes):
            raise ValueError("sizes needs at least two positive sample counts")
        if sorted(sizes) != sizes or len(set(sizes)) != len(sizes):
            raise ValueError("sizes must be strictly increasing")
        return sizes


class ErrorVsAngleConfig(ExperimentConfigBase):
    experiment: Literal["error_vs_angle"] = "error_vs_angle"
    d: int = Field(100, ge=2)
    n: int = Field(10000, ge=1)
    bins: int = Field(10, ge=2)
    pairs_per_bin: int = Field(50, ge=1)


class UniformCheckConfig(ExperimentConfigBase):
    experiment: Literal["uniform_check"] = "uniform_check"
    d: int = Field(50, ge=2)
    n: int = Field(200000, ge=1)
    pairs: int = Field(10, ge=1)
    theta_max: float = Field(math.pi / 2, gt=0, le=math.pi)
    max_angle: float = Field(0.15, gt=0)


### Critical points ###


class ScanL12Config(ExperimentConfigBase):
    experiment: Literal["scan_l12"] = "scan_l12"
    grid_phi: int = Field(1000, ge=10)
    grid_theta12: int = Field(1000, ge=10)
    csv_stride: int = Field(10, ge=1)


### Flows ###


class FlowSingleConfig(ExperimentConfigBase, FlowSettings):
    experiment: Literal["flow_single"] = "flow_single"
    d: int = Field(3, ge=1)
    trials: int = Field(100, ge=1)
    method: Literal["rk4", "euler"] = "rk4"


class BasinConfig(ExperimentConfigBase, FlowSettings):
    experiment: Literal["basin"] = "basin"
    d: int = Field(10, ge=1)
    epsilon: float = Field(0.2, gt=0, le=1)
    trials: int = Field(2000, ge=100)


class SymmetricFieldConfig(ExperimentConfigBase):
    experiment: Literal["symmetric_field"] = "symmetric_field"
    K: int = Field(2, ge=2)
    grid: int = Field(41, ge=8)
    lo: float = Field(0.0, ge=0)
    hi: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def check_bounds(self) -> "SymmetricFieldConfig":
        if self.lo >= self.hi:
            raise ValueError("lo must be below hi")
        return self


class SymmetricTrajectoriesConfig(ExperimentConfigBase, FlowSettings):
    experiment: Literal["symmetric_trajectories"] = "symmetric_trajectories"
    Ks: List[int] = Field(default_factory=lambda: [2, 5, 10])
    x0: float = Field(1e-3, ge=0)
    y0: float = Field(0.0, ge=0)
    perturbation: float = Field(1e-6, gt=0, lt=0.5)
    record_every: int = Field(10, ge=1)

    @field_validator("Ks")
    def check_ks(cls, values: List[int]) -> List[int]:
        if not values or any(k < 2 for k in values):
            raise ValueError("Ks needs node counts of at least 2")
        return values


class NoisyInitConfig(ExperimentConfigBase, FlowSettings):
    experiment: Literal["noisy_init"] = "noisy_init"
    K: int = Field(2, ge=1)
    d: int = Field(2, ge=1)
    noise_levels: List[float] = Field(default_factory=lambda: [0.0, 0.1, 0.5, 1.0])
    runs: int = Field(8, ge=1)

    @model_validator(mode="after")
    def check_shape(self) -> "NoisyInitConfig":
        if self.d < self.K:
            raise ValueError("d must be at least K")
        if not self.noise_levels or any(level < 0 for level in self.noise_levels):
            raise ValueError("noise_levels needs non-negative values")
        return self


class FixedTopWeightsConfig(ExperimentConfigBase, FlowSettings):
    experiment: Literal["fixed_top_weights"] = "fixed_top_weights"
    K: int = Field(2, ge=1)
    d: int = Field(4, ge=1)
    a_values: List[List[float]] = Field(default_factory=lambda: [[1.0, 1.0], [2.0, 2.0], [1.0, -1.0]])
    runs: int = Field(8, ge=1)
    noise: float = Field(0.1, ge=0)

    @model_validator(mode="after")
    def check_patterns(self) -> "FixedTopWeightsConfig":
        if not self.a_values:
            raise ValueError("a_values must not be empty")
        for pattern in self.a_values:
            if len(pattern) != self.K:
                raise ValueError(f"every a_values entry needs {self.K} weights")
        if self.d < self.K:
            raise ValueError("d must be at least K")
        return self


### Multilayer ###


class MultilayerCheckConfig(ExperimentConfigBase):
    experiment: Literal["multilayer_check"] = "multilayer_check"
    widths: List[int] = Field(default_factory=lambda: [4, 3, 2])
    n: int = Field(256, ge=1)
    nets: int = Field(20, ge=1)
    tolerance: float = Field(1e-4, gt=0)
    kink_band: float = Field(1e-3, ge=0)

    @field_validator("widths")
    def check_widths(cls, widths: List[int]) -> List[int]:
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError("widths needs the input size plus at least one layer")
        return widths


ExperimentConfig = Annotated[
    Union[
        VerifyFormulaConfig,
        ErrorVsAngleConfig,
        UniformCheckConfig,
        ScanL12Config,
        FlowSingleConfig,
        BasinConfig,
        SymmetricFieldConfig,
        SymmetricTrajectoriesConfig,
        NoisyInitConfig,
        FixedTopWeightsConfig,
        MultilayerCheckConfig,
    ],
    Field(discriminator="experiment"),
]

CONFIG_ADAPTER: TypeAdapter = TypeAdapter(ExperimentConfig)

CONFIG_CLASSES: Dict[str, type[ExperimentConfigBase]] = {
    cls.model_fields["experiment"].default: cls
    for cls in (
        VerifyFormulaConfig,
        ErrorVsAngleConfig,
        UniformCheckConfig,
        ScanL12Config,
        FlowSingleConfig,
        BasinConfig,
        SymmetricFieldConfig,
        SymmetricTrajectoriesConfig,
        NoisyInitConfig,
        FixedTopWeightsConfig,
        MultilayerCheckConfig,
    )
}


def parse_config(payload: Dict[str, Any]) -> ExperimentConfigBase:
    """Validate ``payload`` into its experiment's config class (raises ``ValidationError``)."""

    return CONFIG_ADAPTER.validate_python(payload)


### Reports ###


class AcceptanceCheck(BaseModel):
    """One declared threshold and whether the run met it."""

    name: str
    passed: bool
    observed: Union[float, int, str, bool, None] = None
    threshold: Union[float, int, str, bool, None] = None


class ExperimentReport(BaseModel):
    """Structured record of one run; the config echo includes every default."""

    experiment: str
    config: Dict[str, Any]
    summary: Dict[str, Any]
    checks: List[AcceptanceCheck]
    passed: bool
    wall_clock_seconds: float
    rows: int
    csv_path: Optional[str] = None
    json_path: Optional[str] = None
    xlsx_path: Optional[str] = None


class VectorFieldRow(BaseModel):
    x: float
    y: float
    gx: float
    gy: float


__all__ = [
    "ExperimentConfigBase",
    "FlowSettings",
    "VerifyFormulaConfig",
    "ErrorVsAngleConfig",
    "UniformCheckConfig",
    "ScanL12Config",
    "FlowSingleConfig",
    "BasinConfig",
    "SymmetricFieldConfig",
    "SymmetricTrajectoriesConfig",
    "NoisyInitConfig",
    "FixedTopWeightsConfig",
    "MultilayerCheckConfig",
    "ExperimentConfig",
    "CONFIG_ADAPTER",
    "CONFIG_CLASSES",
    "parse_config",
    "AcceptanceCheck",
    "ExperimentReport",
    "VectorFieldRow",
]
