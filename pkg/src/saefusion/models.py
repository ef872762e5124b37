"""Domain models shared across the estimation pipeline."""

from __future__ import annotations

from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Literal

import numpy as np
import shapely
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from shapely.geometry import Polygon

Coordinate = tuple[float, float]
CellKey = tuple[str, int, int]
MseSource = Literal["analytical-naive", "bootstrap", "deferred"]
FieldScale = Literal["gaussian", "log-gaussian"]


class ArrayModel(BaseModel):
    """Base for models that carry numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True)


class FailureRecord(BaseModel):
    index: int = Field(description="Position of the failed item in its batch.")
    key: str = Field(description="Region id, replicate number, or option name.")
    code: str = Field(description="Machine-readable error code such as 'kriging_singular'.")
    message: str


# ---- geo-core ------------------------------------------------------------


class Region(BaseModel):
    id: str
    rings: list[list[Coordinate]] = Field(
        description="Outer ring first, holes after; projected planar coordinates."
    )
    population_count: int = Field(0, ge=0)
    group_id: str | None = None

    @field_validator("id", mode="before")
    def _stringify_id(cls, value: Any) -> Any:
        return str(value) if value is not None else value

    @model_validator(mode="after")
    def _check_geometry(self) -> "Region":
        if not self.rings or len(self.rings[0]) < 3:
            raise ValueError(f"region {self.id}: outer ring needs at least 3 vertices")
        shell = shapely.LinearRing(self.rings[0])
        if not shell.is_simple:
            raise ValueError(f"region {self.id}: outer ring self-intersects")
        if Polygon(self.rings[0]).area <= 0:
            raise ValueError(f"region {self.id}: outer ring has zero area")
        return self

    @cached_property
    def polygon(self) -> Polygon:
        return Polygon(self.rings[0], holes=self.rings[1:] or None)


class RegionSet(BaseModel):
    regions: list[Region]
    crs_note: str = ""

    @model_validator(mode="after")
    def _check_unique(self) -> "RegionSet":
        seen: set[str] = set()
        for region in self.regions:
            if region.id in seen:
                raise ValueError(f"duplicate region id {region.id}")
            seen.add(region.id)
        return self

    def __len__(self) -> int:
        return len(self.regions)

    @property
    def ids(self) -> list[str]:
        return [region.id for region in self.regions]

    @cached_property
    def index(self) -> dict[str, int]:
        return {region.id: idx for idx, region in enumerate(self.regions)}

    @cached_property
    def union(self) -> Any:
        return shapely.union_all([region.polygon for region in self.regions])

    def subset(self, ids: list[str]) -> "RegionSet":
        wanted = set(ids)
        return RegionSet(
            regions=[region for region in self.regions if region.id in wanted],
            crs_note=self.crs_note,
        )


class ContiguityMatrix(ArrayModel):
    region_ids: list[str]
    w: np.ndarray = Field(description="Row-standardized weights, zero diagonal.")
    adjacency: np.ndarray = Field(description="Symmetric 0/1 adjacency before standardization.")
    neighbor_sets: list[list[int]]
    islands: list[str] = Field(default_factory=list)


class BlockQuadrature(ArrayModel):
    region_id: str
    nodes: np.ndarray = Field(description="n x 2 node coordinates inside the polygon.")
    weights: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])


# ---- survey-direct -------------------------------------------------------


class SurveyRecord(BaseModel):
    region_id: str
    size_class: int = Field(ge=1, le=2)
    type_class: int = Field(ge=1, le=3)
    y: float

    @property
    def cell(self) -> CellKey:
        return (self.region_id, self.size_class, self.type_class)


class CensusCell(BaseModel):
    region_id: str
    size_class: int = Field(ge=1, le=2)
    type_class: int = Field(ge=1, le=3)
    population: int = Field(ge=0, description="N_ist, population units in the cell.")

    @property
    def cell(self) -> CellKey:
        return (self.region_id, self.size_class, self.type_class)


class PoststratWeights(BaseModel):
    weights: dict[CellKey, float] = Field(default_factory=dict)
    sample_counts: dict[CellKey, int] = Field(default_factory=dict)
    uncovered: list[CellKey] = Field(
        default_factory=list, description="Census cells with population but no sample."
    )


class DirectEstimate(BaseModel):
    region_id: str
    n_i: int = 0
    tau_tilde: float = 0.0
    var_tau: float = Field(0.0, ge=0)
    log_mu_tilde: float | None = None
    var_log: float | None = None
    usable: bool = False
    population_count: int = 0
    reason: str | None = None


class CoverageReport(BaseModel):
    uncovered: dict[str, list[tuple[int, int]]] = Field(default_factory=dict)
    unusable: dict[str, str] = Field(default_factory=dict)


# ---- variogram -----------------------------------------------------------


class VariogramModel(BaseModel):
    family: Literal["matern", "exponential", "spherical"] = "matern"
    nugget: float = Field(0.0, ge=0)
    partial_sill: float = Field(1.0, ge=0)
    range: float = Field(1.0, gt=0)
    smoothness: float = Field(0.5, gt=0)

    @property
    def sill(self) -> float:
        return self.nugget + self.partial_sill

    def to_document(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "nugget": self.nugget,
            "partial_sill": self.partial_sill,
            "range": self.range,
            "smoothness": self.smoothness,
            "convention": "range-over-h, c=1",
        }


class EmpiricalVariogram(ArrayModel):
    lags: np.ndarray
    semivariances: np.ndarray
    pair_counts: np.ndarray
    kind: Literal["classical", "robust"]
    max_lag: float
    bin_width: float

    @property
    def bins(self) -> list[tuple[float, float, int]]:
        return [
            (float(h), float(g), int(n))
            for h, g, n in zip(self.lags, self.semivariances, self.pair_counts)
        ]


class CvCurve(BaseModel):
    candidates: list[int]
    rmse: list[float]
    selected: int
    skipped: list[int] = Field(default_factory=list)
    notes: list[str] = Field(default_factory=list)


class FamilyScore(BaseModel):
    family: str
    model: VariogramModel | None = None
    fit_residual: float | None = None
    cv_rmse: float | None = None
    error: FailureRecord | None = None


class FamilyComparison(BaseModel):
    scores: list[FamilyScore]
    best: str


# ---- kriging -------------------------------------------------------------


class KrigingSystem(ArrayModel):
    neighbors: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    weights: np.ndarray
    lagrange: float

    @property
    def variance(self) -> float:
        """Ordinary kriging variance before any within-block correction."""
        return float(self.weights @ self.rhs[:-1] + self.lagrange)


class PredictionStatus(str, Enum):
    ok = "ok"
    missing = "missing"


class BlockPrediction(BaseModel):
    region_id: str
    block_mean: float | None = None
    kriging_variance: float | None = None
    neighborhood: int = 0
    neighbor_ids: list[int] = Field(default_factory=list)
    n_nodes: int = 0
    status: PredictionStatus = PredictionStatus.ok
    variance_clamped: bool = False
    error: FailureRecord | None = None


# ---- sfh -----------------------------------------------------------------


class ModelSpec(BaseModel):
    covariates: list[str] = Field(default_factory=list)
    standardize: bool = True
    random_effect: Literal["independent", "sar"] = "sar"
    intercept: bool = True


class CovariateScaling(BaseModel):
    means: dict[str, float] = Field(default_factory=dict)
    sds: dict[str, float] = Field(default_factory=dict)


class Design(ArrayModel):
    region_ids: list[str]
    y: np.ndarray
    X: np.ndarray
    v_eps: np.ndarray
    columns: list[str]
    scaling: CovariateScaling
    population: np.ndarray


class ConvergenceReport(BaseModel):
    success: bool
    method: str
    starts: int
    iterations: int
    objective: float
    gradient_norm: float
    message: str = ""


class SfhFit(ArrayModel):
    region_ids: list[str]
    random_effect: Literal["independent", "sar"]
    beta: np.ndarray
    beta_names: list[str]
    beta_cov: np.ndarray
    sigma2_v: float = Field(ge=0)
    rho: float
    loglik: float
    v_eps: np.ndarray
    W: np.ndarray
    G: np.ndarray
    V: np.ndarray
    boundary: bool = False
    rho_interval: tuple[float, float] = (0.0, 0.0)
    scaling: CovariateScaling = Field(default_factory=CovariateScaling)
    convergence: ConvergenceReport

    @property
    def theta(self) -> tuple[float, float]:
        return (self.sigma2_v, self.rho)

    def coefficients(self) -> dict[str, float]:
        return {name: float(value) for name, value in zip(self.beta_names, self.beta)}


class AreaPrediction(BaseModel):
    region_id: str
    eblup_log: float
    mse_log: float | None = None
    mse_source: MseSource = "deferred"
    mu_hat: float | None = None
    tau_hat: float | None = None
    rmse_total: float | None = None


# ---- simulate ------------------------------------------------------------


class FieldRealization(ArrayModel):
    locations: np.ndarray
    values: np.ndarray
    scale: FieldScale = "gaussian"
    conditioning: str | None = None
    jitter: float = 0.0


class SyntheticScenario(BaseModel):
    regions: RegionSet
    truth: dict[str, Any]
    paths: dict[str, Path]
    master_seed: int
    true_log_mu: dict[str, float]


# ---- bootstrap -----------------------------------------------------------


class BootstrapRun(ArrayModel):
    B: int
    master_seed: int
    region_ids: list[str]
    parameter_names: list[str]
    replicate_ids: np.ndarray
    estimates: np.ndarray = Field(description="Successful replicates x parameters.")
    truths: np.ndarray = Field(description="Successful replicates x areas, true log means.")
    predictions: np.ndarray = Field(description="Successful replicates x areas, EBLUPs.")
    failures: list[FailureRecord] = Field(default_factory=list)
    success_threshold: float = 0.9

    @property
    def n_success(self) -> int:
        return int(self.replicate_ids.shape[0])

    @property
    def unreliable(self) -> bool:
        return self.n_success < self.success_threshold * self.B

    @property
    def se_defined(self) -> bool:
        return self.n_success >= 2


class ParameterSummary(BaseModel):
    name: str
    estimate: float | None = None
    se: float
    lower: float
    upper: float
    level: float
    n: int


class LrTestResult(BaseModel):
    parameter: str
    l_obs: float
    replicate_stats: list[float]
    p_value: float
    B: int
    n_success: int = Field(0, description="Replicates whose two refits both converged.")
    restricted: str = ""
    unrestricted: str = ""
    failures: list[FailureRecord] = Field(default_factory=list)


class DiagnosticBundle(ArrayModel):
    tables: dict[str, Any] = Field(
        default_factory=dict, description="Table name to pandas DataFrame."
    )


# ---- pipeline ------------------------------------------------------------


class CommandStatus(str, Enum):
    success = "success"
    unreliable = "unreliable"


class CommandSummary(BaseModel):
    command: str
    outputs: list[str] = Field(default_factory=list)
    elapsed_ms: int = 0
    warnings: list[str] = Field(default_factory=list)
    status: CommandStatus = CommandStatus.success


__all__ = [
    "Coordinate",
    "CellKey",
    "MseSource",
    "FieldScale",
    "ArrayModel",
    "FailureRecord",
    "Region",
    "RegionSet",
    "ContiguityMatrix",
    "BlockQuadrature",
    "SurveyRecord",
    "CensusCell",
    "PoststratWeights",
    "DirectEstimate",
    "CoverageReport",
    "VariogramModel",
    "EmpiricalVariogram",
    "CvCurve",
    "FamilyScore",
    "FamilyComparison",
    "KrigingSystem",
    "PredictionStatus",
    "BlockPrediction",
    "ModelSpec",
    "CovariateScaling",
    "Design",
    "ConvergenceReport",
    "SfhFit",
    "AreaPrediction",
    "FieldRealization",
    "SyntheticScenario",
    "BootstrapRun",
    "ParameterSummary",
    "LrTestResult",
    "DiagnosticBundle",
    "CommandStatus",
    "CommandSummary",
]
