"""Configuration for the estimation pipeline."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError
from .pipeline import defaults
from .utils import hash_payload

AdjacencyPredicate = Literal["shared-edge", "shared-point"]
AdjacencyUniverse = Literal["modeled_only", "all_regions"]
VariogramFamily = Literal["matern", "exponential", "spherical"]
EstimatorKind = Literal["classical", "robust"]
RandomEffect = Literal["independent", "sar"]

# Keys that never change the content of a data file.
_HASH_EXCLUDED = {"workers", "out_dir", "log_level", "render_svg"}
_INPUT_PATHS = (
    "regions_path",
    "survey_path",
    "census_path",
    "grid_path",
    "covariates_path",
    "direct_path",
    "block_means_path",
)


class ScenarioConfig(BaseModel):
    """Truth and layout of a synthetic scenario."""

    rows: int = Field(6, ge=1)
    cols: int = Field(6, ge=1)
    cell_size: float = Field(10_000.0, gt=0)
    beta: list[float] = Field(default_factory=lambda: [3.45, 0.61])
    sigma2_v: float = Field(0.2, ge=0)
    rho: float = Field(0.7)
    field_nugget: float = Field(0.0, ge=0)
    field_partial_sill: float = Field(0.5, gt=0)
    field_range: float = Field(15_000.0, gt=0)
    field_smoothness: float = Field(1.0, gt=0)
    field_log_mean: float = Field(1.0)
    grid_per_cell: int = Field(3, ge=1)
    buffer: float = Field(10_000.0, ge=0)
    units_per_cell: int = Field(20, ge=1)
    sampling_fraction: float = Field(0.1, gt=0, le=1)
    unit_log_sd: float = Field(1.0, ge=0)
    group_block: int = Field(2, ge=1)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ScenarioConfig":
        if len(self.beta) != 2:
            raise ValueError("scenario beta must hold [intercept, slope]")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("scenario rho must lie in (-1, 1)")
        return self


class PipelineConfig(BaseSettings):
    """File-, environment- and flag-backed pipeline settings."""

    # Inputs and outputs
    regions_path: Path | None = None
    survey_path: Path | None = None
    census_path: Path | None = None
    grid_path: Path | None = None
    covariates_path: Path | None = None
    direct_path: Path | None = None
    block_means_path: Path | None = None
    out_dir: Path = Field(Path("out"))
    crs_note: str = Field("")

    # Geometry
    adjacency_predicate: AdjacencyPredicate = "shared-edge"
    adjacency_universe: AdjacencyUniverse = "modeled_only"
    snap_tolerance: float = Field(defaults.DEFAULT_SNAP_TOLERANCE, gt=0)

    # Direct estimates
    var_log_floor: float = Field(defaults.DEFAULT_VAR_LOG_FLOOR, gt=0)

    # Variogram
    variogram_family: VariogramFamily = "matern"
    variogram_scale: Literal["raw", "log"] = "log"
    variogram_estimator: EstimatorKind = "classical"
    variogram_bins: int = Field(defaults.DEFAULT_VARIOGRAM_BINS, ge=4)
    variogram_max_lag: float | None = Field(None, gt=0)
    nu_grid: list[float] = Field(default_factory=lambda: list(defaults.DEFAULT_NU_GRID))
    fix_smoothness: float | None = Field(None, gt=0)
    compare_families: bool = False

    # Kriging
    kriging_neighborhood: int = Field(
        defaults.DEFAULT_NEIGHBORHOOD, ge=1, le=defaults.MAX_NEIGHBORHOOD
    )
    neighborhood_selection: Literal["pinned", "cv"] = "pinned"
    cv_candidates: list[int] = Field(default_factory=lambda: list(defaults.DEFAULT_CV_CANDIDATES))
    cv_folds: int = Field(defaults.DEFAULT_CV_FOLDS, ge=2)
    nodes_per_region: int = Field(defaults.DEFAULT_NODES_PER_REGION, ge=1)
    quadrature_density: float | None = Field(None, gt=0)
    block_anchor: Literal["centroid", "nodes"] = "centroid"
    buffer_km: float = Field(defaults.DEFAULT_BUFFER_KM, ge=0)
    map_units_per_km: float = Field(defaults.DEFAULT_MAP_UNITS_PER_KM, gt=0)

    # Model
    covariates: list[str] = Field(default_factory=list)
    use_upscaled_covariate: bool = True
    upscaled_covariate: str = "block_mean"
    standardize: bool = True
    intercept: bool = True
    random_effects: list[RandomEffect] = Field(default_factory=lambda: ["independent", "sar"])
    naive_mse: bool = False

    # Simulation and bootstrap
    master_seed: int = Field(defaults.DEFAULT_MASTER_SEED, ge=0)
    bootstrap_replicates: int = Field(defaults.DEFAULT_BOOTSTRAP_REPLICATES, ge=1)
    level: float = Field(defaults.DEFAULT_LEVEL, gt=0, lt=1)
    simulate_points: int = Field(defaults.DEFAULT_SIMULATED_POINTS, ge=1)
    simulate_over: Literal["region", "buffered"] = "region"
    simulate_covariate: bool = True
    lr_covariate_source: Literal["simulated", "observed"] = "simulated"
    test_parameter: str | None = None
    success_threshold: float = Field(defaults.SUCCESS_THRESHOLD, gt=0, le=1)
    diag_trajectories: int = Field(defaults.DEFAULT_DIAG_TRAJECTORIES, ge=1)
    group_property: str = "group_id"
    render_svg: bool = False

    # Runtime
    workers: int = Field(1, ge=1)
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = Field("INFO")

    # Scenario generation
    scenario_rows: int = Field(6, ge=1)
    scenario_cols: int = Field(6, ge=1)
    scenario_cell_size: float = Field(10_000.0, gt=0)
    scenario_beta: list[float] = Field(default_factory=lambda: [3.45, 0.61])
    scenario_sigma2_v: float = Field(0.2, ge=0)
    scenario_rho: float = Field(0.7)
    scenario_units_per_cell: int = Field(20, ge=1)
    scenario_sampling_fraction: float = Field(0.1, gt=0, le=1)
    scenario_field_nugget: float = Field(0.0, ge=0)
    scenario_field_partial_sill: float = Field(0.5, gt=0)
    scenario_field_range: float = Field(15_000.0, gt=0)
    scenario_field_smoothness: float = Field(1.0, gt=0)
    scenario_field_log_mean: float = Field(1.0)
    scenario_grid_per_cell: int = Field(3, ge=1)
    scenario_unit_log_sd: float = Field(1.0, ge=0)
    scenario_group_block: int = Field(2, ge=1)

    model_config = SettingsConfigDict(
        env_prefix="",
        env_file=None,
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("log_level", mode="before")
    def _normalize_level(cls, value: Any) -> Any:
        if isinstance(value, str):
            return value.upper()
        return value

    @field_validator("nu_grid")
    def _check_nu_grid(cls, value: list[float]) -> list[float]:
        if not value or any(nu <= 0 for nu in value):
            raise ValueError("nu_grid must be a nonempty list of positive values")
        return value

    @field_validator("cv_candidates")
    def _check_candidates(cls, value: list[int]) -> list[int]:
        if not value or any(q < 1 or q > defaults.MAX_NEIGHBORHOOD for q in value):
            raise ValueError(f"cv_candidates must lie in [1, {defaults.MAX_NEIGHBORHOOD}]")
        return value

    @field_validator("random_effects")
    def _check_effects(cls, value: list[str]) -> list[str]:
        if not value:
            raise ValueError("random_effects must name at least one structure")
        return list(dict.fromkeys(value))

    @property
    def buffer_distance(self) -> float:
        return self.buffer_km * self.map_units_per_km

    @property
    def primary_effect(self) -> RandomEffect:
        return self.random_effects[-1]

    def resolve_input(self, name: str, fallback: str) -> Path:
        """Return an explicit input path or the artifact produced in out_dir."""
        explicit = getattr(self, name)
        return Path(explicit) if explicit is not None else self.out_dir / fallback

    def scenario_config(self) -> ScenarioConfig:
        return ScenarioConfig(
            rows=self.scenario_rows,
            cols=self.scenario_cols,
            cell_size=self.scenario_cell_size,
            beta=self.scenario_beta,
            sigma2_v=self.scenario_sigma2_v,
            rho=self.scenario_rho,
            units_per_cell=self.scenario_units_per_cell,
            sampling_fraction=self.scenario_sampling_fraction,
            field_nugget=self.scenario_field_nugget,
            field_partial_sill=self.scenario_field_partial_sill,
            field_range=self.scenario_field_range,
            field_smoothness=self.scenario_field_smoothness,
            field_log_mean=self.scenario_field_log_mean,
            grid_per_cell=self.scenario_grid_per_cell,
            unit_log_sd=self.scenario_unit_log_sd,
            group_block=self.scenario_group_block,
            buffer=self.buffer_distance,
        )


def load_config(path: str | Path | None = None, **overrides: Any) -> PipelineConfig:
    """Load settings from a dotenv-style key-value file plus overrides."""

    overrides = {key: value for key, value in overrides.items() if value is not None}
    if path is not None and not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}", details={"path": str(path)})
    try:
        config = PipelineConfig(_env_file=path, **overrides)  # type: ignore[call-arg]
    except ValidationError as exc:
        messages = [err["msg"] for err in exc.errors()]
        raise ConfigError(f"invalid configuration: {exc}", details={"errors": messages}) from exc
    if path is None:
        return config
    # Relative input paths resolve against the config file's directory.
    base = Path(path).resolve().parent
    updates = {
        name: base / value
        for name in _INPUT_PATHS
        if (value := getattr(config, name)) is not None and not Path(value).is_absolute()
    }
    return config.model_copy(update=updates) if updates else config


def config_hash(config: PipelineConfig) -> str:
    payload = config.model_dump(mode="json", exclude=_HASH_EXCLUDED | set(_INPUT_PATHS))
    return hash_payload(payload)


__all__ = [
    "AdjacencyPredicate",
    "AdjacencyUniverse",
    "VariogramFamily",
    "EstimatorKind",
    "RandomEffect",
    "ScenarioConfig",
    "PipelineConfig",
    "load_config",
    "config_hash",
]
