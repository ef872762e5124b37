"""Deterministic synthetic scenarios: lattice regions, population, survey and grid covariate."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import shapely

from ..config import ScenarioConfig
from ..errors import ConfigError
from ..geo import build_contiguity
from ..models import Region, RegionSet, SyntheticScenario, VariogramModel
from ..sfh import admissible_rho_interval
from ..simulate import simulate_unconditional
from ..storage import SCENARIO_CONFIG, SCENARIO_MANIFEST, ArtifactStorage, Provenance
from ..utils import hash_payload, substream

logger = logging.getLogger(__name__)

REGIONS_FILE = "regions.geojson"
SURVEY_FILE = "survey.csv"
CENSUS_FILE = "census.csv"
GRID_FILE = "grid.csv"
COVARIATES_FILE = "covariates.csv"

SIZE_CLASSES = (1, 2)
TYPE_CLASSES = (1, 2, 3)
AUX_NOISE_SD = 0.5

# Scenario substream lanes.
LANE_FIELD = 0
LANE_EFFECTS = 1
LANE_POPULATION = 2
LANE_UNITS = 3
LANE_SAMPLE = 4
LANE_CENSUS = 5


def _region_id(row: int, col: int) -> str:
    return f"A{row:02d}{col:02d}"


def _lattice(config: ScenarioConfig) -> list[tuple[str, str, list[tuple[float, float]]]]:
    size = config.cell_size
    cells = []
    for row in range(config.rows):
        for col in range(config.cols):
            x0, y0 = col * size, row * size
            ring = [(x0, y0), (x0 + size, y0), (x0 + size, y0 + size), (x0, y0 + size)]
            group = f"G{row // config.group_block:02d}{col // config.group_block:02d}"
            cells.append((_region_id(row, col), group, ring))
    return cells


def _grid_locations(config: ScenarioConfig) -> np.ndarray:
    spacing = config.cell_size / config.grid_per_cell
    start = -config.buffer + spacing / 2.0
    xs = np.arange(start, config.cols * config.cell_size + config.buffer, spacing)
    ys = np.arange(start, config.rows * config.cell_size + config.buffer, spacing)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def field_model(config: ScenarioConfig) -> VariogramModel:
    return VariogramModel(
        family="matern",
        nugget=config.field_nugget,
        partial_sill=config.field_partial_sill,
        range=config.field_range,
        smoothness=config.field_smoothness,
    )


def make_scenario(
    config: ScenarioConfig, master_seed: int, out_dir: str | Path
) -> SyntheticScenario:
    """
    Build a lattice scenario obeying the log-scale SFH linking model and write its files.

    Every output is a pure function of (config, master_seed).
    """
    out = Path(out_dir)
    cells = _lattice(config)
    ids = [cell[0] for cell in cells]
    n_areas = len(cells)

    # Covariate field over the lattice plus buffer.
    grid_xy = _grid_locations(config)
    model = field_model(config)
    field = simulate_unconditional(grid_xy, model, substream(master_seed, LANE_FIELD))
    grid_values = np.exp(config.field_log_mean + field.values)

    block_means = np.empty(n_areas)
    for idx, (region_id, _, ring) in enumerate(cells):
        inside = shapely.intersects_xy(shapely.Polygon(ring), grid_xy[:, 0], grid_xy[:, 1])
        if not inside.any():
            raise ConfigError(f"region {region_id} holds no grid point; raise grid_per_cell")
        block_means[idx] = grid_values[inside].mean()
    sd = block_means.std(ddof=1) if n_areas > 1 else 0.0
    x_true = (block_means - block_means.mean()) / sd if sd > 0 else np.zeros(n_areas)

    # Linking model on the log scale.
    draft = RegionSet(regions=[Region(id=rid, rings=[ring]) for rid, _, ring in cells])
    contiguity = build_contiguity(draft)
    if config.rho != 0.0:
        lo, hi = admissible_rho_interval(contiguity.w)
        if not lo < config.rho < hi:
            raise ConfigError(
                f"scenario rho {config.rho} outside the admissible interval ({lo:.4f}, {hi:.4f})"
            )
    v = substream(master_seed, LANE_EFFECTS).normal(0.0, np.sqrt(config.sigma2_v), n_areas)
    u = np.linalg.solve(np.eye(n_areas) - config.rho * contiguity.w, v)
    log_mu = config.beta[0] + config.beta[1] * x_true + u

    # Population by (size, type) cell, units, and a stratified sample.
    pop_rng = substream(master_seed, LANE_POPULATION)
    unit_rng = substream(master_seed, LANE_UNITS)
    sample_rng = substream(master_seed, LANE_SAMPLE)
    census_rows: list[dict[str, Any]] = []
    survey_rows: list[dict[str, Any]] = []
    population = np.zeros(n_areas, dtype=int)
    true_total = np.zeros(n_areas)
    sigma = config.unit_log_sd
    for idx, region_id in enumerate(ids):
        mu = float(np.exp(log_mu[idx]))
        for size_class in SIZE_CLASSES:
            for type_class in TYPE_CLASSES:
                n_units = 1 + int(pop_rng.poisson(config.units_per_cell - 1))
                y = mu * np.exp(sigma * unit_rng.standard_normal(n_units) - sigma**2 / 2.0)
                n_sample = int(round(config.sampling_fraction * n_units))
                chosen = np.sort(sample_rng.choice(n_units, size=n_sample, replace=False))
                census_rows.append(
                    {
                        "region_id": region_id,
                        "size_class": size_class,
                        "type_class": type_class,
                        "N": n_units,
                    }
                )
                survey_rows.extend(
                    {
                        "region_id": region_id,
                        "size_class": size_class,
                        "type_class": type_class,
                        "y": float(y[k]),
                    }
                    for k in chosen
                )
                population[idx] += n_units
                true_total[idx] += float(y.sum())

    regions = RegionSet(
        regions=[
            Region(id=rid, rings=[ring], population_count=int(population[idx]), group_id=group)
            for idx, (rid, group, ring) in enumerate(cells)
        ],
        crs_note="synthetic planar metres",
    )
    aux = x_true + substream(master_seed, LANE_CENSUS).normal(0.0, AUX_NOISE_SD, n_areas)

    provenance = Provenance.current(hash_payload(config.model_dump(mode="json")), master_seed)
    storage = ArtifactStorage(out, provenance)
    paths = {
        "regions": storage.write_geojson(REGIONS_FILE, regions),
        "survey": storage.write_csv(
            SURVEY_FILE,
            pd.DataFrame(survey_rows, columns=["region_id", "size_class", "type_class", "y"]),
        ),
        "census": storage.write_csv(CENSUS_FILE, pd.DataFrame(census_rows)),
        "grid": storage.write_csv(
            GRID_FILE, pd.DataFrame({"x": grid_xy[:, 0], "y": grid_xy[:, 1], "value": grid_values})
        ),
        "covariates": storage.write_csv(
            COVARIATES_FILE,
            pd.DataFrame({"region_id": ids, "aux_census": aux, "farm_count": population}),
        ),
    }

    truth = {
        "beta": list(config.beta),
        "sigma2_v": config.sigma2_v,
        "rho": config.rho,
        "field_variogram": model.to_document(),
        "field_log_mean": config.field_log_mean,
        "covariate_mean": float(block_means.mean()),
        "covariate_sd": float(sd),
    }
    true_log_mu = {rid: float(value) for rid, value in zip(ids, log_mu)}
    manifest = {
        "truth": truth,
        "master_seed": master_seed,
        "config": config.model_dump(mode="json"),
        "files": {key: path.name for key, path in paths.items()},
        "true_log_mu": true_log_mu,
        "true_block_means": {rid: float(value) for rid, value in zip(ids, block_means)},
        "true_totals": {rid: float(value) for rid, value in zip(ids, true_total)},
        "random_effects": {rid: float(value) for rid, value in zip(ids, u)},
    }
    paths["manifest"] = storage.write_json(SCENARIO_MANIFEST, manifest)
    paths["config"] = storage.write_text(SCENARIO_CONFIG, _scenario_env(master_seed))
    logger.info(
        "scenario with %d areas, %d sampled units and %d grid points written to %s",
        n_areas,
        len(survey_rows),
        grid_xy.shape[0],
        out,
    )
    return SyntheticScenario(
        regions=regions,
        truth=truth,
        paths=paths,
        master_seed=master_seed,
        true_log_mu=true_log_mu,
    )


def _scenario_env(master_seed: int) -> str:
    lines = [
        f"regions_path={REGIONS_FILE}",
        f"survey_path={SURVEY_FILE}",
        f"census_path={CENSUS_FILE}",
        f"grid_path={GRID_FILE}",
        f"covariates_path={COVARIATES_FILE}",
        f"master_seed={master_seed}",
        "crs_note=synthetic planar metres",
    ]
    return "\n".join(lines) + "\n"


__all__ = ["make_scenario", "field_model"]
