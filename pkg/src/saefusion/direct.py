"""Post-stratified Horvitz-Thompson direct estimates and their log-scale variances."""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from typing import Iterable

from .errors import InputError
from .models import (
    CellKey,
    CensusCell,
    CoverageReport,
    DirectEstimate,
    PoststratWeights,
    RegionSet,
    SurveyRecord,
)

logger = logging.getLogger(__name__)


def poststratify(
    survey: Iterable[SurveyRecord], census: Iterable[CensusCell]
) -> PoststratWeights:
    """Cell weights N_ist / n_ist for every sampled cell."""
    sample_counts: Counter[CellKey] = Counter(record.cell for record in survey)
    population: dict[CellKey, int] = {}
    for cell in census:
        if cell.cell in population:
            raise InputError(f"duplicate census cell {cell.cell}")
        population[cell.cell] = cell.population

    weights: dict[CellKey, float] = {}
    for key in sorted(sample_counts):
        n_cell = sample_counts[key]
        if key not in population:
            raise InputError(f"survey cell {key} has no census counterpart")
        if population[key] < n_cell:
            raise InputError(
                f"census undercount in cell {key}: N={population[key]} < n={n_cell}"
            )
        weights[key] = population[key] / n_cell

    uncovered = sorted(
        key for key, count in population.items() if count > 0 and key not in weights
    )
    return PoststratWeights(
        weights=weights, sample_counts=dict(sample_counts), uncovered=uncovered
    )


def direct_total(
    survey: Iterable[SurveyRecord], weights: PoststratWeights, region_id: str
) -> DirectEstimate:
    tau = 0.0
    var = 0.0
    n_i = 0
    for record in survey:
        if record.region_id != region_id:
            continue
        w = weights.weights.get(record.cell)
        if w is None:
            raise InputError(f"no weight for survey cell {record.cell}")
        tau += w * record.y
        var += w * (w - 1.0) * record.y**2
        n_i += 1
    if n_i == 0:
        return DirectEstimate(region_id=region_id, usable=False, reason="no sampled units")
    return DirectEstimate(region_id=region_id, n_i=n_i, tau_tilde=tau, var_tau=var, usable=True)


def log_scale(est: DirectEstimate, population_count: int) -> DirectEstimate:
    """Fill log mean and delta-method variance; unusable when the log is undefined."""
    if est.n_i == 0:
        return est.model_copy(update={"population_count": population_count, "usable": False})
    if est.tau_tilde <= 0:
        return est.model_copy(
            update={
                "population_count": population_count,
                "usable": False,
                "reason": "non-positive direct total",
            }
        )
    if population_count <= 0:
        return est.model_copy(
            update={
                "population_count": population_count,
                "usable": False,
                "reason": "non-positive population count",
            }
        )
    return est.model_copy(
        update={
            "population_count": population_count,
            "log_mu_tilde": math.log(est.tau_tilde / population_count),
            "var_log": est.var_tau / est.tau_tilde**2,
            "usable": True,
            "reason": None,
        }
    )


def compute_direct_estimates(
    regions: RegionSet, survey: list[SurveyRecord], census: list[CensusCell]
) -> tuple[list[DirectEstimate], CoverageReport]:
    known = set(regions.ids)
    for record in survey:
        if record.region_id not in known:
            raise InputError(f"survey region {record.region_id} is not in the region set")
    weights = poststratify(survey, census)

    by_region: dict[str, list[SurveyRecord]] = defaultdict(list)
    for record in survey:
        by_region[record.region_id].append(record)

    estimates: list[DirectEstimate] = []
    report = CoverageReport()
    for key in weights.uncovered:
        report.uncovered.setdefault(key[0], []).append((key[1], key[2]))
    for region in regions.regions:
        est = direct_total(by_region.get(region.id, []), weights, region.id)
        est = log_scale(est, region.population_count)
        if not est.usable:
            report.unusable[region.id] = est.reason or "unusable"
        estimates.append(est)
    if report.unusable:
        logger.info(
            "%d of %d regions unusable for the log-scale model",
            len(report.unusable),
            len(regions),
        )
    return estimates, report


__all__ = ["poststratify", "direct_total", "log_scale", "compute_direct_estimates"]
