"""Gaussian and log-Gaussian random field simulation, unconditional and conditional."""

from __future__ import annotations

import logging
from typing import Literal

import numpy as np
from scipy.linalg import LinAlgError, cholesky
from scipy.spatial.distance import cdist

from .errors import SimulationError
from .geo import sample_uniform_locations, sampling_domain
from .kriging import Anchor, build_quadratures, deduplicate_points, local_weights, upscale_all
from .models import BlockPrediction, FieldRealization, FieldScale, RegionSet, VariogramModel
from .pipeline.defaults import (
    DEFAULT_NEIGHBORHOOD,
    JITTER_LEVELS,
    MAX_NEIGHBORHOOD,
    MAX_PAIR_NODES,
)
from .variogram import variogram_gamma

logger = logging.getLogger(__name__)

EXACTNESS_TOLERANCE = 1e-8


def _factor(cov: np.ndarray, sill: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor with the smallest jitter (relative to the sill) that works."""
    identity = np.eye(cov.shape[0])
    for step, level in enumerate(JITTER_LEVELS):
        jitter = level * sill
        try:
            factor = cholesky(cov + jitter * identity, lower=True, check_finite=False)
        except LinAlgError:
            continue
        if step > 0:
            logger.warning("covariance factorization needed jitter %.1e x sill", level)
        else:
            logger.debug("covariance factorized with jitter %.1e", jitter)
        return factor, jitter
    raise SimulationError(
        f"covariance of {cov.shape[0]} locations is not positive definite "
        f"at jitter {JITTER_LEVELS[-1]:g} x sill"
    )


def simulate_unconditional(
    locations: np.ndarray, model: VariogramModel, rng: np.random.Generator
) -> FieldRealization:
    """
    One zero-mean Gaussian realization with covariance sill - gamma(h).

    Co-located inputs share a value.
    """
    xy = np.atleast_2d(np.asarray(locations, dtype=float)).reshape(-1, 2)
    if xy.shape[0] == 0:
        return FieldRealization(locations=xy, values=np.empty(0))
    unique, first, inverse = np.unique(xy, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    unique = unique[order]
    inverse = rank[inverse.reshape(-1)]

    sill = model.sill
    if sill <= 0:
        return FieldRealization(locations=xy, values=np.zeros(xy.shape[0]))
    cov = sill - variogram_gamma(cdist(unique, unique), model)
    factor, jitter = _factor(cov, sill)
    values = factor @ rng.standard_normal(unique.shape[0])
    return FieldRealization(locations=xy, values=values[inverse], jitter=jitter)


def _merge_targets(data_xy: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Joint location set (data first) and the joint index of every target."""
    lookup = {tuple(point): idx for idx, point in enumerate(data_xy.tolist())}
    extra: list[list[float]] = []
    index = np.empty(targets.shape[0], dtype=int)
    for row, point in enumerate(targets.tolist()):
        key = tuple(point)
        if key not in lookup:
            lookup[key] = data_xy.shape[0] + len(extra)
            extra.append(point)
        index[row] = lookup[key]
    joint = np.vstack([data_xy, np.asarray(extra).reshape(-1, 2)]) if extra else data_xy
    return joint, index


def simulate_conditional(
    targets: np.ndarray,
    data_xy: np.ndarray,
    data_values: np.ndarray,
    model: VariogramModel,
    rng: np.random.Generator,
    *,
    q: int = DEFAULT_NEIGHBORHOOD,
    scale: FieldScale = "gaussian",
    check_exactness: bool = False,
) -> FieldRealization:
    """
    Conditional realization Y_c(u) = Yhat(u) + [Y*(u) - Yhat*(u)] at the targets.

    For `log-gaussian`, `data_values` are positive raw values; the field is
    conditioned on their logs with a log-scale model and exponentiated.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float)).reshape(-1, 2)
    values = np.asarray(data_values, dtype=float)
    if values.size == 0:
        raise SimulationError("conditional simulation needs at least one datum")
    if scale == "log-gaussian":
        if np.any(values <= 0):
            raise SimulationError("log-gaussian conditioning data must be strictly positive")
        values = np.log(values)
    xy, values = deduplicate_points(data_xy, values)
    n_data = xy.shape[0]

    joint, target_index = _merge_targets(xy, targets)
    unconditional = simulate_unconditional(joint, model, rng)
    y_star = unconditional.values
    y_star_data = y_star[:n_data]

    # A zero-sill model leaves every kriging system but the single-neighbor one singular.
    q_eff = 1 if model.sill <= 0 else min(q, n_data, MAX_NEIGHBORHOOD)
    neighbors, weights = local_weights(targets, xy, model, q_eff)
    y_hat = np.sum(weights * values[neighbors], axis=1)
    y_hat_star = np.sum(weights * y_star_data[neighbors], axis=1)
    simulated = y_hat + (y_star[target_index] - y_hat_star)

    if check_exactness and model.nugget == 0 and model.sill > 0:
        nb, w = local_weights(xy, xy, model, q_eff)
        at_data = np.sum(w * values[nb], axis=1) + y_star_data
        at_data -= np.sum(w * y_star_data[nb], axis=1)
        deviation = float(np.max(np.abs(at_data - values)))
        if deviation > EXACTNESS_TOLERANCE:
            raise SimulationError(
                f"conditioning data not reproduced (max deviation {deviation:.2e})"
            )

    if scale == "log-gaussian":
        simulated = np.exp(simulated)
    return FieldRealization(
        locations=targets,
        values=simulated,
        scale=scale,
        conditioning=f"{n_data} data locations",
        jitter=unconditional.jitter,
    )


class CovariateRound:
    """
    Precomputed state for repeated covariate rounds.

    Each round samples uniform locations, simulates the field conditional on
    the observed grid data, and block-kriges every region from the simulated
    points with the raw-scale kriging variogram.
    """

    def __init__(
        self,
        regions: RegionSet,
        grid_xy: np.ndarray,
        grid_values: np.ndarray,
        simulation_model: VariogramModel,
        kriging_model: VariogramModel,
        *,
        n_points: int,
        q: int = DEFAULT_NEIGHBORHOOD,
        density: float,
        scale: Literal["raw", "log"] = "log",
        buffer: float = 0.0,
        anchor: Anchor = "centroid",
        max_pair_nodes: int = MAX_PAIR_NODES,
    ) -> None:
        if n_points < 1:
            raise SimulationError("a covariate round needs at least one simulated point")
        self.regions = regions
        self.grid_xy = np.asarray(grid_xy, dtype=float)
        self.grid_values = np.asarray(grid_values, dtype=float)
        self.simulation_model = simulation_model
        self.kriging_model = kriging_model
        self.n_points = n_points
        self.q = q
        self.field_scale: FieldScale = "log-gaussian" if scale == "log" else "gaussian"
        self.anchor = anchor
        self.max_pair_nodes = max_pair_nodes
        self.domain = sampling_domain(regions, buffer)
        self.quadratures = build_quadratures(regions, density)
        self.density = density

    def realize(self, rng: np.random.Generator) -> FieldRealization:
        locations = sample_uniform_locations(self.regions, self.n_points, rng, domain=self.domain)
        return simulate_conditional(
            locations,
            self.grid_xy,
            self.grid_values,
            self.simulation_model,
            rng,
            q=self.q,
            scale=self.field_scale,
        )

    def upscale(self, realization: FieldRealization) -> list[BlockPrediction]:
        points = np.column_stack([realization.locations, realization.values])
        return upscale_all(
            self.regions,
            points,
            self.kriging_model,
            min(self.q, points.shape[0]),
            self.density,
            anchor=self.anchor,
            quadratures=self.quadratures,
            max_pair_nodes=self.max_pair_nodes,
        )

    def draw(self, rng: np.random.Generator) -> list[BlockPrediction]:
        return self.upscale(self.realize(rng))


def simulate_covariate_round(
    regions: RegionSet,
    model: VariogramModel,
    n_points: int,
    q: int,
    density: float,
    rng: np.random.Generator,
    *,
    grid_xy: np.ndarray,
    grid_values: np.ndarray,
    kriging_model: VariogramModel | None = None,
    scale: Literal["raw", "log"] = "log",
    buffer: float = 0.0,
) -> list[BlockPrediction]:
    """One inner round: uniform locations, conditional trajectory, block kriging per region."""
    round_ = CovariateRound(
        regions,
        grid_xy,
        grid_values,
        model,
        kriging_model if kriging_model is not None else model,
        n_points=n_points,
        q=q,
        density=density,
        scale=scale,
        buffer=buffer,
    )
    return round_.draw(rng)


__all__ = [
    "simulate_unconditional",
    "simulate_conditional",
    "CovariateRound",
    "simulate_covariate_round",
]
