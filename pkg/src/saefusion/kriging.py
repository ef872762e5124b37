"""Ordinary point and block kriging with local neighborhoods."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from typing import Literal, Sequence

import numpy as np
from scipy.linalg import LinAlgError, LinAlgWarning, solve
from scipy.spatial.distance import cdist

from .errors import KrigingError, SaeFusionError
from .geo import discretize_block
from .models import (
    BlockPrediction,
    BlockQuadrature,
    FailureRecord,
    KrigingSystem,
    PredictionStatus,
    Region,
    RegionSet,
    VariogramModel,
)
from .pipeline.defaults import MAX_NEIGHBORHOOD, MAX_PAIR_NODES
from .utils import stable_seed
from .variogram import variogram_gamma

logger = logging.getLogger(__name__)

Anchor = Literal["centroid", "nodes"]

# Rows of targets per distance chunk in batch kriging.
TARGET_CHUNK = 256


def deduplicate_points(xy: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Merge co-located data by their mean, keeping first-occurrence order."""
    xy = np.asarray(xy, dtype=float)
    values = np.asarray(values, dtype=float)
    unique, first, inverse = np.unique(xy, axis=0, return_index=True, return_inverse=True)
    if unique.shape[0] == xy.shape[0]:
        return xy, values
    inverse = inverse.reshape(-1)
    means = np.bincount(inverse, weights=values) / np.bincount(inverse)
    order = np.argsort(first, kind="stable")
    return unique[order], means[order]


def _check_neighborhood(q: int, available: int) -> None:
    if q < 1:
        raise ValueError("neighborhood size must be at least 1")
    if q > MAX_NEIGHBORHOOD:
        raise ValueError(f"neighborhood size {q} exceeds the limit of {MAX_NEIGHBORHOOD}")
    if available < q:
        raise KrigingError(f"neighborhood of {q} requested but only {available} points available")


def _nearest(anchor: np.ndarray, xy: np.ndarray, q: int) -> np.ndarray:
    d = np.hypot(xy[:, 0] - anchor[0], xy[:, 1] - anchor[1])
    return np.argsort(d, kind="stable")[:q]


def _bordered(xy: np.ndarray, model: VariogramModel) -> np.ndarray:
    q = xy.shape[0]
    lhs = np.ones((q + 1, q + 1))
    lhs[:q, :q] = variogram_gamma(cdist(xy, xy), model)
    lhs[q, q] = 0.0
    return lhs


def _solve(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", LinAlgWarning)
            return solve(lhs, rhs, assume_a="sym")
    except (LinAlgError, LinAlgWarning) as exc:
        raise KrigingError(f"kriging system is singular: {exc}") from exc


def kriging_weights(
    target: Sequence[float], xy: np.ndarray, model: VariogramModel, q: int
) -> KrigingSystem:
    """Solved bordered system for a point target using its q nearest data locations."""
    xy = np.asarray(xy, dtype=float)
    _check_neighborhood(q, xy.shape[0])
    anchor = np.asarray(target, dtype=float)
    neighbors = _nearest(anchor, xy, q)
    lhs = _bordered(xy[neighbors], model)
    rhs = np.ones(q + 1)
    rhs[:q] = variogram_gamma(np.hypot(*(xy[neighbors] - anchor).T), model)
    solution = _solve(lhs, rhs)
    return KrigingSystem(
        neighbors=neighbors,
        lhs=lhs,
        rhs=rhs,
        weights=solution[:q],
        lagrange=float(solution[q]),
    )


def point_krige(
    target: Sequence[float], points: np.ndarray, model: VariogramModel, q: int
) -> tuple[float, float, np.ndarray]:
    """Return (prediction, kriging variance, weights) at a point target."""
    pts = np.asarray(points, dtype=float)
    xy, values = deduplicate_points(pts[:, :2], pts[:, 2])
    system = kriging_weights(target, xy, model, q)
    prediction = float(system.weights @ values[system.neighbors])
    return prediction, max(system.variance, 0.0), system.weights


def local_weights(
    targets: np.ndarray, xy: np.ndarray, model: VariogramModel, q: int
) -> tuple[np.ndarray, np.ndarray]:
    """
    Batch ordinary kriging weights.

    Returns (neighbors, weights), both shaped (n_targets, q). The bordered
    systems of all targets are solved as one stacked solve.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    xy = np.asarray(xy, dtype=float)
    _check_neighborhood(q, xy.shape[0])
    n_targets = targets.shape[0]
    neighbors = np.empty((n_targets, q), dtype=int)
    weights = np.empty((n_targets, q))
    for start in range(0, n_targets, TARGET_CHUNK):
        chunk = targets[start : start + TARGET_CHUNK]
        dist = cdist(chunk, xy)
        nb = np.argsort(dist, axis=1, kind="stable")[:, :q]
        local = xy[nb]
        pair = np.linalg.norm(local[:, :, None, :] - local[:, None, :, :], axis=-1)
        lhs = np.ones((chunk.shape[0], q + 1, q + 1))
        lhs[:, :q, :q] = variogram_gamma(pair, model)
        lhs[:, q, q] = 0.0
        rhs = np.ones((chunk.shape[0], q + 1))
        rhs[:, :q] = variogram_gamma(np.take_along_axis(dist, nb, axis=1), model)
        try:
            solution = np.linalg.solve(lhs, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise KrigingError(f"kriging system is singular: {exc}") from exc
        neighbors[start : start + chunk.shape[0]] = nb
        weights[start : start + chunk.shape[0]] = solution[:, :q]
    return neighbors, weights


def krige_points(
    targets: np.ndarray, xy: np.ndarray, values: np.ndarray, model: VariogramModel, q: int
) -> np.ndarray:
    xy, values = deduplicate_points(xy, values)
    neighbors, weights = local_weights(targets, xy, model, q)
    return np.sum(weights * values[neighbors], axis=1)


def _within_block(quad: BlockQuadrature, model: VariogramModel, max_pair_nodes: int) -> float:
    nodes, weights = quad.nodes, quad.weights
    if quad.n_nodes > max_pair_nodes:
        rng = np.random.default_rng(stable_seed(quad.region_id))
        keep = np.sort(rng.choice(quad.n_nodes, size=max_pair_nodes, replace=False))
        nodes = nodes[keep]
        weights = weights[keep] / weights[keep].sum()
    pair_gamma = variogram_gamma(cdist(nodes, nodes), model)
    return float(weights @ pair_gamma @ weights)


def _block_neighbors(
    region: Region, quad: BlockQuadrature, xy: np.ndarray, q: int, anchor: Anchor
) -> np.ndarray:
    centroid = np.array([region.polygon.centroid.x, region.polygon.centroid.y])
    if anchor == "centroid":
        return _nearest(centroid, xy, q)
    per_node = np.argsort(cdist(quad.nodes, xy), axis=1, kind="stable")[:, :q]
    union = np.unique(per_node)
    if union.size > MAX_NEIGHBORHOOD:
        d = np.hypot(xy[union, 0] - centroid[0], xy[union, 1] - centroid[1])
        union = union[np.argsort(d, kind="stable")[:MAX_NEIGHBORHOOD]]
    return union


def block_krige(
    region: Region,
    quad: BlockQuadrature,
    points: np.ndarray,
    model: VariogramModel,
    q: int,
    *,
    anchor: Anchor = "centroid",
    max_pair_nodes: int = MAX_PAIR_NODES,
) -> BlockPrediction:
    """Ordinary block kriging of the region average from point data."""
    pts = np.asarray(points, dtype=float)
    xy, values = deduplicate_points(pts[:, :2], pts[:, 2])
    _check_neighborhood(q, xy.shape[0])
    neighbors = _block_neighbors(region, quad, xy, q, anchor)
    size = neighbors.size
    lhs = _bordered(xy[neighbors], model)
    gamma_bv = variogram_gamma(cdist(xy[neighbors], quad.nodes), model) @ quad.weights
    rhs = np.ones(size + 1)
    rhs[:size] = gamma_bv
    solution = _solve(lhs, rhs)
    weights, lagrange = solution[:size], float(solution[size])

    block_mean = float(weights @ values[neighbors])
    variance = float(weights @ gamma_bv + lagrange - _within_block(quad, model, max_pair_nodes))
    clamped = variance < 0
    if clamped:
        logger.warning("region %s: clamped kriging variance %.3e to 0", region.id, variance)
        variance = 0.0
    return BlockPrediction(
        region_id=region.id,
        block_mean=block_mean,
        kriging_variance=variance,
        neighborhood=size,
        neighbor_ids=neighbors.tolist(),
        n_nodes=quad.n_nodes,
        variance_clamped=clamped,
    )


def _missing(index: int, region_id: str, exc: SaeFusionError) -> BlockPrediction:
    logger.warning("region %s marked missing: %s", region_id, exc.message)
    return BlockPrediction(
        region_id=region_id,
        status=PredictionStatus.missing,
        error=FailureRecord(index=index, key=region_id, code=exc.code, message=exc.message),
    )


def build_quadratures(
    regions: RegionSet, density: float
) -> list[BlockQuadrature | SaeFusionError]:
    quads: list[BlockQuadrature | SaeFusionError] = []
    for region in regions.regions:
        try:
            quads.append(discretize_block(region, density))
        except SaeFusionError as exc:
            quads.append(exc)
    return quads


def upscale_all(
    regions: RegionSet,
    points: np.ndarray,
    model: VariogramModel,
    q: int,
    density: float,
    *,
    workers: int = 1,
    anchor: Anchor = "centroid",
    quadratures: list[BlockQuadrature | SaeFusionError] | None = None,
    max_pair_nodes: int = MAX_PAIR_NODES,
) -> list[BlockPrediction]:
    """One BlockPrediction per region in RegionSet order; failures are marked missing."""
    pts = np.asarray(points, dtype=float)
    quads = quadratures if quadratures is not None else build_quadratures(regions, density)

    def _one(index: int) -> BlockPrediction:
        region = regions.regions[index]
        quad = quads[index]
        if isinstance(quad, SaeFusionError):
            return _missing(index, region.id, quad)
        try:
            return block_krige(
                region, quad, pts, model, q, anchor=anchor, max_pair_nodes=max_pair_nodes
            )
        except SaeFusionError as exc:
            return _missing(index, region.id, exc)

    if workers <= 1:
        return [_one(index) for index in range(len(regions))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_one, range(len(regions))))


__all__ = [
    "Anchor",
    "deduplicate_points",
    "kriging_weights",
    "point_krige",
    "local_weights",
    "krige_points",
    "block_krige",
    "build_quadratures",
    "upscale_all",
]
