"""Area system services: contiguity, point location, block discretization, sampling."""

from __future__ import annotations

import logging
import math
from typing import Literal, Sequence

import numpy as np
import shapely
from shapely.geometry.base import BaseGeometry

from .errors import GeometryError
from .models import BlockQuadrature, ContiguityMatrix, Region, RegionSet
from .pipeline.defaults import DEFAULT_SNAP_TOLERANCE, MIN_QUADRATURE_NODES

logger = logging.getLogger(__name__)

Predicate = Literal["shared-edge", "shared-point"]

# A corner contact leaves at most 2 * tol of boundary inside the snap buffer.
EDGE_LENGTH_FACTOR = 4.0
MAX_REFINEMENTS = 12
MIN_ACCEPTANCE_RATE = 1e-4
MIN_REJECTION_DRAWS = 100_000
MAX_BATCH = 1_000_000


def _shares_edge(a: BaseGeometry, b: BaseGeometry, tol: float) -> bool:
    overlap = a.boundary.buffer(tol).intersection(b.boundary)
    return overlap.length > EDGE_LENGTH_FACTOR * tol


def _shares_point(a: BaseGeometry, b: BaseGeometry, tol: float) -> bool:
    return a.distance(b) <= tol


def _standardize(region_ids: list[str], adjacency: np.ndarray) -> ContiguityMatrix:
    counts = adjacency.sum(axis=1)
    w = np.zeros_like(adjacency, dtype=float)
    has_neighbors = counts > 0
    w[has_neighbors] = adjacency[has_neighbors] / counts[has_neighbors, None]
    neighbor_sets = [np.flatnonzero(row).tolist() for row in adjacency]
    islands = [rid for rid, count in zip(region_ids, counts) if count == 0]
    return ContiguityMatrix(
        region_ids=list(region_ids),
        w=w,
        adjacency=adjacency.astype(float),
        neighbor_sets=neighbor_sets,
        islands=islands,
    )


def build_contiguity(
    regions: RegionSet,
    predicate: Predicate = "shared-edge",
    snap_tolerance: float = DEFAULT_SNAP_TOLERANCE,
) -> ContiguityMatrix:
    """
    Row-standardized contiguity over the regions in RegionSet order.

    Candidate pairs come from an STR-tree over snap-buffered polygons; each
    candidate is then tested with the configured adjacency predicate.
    """
    if len(regions) == 0:
        raise GeometryError("cannot build contiguity for an empty region set")
    test = _shares_edge if predicate == "shared-edge" else _shares_point
    polygons = [region.polygon for region in regions.regions]
    m = len(polygons)
    adjacency = np.zeros((m, m), dtype=float)
    tree = shapely.STRtree(polygons)
    left, right = tree.query(shapely.buffer(polygons, snap_tolerance))
    for i, j in zip(left.tolist(), right.tolist()):
        if i >= j:
            continue
        if test(polygons[i], polygons[j], snap_tolerance):
            adjacency[i, j] = adjacency[j, i] = 1.0
    matrix = _standardize(regions.ids, adjacency)
    if matrix.islands:
        logger.warning("island regions without neighbors: %s", ", ".join(matrix.islands))
    return matrix


def restrict_contiguity(
    full: ContiguityMatrix,
    keep: Sequence[int],
    universe: Literal["modeled_only", "all_regions"] = "modeled_only",
) -> ContiguityMatrix:
    """Contiguity among a kept subset of regions under the adjacency universe rule."""
    keep = list(keep)
    ids = [full.region_ids[k] for k in keep]
    sub_adjacency = full.adjacency[np.ix_(keep, keep)]
    if universe == "modeled_only":
        matrix = _standardize(ids, sub_adjacency)
    else:
        w = full.w[np.ix_(keep, keep)]
        neighbor_sets = [np.flatnonzero(row).tolist() for row in sub_adjacency]
        islands = [rid for rid, row in zip(ids, sub_adjacency) if not row.any()]
        matrix = ContiguityMatrix(
            region_ids=ids,
            w=w,
            adjacency=sub_adjacency,
            neighbor_sets=neighbor_sets,
            islands=islands,
        )
    if matrix.islands:
        logger.warning("island regions among modeled areas: %s", ", ".join(matrix.islands))
    return matrix


def point_in_region(p: tuple[float, float], region: Region) -> bool:
    """Membership test; boundary points count as inside."""
    return bool(shapely.intersects_xy(region.polygon, p[0], p[1]))


def default_density(regions: RegionSet, nodes_per_region: int) -> float:
    mean_area = float(np.mean([region.polygon.area for region in regions.regions]))
    if mean_area <= 0:
        raise GeometryError("regions have zero mean area")
    return nodes_per_region / mean_area


def discretize_block(region: Region, target_density: float) -> BlockQuadrature:
    if target_density <= 0:
        raise ValueError("target_density must be positive")
    polygon = region.polygon
    if polygon.area <= 0:
        raise GeometryError(f"region {region.id} is degenerate (zero area)")
    min_x, min_y, max_x, max_y = polygon.bounds
    density = target_density
    for _ in range(MAX_REFINEMENTS):
        spacing = 1.0 / math.sqrt(density)
        xs = np.arange(min_x + spacing / 2.0, max_x, spacing)
        ys = np.arange(min_y + spacing / 2.0, max_y, spacing)
        gx, gy = np.meshgrid(xs, ys)
        gx, gy = gx.ravel(), gy.ravel()
        inside = shapely.intersects_xy(polygon, gx, gy)
        if int(inside.sum()) >= MIN_QUADRATURE_NODES:
            nodes = np.column_stack([gx[inside], gy[inside]])
            weights = np.full(nodes.shape[0], 1.0 / nodes.shape[0])
            return BlockQuadrature(region_id=region.id, nodes=nodes, weights=weights)
        density *= 4.0
    raise GeometryError(f"region {region.id}: quadrature refinement did not reach 4 nodes")


def sampling_domain(regions: RegionSet, buffer: float = 0.0) -> BaseGeometry:
    """Union of the regions, optionally dilated; prepared for repeated point tests."""
    domain = regions.union if buffer <= 0 else regions.union.buffer(buffer)
    domain = shapely.union_all([domain])
    if domain.area <= 0:
        raise GeometryError("sampling domain has zero area")
    shapely.prepare(domain)
    return domain


def sample_uniform_locations(
    regions: RegionSet,
    count: int,
    rng: np.random.Generator,
    *,
    buffer: float = 0.0,
    domain: BaseGeometry | None = None,
) -> np.ndarray:
    """Draw `count` points uniformly over the region union by bounding-box rejection."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    if count == 0:
        return np.empty((0, 2))
    domain = domain if domain is not None else sampling_domain(regions, buffer)
    min_x, min_y, max_x, max_y = domain.bounds
    box_area = (max_x - min_x) * (max_y - min_y)
    expected_rate = domain.area / box_area if box_area > 0 else 0.0
    accepted: list[np.ndarray] = []
    n_accepted = 0
    drawn = 0
    while n_accepted < count:
        needed = count - n_accepted
        batch = int(min(MAX_BATCH, max(256, 1.2 * needed / max(expected_rate, 1e-6))))
        xy = rng.uniform((min_x, min_y), (max_x, max_y), size=(batch, 2))
        mask = shapely.intersects_xy(domain, xy[:, 0], xy[:, 1])
        drawn += batch
        n_accepted += int(mask.sum())
        accepted.append(xy[mask])
        if drawn >= MIN_REJECTION_DRAWS and n_accepted / drawn < MIN_ACCEPTANCE_RATE:
            raise GeometryError(
                f"rejection sampling acceptance rate {n_accepted / drawn:.2e} is below "
                f"{MIN_ACCEPTANCE_RATE:g}; geometry is degenerate"
            )
    return np.concatenate(accepted)[:count]


def filter_points_near(xy: np.ndarray, regions: RegionSet, buffer: float) -> np.ndarray:
    """Mask of points within `buffer` map units of the region union."""
    if xy.shape[0] == 0:
        raise GeometryError("no usable grid points")
    distances = shapely.distance(regions.union, shapely.points(xy))
    mask = distances <= buffer
    if not mask.any():
        raise GeometryError("no usable grid points")
    return mask


def count_points_per_region(xy: np.ndarray, regions: RegionSet) -> np.ndarray:
    counts = np.zeros(len(regions), dtype=int)
    if xy.shape[0] == 0:
        return counts
    for idx, region in enumerate(regions.regions):
        counts[idx] = int(shapely.intersects_xy(region.polygon, xy[:, 0], xy[:, 1]).sum())
    return counts


__all__ = [
    "Predicate",
    "build_contiguity",
    "restrict_contiguity",
    "point_in_region",
    "default_density",
    "discretize_block",
    "sampling_domain",
    "sample_uniform_locations",
    "filter_points_near",
    "count_points_per_region",
]
