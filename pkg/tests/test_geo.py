from __future__ import annotations

import numpy as np
import pytest
from pydantic import ValidationError

from saefusion.errors import GeometryError
from saefusion.geo import (
    build_contiguity,
    count_points_per_region,
    discretize_block,
    filter_points_near,
    point_in_region,
    restrict_contiguity,
    sample_uniform_locations,
)
from saefusion.models import Region, RegionSet
from saefusion.utils import substream


def _square(region_id: str, x0: float, y0: float, size: float = 1.0) -> Region:
    ring = [(x0, y0), (x0 + size, y0), (x0 + size, y0 + size), (x0, y0 + size)]
    return Region(id=region_id, rings=[ring], population_count=10)


def _grid(rows: int, cols: int) -> RegionSet:
    return RegionSet(
        regions=[_square(f"R{r}{c}", c, r) for r in range(rows) for c in range(cols)]
    )


def test_three_squares_in_a_row_are_row_standardized():
    regions = RegionSet(regions=[_square(name, x, 0) for x, name in enumerate("ABC")])
    matrix = build_contiguity(regions)
    np.testing.assert_allclose(matrix.w[1], [0.5, 0.0, 0.5])
    np.testing.assert_allclose(matrix.w[0], [0.0, 1.0, 0.0])
    np.testing.assert_allclose(matrix.w[2], [0.0, 1.0, 0.0])
    assert matrix.neighbor_sets[1] == [0, 2]
    assert matrix.islands == []


def test_single_region_is_an_island(caplog):
    regions = RegionSet(regions=[_square("A", 0, 0)])
    with caplog.at_level("WARNING"):
        matrix = build_contiguity(regions)
    assert matrix.w.shape == (1, 1)
    assert matrix.w[0, 0] == 0.0
    assert matrix.islands == ["A"]
    assert "island" in caplog.text


def test_four_by_four_grid_shared_edge_rows_sum_to_one():
    matrix = build_contiguity(_grid(4, 4), "shared-edge")
    np.testing.assert_allclose(matrix.w.sum(axis=1), np.ones(16), atol=1e-12)
    assert np.all(np.diag(matrix.w) == 0.0)
    np.testing.assert_array_equal(matrix.adjacency, matrix.adjacency.T)
    for corner in (0, 3, 12, 15):
        nonzero = matrix.w[corner][matrix.w[corner] > 0]
        np.testing.assert_allclose(nonzero, [0.5, 0.5])


def test_corner_contact_counts_only_for_shared_point():
    regions = RegionSet(regions=[_square("A", 0, 0), _square("B", 1, 1)])
    assert build_contiguity(regions, "shared-edge").adjacency[0, 1] == 0.0
    assert build_contiguity(regions, "shared-point").adjacency[0, 1] == 1.0


def test_empty_region_set_is_rejected():
    with pytest.raises(GeometryError):
        build_contiguity(RegionSet(regions=[]))


def test_restrict_contiguity_universes():
    full = build_contiguity(RegionSet(regions=[_square(n, x, 0) for x, n in enumerate("ABC")]))
    modeled = restrict_contiguity(full, [0, 1], "modeled_only")
    np.testing.assert_allclose(modeled.w, [[0.0, 1.0], [1.0, 0.0]])
    universe = restrict_contiguity(full, [0, 1], "all_regions")
    np.testing.assert_allclose(universe.w, [[0.0, 1.0], [0.5, 0.0]])
    assert universe.region_ids == ["A", "B"]


def test_invalid_regions_fail_validation():
    bowtie = [(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)]
    with pytest.raises(ValidationError):
        Region(id="X", rings=[bowtie])
    with pytest.raises(ValidationError):
        RegionSet(regions=[_square("A", 0, 0), _square("A", 1, 0)])


def test_unit_square_discretization_is_a_uniform_grid():
    quad = discretize_block(_square("A", 0, 0), 100.0)
    assert quad.n_nodes == 100
    np.testing.assert_allclose(quad.weights, 0.01)
    assert abs(quad.weights.sum() - 1.0) < 1e-12


def test_l_shape_keeps_three_quarters_of_the_grid():
    ring = [(0.0, 0.0), (1.0, 0.0), (1.0, 0.5), (0.5, 0.5), (0.5, 1.0), (0.0, 1.0)]
    region = Region(id="L", rings=[ring])
    quad = discretize_block(region, 100.0)
    assert quad.n_nodes == 75
    assert all(point_in_region((x, y), region) for x, y in quad.nodes)


def test_tiny_polygon_is_refined_to_at_least_four_nodes():
    quad = discretize_block(_square("T", 0.0, 0.0, size=0.01), 1.0)
    assert quad.n_nodes >= 4
    assert abs(quad.weights.sum() - 1.0) < 1e-12


def test_point_in_region_counts_boundary_as_inside():
    square = _square("A", 0, 0)
    assert point_in_region((0.5, 0.5), square)
    assert not point_in_region((2.0, 2.0), square)
    assert point_in_region((1.0, 1.0), square)


def test_uniform_sampling_is_uniform_and_reproducible():
    regions = RegionSet(regions=[_square("A", 0, 0)])
    first = sample_uniform_locations(regions, 1000, substream(7, 1))
    second = sample_uniform_locations(regions, 1000, substream(7, 1))
    assert first.shape == (1000, 2)
    np.testing.assert_array_equal(first, second)
    assert np.all(np.abs(first.mean(axis=0) - 0.5) < 0.05)
    assert sample_uniform_locations(regions, 0, substream(7, 1)).shape == (0, 2)


def test_sampled_counts_follow_area_shares():
    regions = RegionSet(regions=[_square("A", 0, 0), _square("B", 1, 0, size=1.0)])
    points = sample_uniform_locations(regions, 1259, substream(3, 0))
    counts = count_points_per_region(points, regions)
    assert counts.sum() == 1259
    assert abs(counts[0] / 1259 - 0.5) < 0.05


def test_grid_filter_keeps_points_within_the_buffer():
    regions = RegionSet(regions=[_square("A", 0, 0)])
    xy = np.array([[0.5, 0.5], [1.5, 0.5], [5.0, 5.0]])
    np.testing.assert_array_equal(filter_points_near(xy, regions, 1.0), [True, True, False])
    with pytest.raises(GeometryError, match="no usable grid points"):
        filter_points_near(np.array([[9.0, 9.0]]), regions, 1.0)
