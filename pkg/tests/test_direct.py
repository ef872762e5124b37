from __future__ import annotations

import math

import pytest

from saefusion.direct import compute_direct_estimates, direct_total, log_scale, poststratify
from saefusion.errors import InputError
from saefusion.models import CensusCell, DirectEstimate, Region, RegionSet, SurveyRecord


def _survey(region_id: str, size_class: int, type_class: int, *ys: float) -> list[SurveyRecord]:
    return [
        SurveyRecord(region_id=region_id, size_class=size_class, type_class=type_class, y=y)
        for y in ys
    ]


def _cell(region_id: str, size_class: int, type_class: int, n: int) -> CensusCell:
    return CensusCell(
        region_id=region_id, size_class=size_class, type_class=type_class, population=n
    )


def _regions(*ids: str, population: int = 10) -> RegionSet:
    return RegionSet(
        regions=[
            Region(
                id=rid,
                rings=[[(k, 0.0), (k + 1.0, 0.0), (k + 1.0, 1.0), (k, 1.0)]],
                population_count=population,
            )
            for k, rid in enumerate(ids)
        ]
    )


def test_poststratify_weights_are_population_over_sample():
    survey = _survey("A", 1, 1, 2.0, 3.0)
    weights = poststratify(survey, [_cell("A", 1, 1, 10), _cell("A", 2, 1, 4)])
    assert weights.weights[("A", 1, 1)] == 5.0
    assert weights.sample_counts[("A", 1, 1)] == 2
    assert weights.uncovered == [("A", 2, 1)]


def test_poststratify_rejects_missing_and_undercounted_cells():
    with pytest.raises(InputError, match="no census counterpart"):
        poststratify(_survey("A", 1, 2, 1.0), [_cell("A", 1, 1, 10)])
    with pytest.raises(InputError, match="undercount"):
        poststratify(_survey("A", 1, 1, 1.0, 2.0, 3.0), [_cell("A", 1, 1, 2)])


def test_direct_total_single_cell():
    survey = _survey("A", 1, 1, 2.0, 3.0)
    est = direct_total(survey, poststratify(survey, [_cell("A", 1, 1, 10)]), "A")
    assert est.tau_tilde == pytest.approx(25.0)
    assert est.var_tau == pytest.approx(260.0)
    assert est.n_i == 2


def test_direct_total_two_cells():
    survey = _survey("A", 1, 1, 1.0) + _survey("A", 2, 1, 4.0)
    weights = poststratify(survey, [_cell("A", 1, 1, 2), _cell("A", 2, 1, 3)])
    est = direct_total(survey, weights, "A")
    assert est.tau_tilde == pytest.approx(14.0)
    assert est.var_tau == pytest.approx(98.0)


def test_full_census_sample_has_zero_variance():
    survey = _survey("A", 1, 1, 2.0, 3.0, 7.0)
    est = direct_total(survey, poststratify(survey, [_cell("A", 1, 1, 3)]), "A")
    assert est.tau_tilde == pytest.approx(12.0)
    assert est.var_tau == 0.0


def test_direct_total_scales_with_the_response():
    survey = _survey("A", 1, 1, 2.0, 3.0) + _survey("A", 2, 2, 5.0)
    census = [_cell("A", 1, 1, 10), _cell("A", 2, 2, 7)]
    base = direct_total(survey, poststratify(survey, census), "A")
    scaled_survey = [r.model_copy(update={"y": 3.0 * r.y}) for r in survey]
    scaled = direct_total(scaled_survey, poststratify(scaled_survey, census), "A")
    assert scaled.tau_tilde == pytest.approx(3.0 * base.tau_tilde)
    assert scaled.var_tau == pytest.approx(9.0 * base.var_tau)


def test_log_scale_delta_method():
    est = DirectEstimate(region_id="A", n_i=2, tau_tilde=25.0, var_tau=260.0, usable=True)
    logged = log_scale(est, 10)
    assert logged.log_mu_tilde == pytest.approx(math.log(2.5))
    assert logged.var_log == pytest.approx(0.416)
    assert logged.population_count == 10

    unit = log_scale(est.model_copy(update={"tau_tilde": 2.0, "var_tau": 4.0}), 1)
    assert unit.log_mu_tilde == pytest.approx(math.log(2.0))
    assert unit.var_log == pytest.approx(1.0)


def test_log_scale_marks_non_positive_totals_unusable():
    est = DirectEstimate(region_id="A", n_i=2, tau_tilde=0.0, var_tau=0.0, usable=True)
    logged = log_scale(est, 10)
    assert not logged.usable
    assert logged.log_mu_tilde is None
    assert logged.reason == "non-positive direct total"


def test_compute_direct_estimates_reports_unsampled_regions():
    regions = _regions("A", "B")
    survey = _survey("A", 1, 1, 2.0, 3.0)
    census = [_cell("A", 1, 1, 10), _cell("B", 1, 1, 5)]
    estimates, report = compute_direct_estimates(regions, survey, census)
    by_id = {est.region_id: est for est in estimates}
    assert [est.region_id for est in estimates] == ["A", "B"]
    assert by_id["A"].usable
    assert by_id["A"].log_mu_tilde == pytest.approx(math.log(2.5))
    assert not by_id["B"].usable
    assert report.unusable == {"B": "no sampled units"}
    assert report.uncovered == {"B": [(1, 1)]}


def test_compute_direct_estimates_rejects_unknown_survey_region():
    with pytest.raises(InputError, match="not in the region set"):
        compute_direct_estimates(
            _regions("A"), _survey("Z", 1, 1, 1.0), [_cell("Z", 1, 1, 3)]
        )
