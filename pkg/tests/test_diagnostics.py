from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest

from saefusion.diagnostics import (
    DiagnosticInputs,
    block_mean_agreement,
    bootstrap_density_envelope,
    density_envelope,
    diagnostics_suite,
    group_aggregation,
    model_comparison,
    mse_comparison,
    point_counts,
    prediction_envelope,
    qq_residuals,
    render_svg,
    variogram_envelope,
)
from saefusion.models import (
    BootstrapRun,
    CovariateScaling,
    Design,
    DirectEstimate,
    FieldRealization,
    ModelSpec,
    Region,
    RegionSet,
    VariogramModel,
)
from saefusion.sfh import back_transform, eblup_all, reml_fit
from saefusion.simulate import simulate_unconditional
from saefusion.utils import substream


def _regions(n: int) -> RegionSet:
    return RegionSet(
        regions=[
            Region(
                id=f"A{i:02d}",
                rings=[[(i, 0.0), (i + 1.0, 0.0), (i + 1.0, 1.0), (i, 1.0)]],
                population_count=10 * (i + 1),
                group_id="G1" if i < n // 2 else "G2",
            )
            for i in range(n)
        ]
    )


def _design(regions: RegionSet, seed: int) -> Design:
    m = len(regions)
    rng = substream(seed, 0)
    X = np.column_stack([np.ones(m), rng.standard_normal(m)])
    y = X @ np.array([1.0, 0.5]) + rng.normal(0.0, math.sqrt(0.3), m)
    return Design(
        region_ids=regions.ids,
        y=y,
        X=X,
        v_eps=np.full(m, 0.1),
        columns=["intercept", "block_mean"],
        scaling=CovariateScaling(),
        population=np.array([r.population_count for r in regions.regions], dtype=float),
    )


def _fit(design: Design):
    return reml_fit(
        design.y,
        design.X,
        design.v_eps,
        None,
        ModelSpec(random_effect="independent"),
        columns=design.columns,
        region_ids=design.region_ids,
    )


def _direct(regions: RegionSet, design: Design) -> list[DirectEstimate]:
    return [
        DirectEstimate(
            region_id=rid,
            n_i=4,
            tau_tilde=float(pop * math.exp(y)),
            var_tau=float((pop * math.exp(y)) ** 2 * 0.1),
            log_mu_tilde=float(y),
            var_log=0.1,
            usable=True,
            population_count=int(pop),
        )
        for rid, y, pop in zip(regions.ids, design.y, design.population)
    ]


def _zero_noise_run(design: Design, replicates: int = 20) -> BootstrapRun:
    truths = np.tile(design.y, (replicates, 1))
    return BootstrapRun(
        B=replicates,
        master_seed=0,
        region_ids=design.region_ids,
        parameter_names=["intercept"],
        replicate_ids=np.arange(1, replicates + 1),
        estimates=np.ones((replicates, 1)),
        truths=truths,
        predictions=truths.copy(),
    )


def _noisy_run(design: Design, replicates: int = 40, sd: float = 0.1) -> BootstrapRun:
    run = _zero_noise_run(design, replicates)
    noise = sd * substream(12, 0).standard_normal(run.truths.shape)
    return run.model_copy(update={"predictions": run.truths + noise})


def _predictions(design: Design, fit, mse: float | None = 0.05):
    eblups = eblup_all(fit, design.y, design.X)
    return [
        back_transform(rid, float(e), mse, pop)
        if mse is not None
        else back_transform(rid, float(e), 0.0, pop).model_copy(update={"mse_log": None})
        for rid, e, pop in zip(design.region_ids, eblups, design.population)
    ]


def test_qq_coordinates_of_gaussian_residuals_stay_in_the_band():
    regions = _regions(80)
    design = _design(regions, 1)
    table = qq_residuals(_fit(design), design)
    assert set(table["series"]) == {"sampling_error", "random_effect"}
    sampling = table[table["series"] == "sampling_error"]
    assert len(sampling) == 80
    assert list(sampling["rank"]) == list(range(1, 81))
    assert sampling["theoretical"].is_monotonic_increasing
    assert (sampling["band_lower"] < sampling["band_upper"]).all()
    assert sampling["inside"].mean() >= 0.9


def test_sar_fits_add_an_innovation_series():
    regions = _regions(6)
    design = _design(regions, 2)
    fit = _fit(design).model_copy(update={"random_effect": "sar", "rho": 0.0})
    table = qq_residuals(fit, design)
    assert "innovation" in set(table["series"])


def test_zero_noise_envelope_collapses_onto_the_estimates():
    regions = _regions(6)
    design = _design(regions, 3)
    preds = _predictions(design, _fit(design))
    env = prediction_envelope(_zero_noise_run(design), preds, design.population)
    np.testing.assert_allclose(env["lower_log"], env["actual_eblup_log"])
    np.testing.assert_allclose(env["upper_log"], env["actual_eblup_log"])
    np.testing.assert_allclose(env["mean_total"], env["actual_total"])
    np.testing.assert_allclose(env["actual_total"], [p.tau_hat for p in preds])


def test_mse_comparison_reports_area_and_summary_rows():
    direct = [
        DirectEstimate(region_id="A", n_i=3, tau_tilde=100.0, var_tau=400.0, var_log=0.04,
                       log_mu_tilde=1.0, usable=True, population_count=10),
        DirectEstimate(region_id="B", n_i=0, usable=False, reason="no sampled units"),
    ]
    preds = {
        "sar": [
            back_transform("A", 1.0, math.log(1.01), 10),
            back_transform("B", 1.2, math.log(1.04), 10),
        ]
    }
    table = mse_comparison(direct, preds)
    row_a = table[table["region_id"] == "A"].iloc[0]
    assert row_a["cv_direct"] == pytest.approx(0.2)
    assert row_a["cv_model"] == pytest.approx(0.1)
    assert row_a["cv_reduction_pct"] == pytest.approx(50.0)
    assert math.isnan(table[table["region_id"] == "B"].iloc[0]["cv_direct"])
    summary = table[table["region_id"] == "ALL"].iloc[0]
    assert summary["model"] == "sar"
    assert summary["cv_model"] == pytest.approx(0.15)
    assert summary["cv_reduction_pct"] == pytest.approx(25.0)


def test_zero_noise_density_envelope_matches_the_actual_totals():
    regions = _regions(8)
    design = _design(regions, 11)
    preds = _predictions(design, _fit(design))
    density = bootstrap_density_envelope(_zero_noise_run(design), preds, design.population)
    assert len(density) == 128
    np.testing.assert_allclose(density["lower"], density["actual"])
    np.testing.assert_allclose(density["upper"], density["actual"])


def test_noisy_density_envelope_is_ordered():
    regions = _regions(8)
    design = _design(regions, 11)
    preds = _predictions(design, _fit(design))
    density = bootstrap_density_envelope(_noisy_run(design), preds, design.population)
    assert (density["lower"] <= density["upper"] + 1e-12).all()
    assert density["actual"].notna().all()


def test_mse_bounds_come_from_replicate_squared_errors():
    regions = _regions(8)
    design = _design(regions, 12)
    preds = _predictions(design, _fit(design))
    run = _noisy_run(design)
    table = mse_comparison(
        _direct(regions, design), {"independent": preds, "sar": preds}, run, "independent"
    )
    areas = table[table["region_id"] != "ALL"]
    modelled = areas[areas["model"] == "independent"]
    squared = (run.predictions - run.truths) ** 2
    assert modelled["mse_lower"].iloc[0] == pytest.approx(np.percentile(squared[:, 0], 2.5))
    assert modelled["mse_upper"].iloc[0] == pytest.approx(np.percentile(squared[:, 0], 97.5))
    assert (modelled["mse_lower"] >= 0).all()
    assert (modelled["mse_lower"] <= modelled["mse_upper"]).all()
    assert areas.loc[areas["model"] == "sar", "mse_lower"].isna().all()
    summary = table[(table["region_id"] == "ALL") & (table["model"] == "independent")]
    assert summary["mse_upper"].iloc[0] == pytest.approx(modelled["mse_upper"].mean())
    assert mse_comparison(_direct(regions, design), {"independent": preds})[
        "mse_lower"
    ].isna().all()


def test_suite_adds_bootstrap_bands_for_the_primary_model():
    regions = _regions(8)
    design = _design(regions, 13)
    fit = _fit(design)
    inputs = DiagnosticInputs(
        regions=regions,
        design=design,
        direct=_direct(regions, design),
        predictions={"independent": _predictions(design, fit)},
    )
    bundle = diagnostics_suite(fit, _noisy_run(design), inputs)
    table = bundle.tables["mse_comparison"]
    assert np.isfinite(table["mse_lower"]).all()
    assert np.isfinite(table["mse_upper"]).all()
    density = bundle.tables["bootstrap_density_envelope"]
    assert list(density.columns) == ["x", "actual", "mean", "lower", "upper"]


def test_group_totals_add_up_and_collapse_without_noise():
    regions = _regions(6)
    design = _design(regions, 4)
    preds = _predictions(design, _fit(design))
    direct = _direct(regions, design)
    table = group_aggregation(regions, preds, direct, _zero_noise_run(design))
    assert list(table["group_id"]) == ["G1", "G2"]
    g1 = table.iloc[0]
    assert g1["n_areas"] == 3
    assert g1["tau_hat_sum"] == pytest.approx(sum(p.tau_hat for p in preds[:3]))
    assert g1["direct_sum"] == pytest.approx(sum(d.tau_tilde for d in direct[:3]))
    assert g1["lower"] == pytest.approx(g1["tau_hat_sum"])
    assert g1["upper"] == pytest.approx(g1["tau_hat_sum"])
    no_run = group_aggregation(regions, preds, direct)
    assert no_run["lower"].isna().all()


def test_point_counts_average_over_trajectories():
    regions = _regions(2)
    first = FieldRealization(locations=np.array([[0.5, 0.5], [1.5, 0.5]]), values=np.zeros(2))
    second = FieldRealization(locations=np.array([[0.2, 0.5], [0.7, 0.5]]), values=np.zeros(2))
    grid = np.array([[0.5, 0.5], [1.2, 0.2], [1.8, 0.8]])
    table = point_counts([first, second], grid, regions)
    assert list(table["simulated_mean"]) == [1.5, 0.5]
    assert list(table["actual"]) == [1, 2]


def test_variogram_envelope_brackets_a_matching_model():
    model = VariogramModel(family="exponential", partial_sill=1.0, range=1.0)
    xy = substream(6, 0).uniform(0.0, 6.0, size=(150, 2))
    data = np.column_stack([xy, simulate_unconditional(xy, model, substream(6, 1)).values])
    trajectories = [simulate_unconditional(xy, model, substream(6, 2, t)) for t in range(30)]
    table = variogram_envelope(trajectories, data, n_bins=8)
    assert 0 < len(table) <= 8
    assert (table["lower"] <= table["upper"]).all()
    assert table["inside"].mean() >= 0.5


def test_block_mean_agreement_and_density_envelope():
    rng = substream(7, 0)
    actual = np.linspace(1.0, 5.0, 12)
    simulated = actual[None, :] + 0.05 * rng.standard_normal((40, 12))
    simulated[3, 2] = np.nan
    agreement = block_mean_agreement(simulated, actual, [f"A{i}" for i in range(12)])
    assert agreement["fit_slope"].iloc[0] == pytest.approx(1.0, abs=0.05)
    density = density_envelope(simulated, actual)
    assert len(density) == 128
    assert (density["lower"] <= density["upper"]).all()
    assert density["actual"].notna().all()


def test_model_comparison_lists_every_fit():
    regions = _regions(10)
    design = _design(regions, 8)
    fit = _fit(design)
    table = model_comparison({"independent": fit}, {"independent": _predictions(design, fit)})
    assert list(table["model"]) == ["independent"]
    assert table["mean_mse_log"].iloc[0] == pytest.approx(0.05)
    assert table["rho"].iloc[0] == 0.0


def test_suite_fills_missing_mse_from_the_run():
    regions = _regions(8)
    design = _design(regions, 9)
    fit = _fit(design)
    inputs = DiagnosticInputs(
        regions=regions,
        design=design,
        direct=_direct(regions, design),
        predictions={"independent": _predictions(design, fit, mse=None)},
        fits={"independent": fit},
    )
    bundle = diagnostics_suite(fit, _zero_noise_run(design), inputs)
    assert {"qq_residuals", "mse_comparison", "group_aggregation", "model_comparison",
            "prediction_envelope", "bootstrap_density_envelope"} <= set(bundle.tables)
    assert "variogram_envelope" not in bundle.tables
    assert all(isinstance(t, pd.DataFrame) for t in bundle.tables.values())
    bare = diagnostics_suite(fit, None, inputs)
    assert "prediction_envelope" not in bare.tables
    assert "bootstrap_density_envelope" not in bare.tables


def test_svg_rendering_is_deterministic():
    pytest.importorskip("matplotlib")
    regions = _regions(8)
    design = _design(regions, 10)
    fit = _fit(design)
    inputs = DiagnosticInputs(
        regions=regions,
        design=design,
        direct=_direct(regions, design),
        predictions={"independent": _predictions(design, fit)},
    )
    bundle = diagnostics_suite(fit, _zero_noise_run(design), inputs)
    first = render_svg(bundle)
    second = render_svg(bundle)
    assert set(first) == {
        "qq_residuals.svg",
        "prediction_envelope.svg",
        "bootstrap_density_envelope.svg",
    }
    assert first == second
    assert b"<svg" in first["qq_residuals.svg"]
