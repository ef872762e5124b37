from __future__ import annotations

from pathlib import Path

import orjson
import pandas as pd
import pytest

from saefusion.config import load_config
from saefusion.models import CommandStatus
from saefusion.pipeline.service import PipelineService
from saefusion.storage import SCENARIO_CONFIG

pytestmark = pytest.mark.integration


def _read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", dtype={"region_id": str})


def _service(workdir: Path, **overrides) -> PipelineService:
    scenario = load_config(
        None, out_dir=workdir, master_seed=11, scenario_rows=5, scenario_cols=5
    )
    summary = PipelineService(scenario).run_simulate()
    assert SCENARIO_CONFIG in summary.outputs
    config = load_config(
        workdir / SCENARIO_CONFIG,
        out_dir=workdir,
        bootstrap_replicates=6,
        simulate_points=150,
        diag_trajectories=3,
        nodes_per_region=16,
        **overrides,
    )
    return PipelineService(config)


def test_full_pipeline_over_a_synthetic_scenario(tmp_path: Path):
    service = _service(tmp_path)

    direct = service.run_direct()
    assert "direct_estimates.csv" in direct.outputs
    estimates = _read_csv(tmp_path / "direct_estimates.csv")
    assert len(estimates) == 25

    upscale = service.run_upscale()
    assert {"variogram.json", "block_means.csv"} <= set(upscale.outputs)
    blocks = _read_csv(tmp_path / "block_means.csv")
    assert (blocks["status"] == "ok").sum() == 25

    fit = service.run_fit()
    report = orjson.loads((tmp_path / "fit_report.json").read_bytes())
    assert set(report["models"]) == {"independent", "sar"}
    assert report["primary"] == "sar"
    deferred = _read_csv(tmp_path / "predictions.csv")
    assert set(deferred["mse_source"]) == {"deferred"}
    assert fit.status is CommandStatus.success

    boot = service.run_bootstrap()
    assert boot.status in (CommandStatus.success, CommandStatus.unreliable)
    summary = orjson.loads((tmp_path / "bootstrap_summary.json").read_bytes())
    assert summary["models"]["sar"]["B"] == 6
    names = [row["name"] for row in summary["models"]["sar"]["parameters"]]
    assert "rho" in names
    predictions = _read_csv(tmp_path / "predictions.csv")
    assert set(predictions["mse_source"]) == {"bootstrap"}
    assert (predictions["tau_hat"] > 0).all()
    assert (predictions["mse_log"] >= 0).all()

    service.run_test()
    lr = orjson.loads((tmp_path / "lr_test.json").read_bytes())
    assert lr["parameter"] == "rho"
    assert 1 / 7 <= lr["p_value"] <= 1.0
    assert len(_read_csv(tmp_path / "lr_replicates.csv")) == lr["n_success"]

    diagnose = service.run_diagnose()
    assert diagnose.warnings == []
    diagnostics = tmp_path / "diagnostics"
    for name in (
        "qq_residuals",
        "mse_comparison",
        "group_aggregation",
        "model_comparison",
        "prediction_envelope",
        "bootstrap_density_envelope",
        "variogram_envelope",
        "point_counts",
        "block_mean_agreement",
    ):
        assert (diagnostics / f"{name}.csv").is_file(), name
    groups = _read_csv(diagnostics / "group_aggregation.csv")
    assert groups["n_areas"].sum() == len(predictions[predictions["model"] == "sar"])


def test_diagnose_without_bootstrap_falls_back_to_naive_mse(tmp_path: Path):
    service = _service(tmp_path, use_upscaled_covariate=False, random_effects=["independent"])
    service.run_direct()
    summary = service.run_diagnose()
    assert any("no bootstrap replicates" in warning for warning in summary.warnings)
    table = _read_csv(tmp_path / "diagnostics" / "mse_comparison.csv")
    assert set(table["mse_source"]) == {"analytical-naive"}
    assert not (tmp_path / "diagnostics" / "prediction_envelope.csv").exists()
