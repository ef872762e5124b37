from __future__ import annotations

from pathlib import Path

import pytest
from pydantic import ValidationError

from saefusion.config import ScenarioConfig, config_hash, load_config
from saefusion.errors import ConfigError


def _write(path: Path, *lines: str) -> Path:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_defaults_without_a_file():
    config = load_config(None, workers=None)
    assert config.kriging_neighborhood == 15
    assert config.neighborhood_selection == "pinned"
    assert config.random_effects == ["independent", "sar"]
    assert config.primary_effect == "sar"
    assert config.workers == 1
    assert config.buffer_distance == pytest.approx(10_000.0)


def test_key_value_file_with_overrides(tmp_path: Path):
    path = _write(
        tmp_path / "run.env",
        "# comment lines are skipped",
        "master_seed=7",
        "log_level=debug",
        "random_effects='[\"sar\", \"sar\"]'",
        "cv_candidates=[5, 10]",
        "variogram_family=exponential",
    )
    config = load_config(path, workers=4)
    assert config.master_seed == 7
    assert config.log_level == "DEBUG"
    assert config.random_effects == ["sar"]
    assert config.cv_candidates == [5, 10]
    assert config.variogram_family == "exponential"
    assert config.workers == 4


def test_relative_inputs_resolve_against_the_config_directory(tmp_path: Path):
    nested = tmp_path / "inputs"
    nested.mkdir()
    path = _write(nested / "run.env", "regions_path=regions.geojson", "survey_path=/abs/survey.csv")
    config = load_config(path)
    assert config.regions_path == nested.resolve() / "regions.geojson"
    assert config.survey_path == Path("/abs/survey.csv")
    assert config.resolve_input("direct_path", "direct_estimates.csv") == (
        config.out_dir / "direct_estimates.csv"
    )


def test_invalid_settings_raise_config_errors(tmp_path: Path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.env")
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path / "bad.env", "kriging_neighborhood=0"))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path / "nu.env", "nu_grid=[0.5, -1]"))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path / "cv.env", "cv_candidates=[5, 500]"))


def test_hash_ignores_runtime_only_keys(tmp_path: Path):
    base = load_config(None)
    assert config_hash(base) == config_hash(load_config(None, workers=8, out_dir=tmp_path))
    assert config_hash(base) != config_hash(load_config(None, master_seed=1))


def test_scenario_config_carries_the_buffer():
    config = load_config(None, buffer_km=2.0, scenario_rows=3)
    scenario = config.scenario_config()
    assert scenario.rows == 3
    assert scenario.buffer == pytest.approx(2_000.0)
    assert scenario.beta == [3.45, 0.61]


def test_scenario_field_and_unit_keys_reach_the_scenario(tmp_path: Path):
    path = _write(
        tmp_path / "run.env",
        "scenario_field_nugget=0.1",
        "scenario_field_partial_sill=0.8",
        "scenario_field_range=5000",
        "scenario_field_smoothness=0.5",
        "scenario_field_log_mean=2.0",
        "scenario_grid_per_cell=2",
        "scenario_unit_log_sd=0.5",
        "scenario_group_block=3",
    )
    scenario = load_config(path).scenario_config()
    assert scenario.field_nugget == pytest.approx(0.1)
    assert scenario.field_partial_sill == pytest.approx(0.8)
    assert scenario.field_range == pytest.approx(5_000.0)
    assert scenario.field_smoothness == pytest.approx(0.5)
    assert scenario.field_log_mean == pytest.approx(2.0)
    assert scenario.grid_per_cell == 2
    assert scenario.unit_log_sd == pytest.approx(0.5)
    assert scenario.group_block == 3


def test_scenario_keys_default_to_the_scenario_defaults():
    assert load_config(None).scenario_config() == ScenarioConfig(buffer=10_000.0)


def test_invalid_scenario_keys_raise_config_errors(tmp_path: Path):
    path = _write(tmp_path / "run.env", "scenario_grid_per_cell=0")
    with pytest.raises(ConfigError):
        load_config(path)


def test_inconsistent_scenarios_are_rejected():
    with pytest.raises(ValidationError):
        ScenarioConfig(rho=1.2)
    with pytest.raises(ValidationError):
        ScenarioConfig(beta=[1.0])
