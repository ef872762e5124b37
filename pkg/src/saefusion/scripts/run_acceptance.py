"""Nested Monte Carlo acceptance suites that are too slow for the pytest loop."""

from __future__ import annotations

import argparse
import logging
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from time import perf_counter
from typing import Any, Callable

import numpy as np
import pandas as pd

from ..bootstrap import (
    RHO,
    BootstrapInputs,
    mse_eblup,
    run_algorithm1,
    run_algorithm2,
    simulated_design,
    summarize_se_ci,
)
from ..config import load_config
from ..direct import direct_total, poststratify
from ..errors import SaeFusionError
from ..models import CensusCell, Design, SurveyRecord
from ..pipeline.service import ModelInputs, PipelineService
from ..sfh import eblup_all, fit_design, sar_covariance
from ..storage import DIAGNOSTICS_DIR, SCENARIO_CONFIG, dumps_json
from ..utils import substream

logger = logging.getLogger("saefusion.acceptance")

# Outer Monte Carlo streams sit above every replicate and pipeline key.
OUTER_STREAM = 2**33
LANE_DATA = 0
LANE_DRAW = 1

DIRECT_UNIT_MEAN = 100.0
DIRECT_UNIT_SD = 400.0
DIRECT_SAMPLING_FRACTION = 0.1
REML_LATTICE = 15


@dataclass
class RunnerConfig:
    suite: str
    seed: int
    outer: int
    replicates: int
    lattice: int
    redraws: int
    workers: int
    report: Path


def _elapsed_s(start: float) -> float:
    return round(perf_counter() - start, 3)


def _prepared_service(cfg: RunnerConfig, workdir: Path, **overrides: Any) -> PipelineService:
    """Synthetic scenario plus direct estimates and block means, ready for model work."""
    scenario = load_config(
        None,
        out_dir=workdir,
        master_seed=cfg.seed,
        scenario_rows=cfg.lattice,
        scenario_cols=cfg.lattice,
    )
    PipelineService(scenario).run_simulate()
    config = load_config(
        workdir / SCENARIO_CONFIG,
        out_dir=workdir,
        master_seed=cfg.seed,
        workers=cfg.workers,
        bootstrap_replicates=cfg.replicates,
        **overrides,
    )
    service = PipelineService(config)
    service.run_direct()
    service.run_upscale()
    return service


def _outer_data(
    inputs: BootstrapInputs,
    beta: np.ndarray,
    sigma2_v: float,
    rho: float,
    columns: list[int],
    rng_key: int,
    seed: int,
) -> tuple[Design, np.ndarray]:
    """One outer dataset drawn from the model; returns its design and true log means."""
    design = inputs.design
    X = (
        simulated_design(inputs, substream(seed, OUTER_STREAM, LANE_DRAW, rng_key))
        if inputs.simulates_covariate()
        else design.X
    )
    rng = substream(seed, OUTER_STREAM, LANE_DATA, rng_key)
    m = len(design.region_ids)
    if rho != 0.0 and inputs.W is not None:
        u = rng.multivariate_normal(np.zeros(m), sar_covariance(sigma2_v, rho, inputs.W))
    else:
        u = rng.normal(0.0, np.sqrt(sigma2_v), m)
    truth = X[:, columns] @ beta + u
    y = truth + rng.normal(0.0, np.sqrt(design.v_eps))
    return design.model_copy(update={"y": y, "X": X}), truth


# ---- suites --------------------------------------------------------------


def suite_direct(cfg: RunnerConfig) -> dict[str, Any]:
    """Design unbiasedness of the post-stratified total and its variance estimator."""
    rng = substream(cfg.seed, OUTER_STREAM, LANE_DATA)
    units = {
        (s, t): rng.normal(DIRECT_UNIT_MEAN, DIRECT_UNIT_SD, int(rng.integers(170, 250)))
        for s in (1, 2)
        for t in (1, 2, 3)
    }
    census = [
        CensusCell(region_id="R", size_class=s, type_class=t, population=values.size)
        for (s, t), values in units.items()
    ]
    true_total = float(sum(values.sum() for values in units.values()))
    totals = np.empty(cfg.redraws)
    variances = np.empty(cfg.redraws)
    for draw in range(cfg.redraws):
        draw_rng = substream(cfg.seed, OUTER_STREAM, LANE_DRAW, draw)
        survey = []
        for (s, t), values in units.items():
            n = max(2, round(DIRECT_SAMPLING_FRACTION * values.size))
            chosen = draw_rng.choice(values.size, size=n, replace=False)
            survey.extend(
                SurveyRecord(region_id="R", size_class=s, type_class=t, y=float(values[k]))
                for k in chosen
            )
        est = direct_total(survey, poststratify(survey, census), "R")
        totals[draw], variances[draw] = est.tau_tilde, est.var_tau
    relative_bias = float((totals.mean() - true_total) / true_total)
    variance_ratio = float(variances.mean() / totals.var(ddof=1))
    return {
        "population_units": int(sum(values.size for values in units.values())),
        "redraws": cfg.redraws,
        "relative_bias": relative_bias,
        "variance_ratio": variance_ratio,
        "passed": abs(relative_bias) < 0.01 and abs(variance_ratio - 1.0) <= 0.10,
    }


def suite_reml(cfg: RunnerConfig) -> dict[str, Any]:
    """Mean REML estimates over outer datasets drawn from the scenario truth."""
    cfg = replace(cfg, lattice=REML_LATTICE)
    with tempfile.TemporaryDirectory() as tmp:
        service = _prepared_service(cfg, Path(tmp), simulate_covariate=False)
        model = service.load_model_inputs()
        inputs = service.bootstrap_inputs(model)
    truth = service.config.scenario_config()
    beta = np.asarray(truth.beta, dtype=float)
    estimates = []
    for r in range(cfg.outer):
        design, _ = _outer_data(
            inputs, beta, truth.sigma2_v, truth.rho, list(range(beta.size)), r, cfg.seed
        )
        try:
            refit = fit_design(design, model.W, model.spec)
        except SaeFusionError as exc:
            logger.warning("outer replicate %d failed: %s", r, exc.message)
            continue
        estimates.append(np.concatenate([refit.beta, [refit.sigma2_v, refit.rho]]))
    means = np.mean(estimates, axis=0)
    target = np.concatenate([beta, [truth.sigma2_v, truth.rho]])
    relative = np.abs(means[:-1] - target[:-1]) / np.abs(target[:-1])

    independent = model.spec.model_copy(update={"random_effect": "independent"})
    fh = fit_design(model.design, None, independent)
    gamma = fh.sigma2_v / (fh.sigma2_v + model.design.v_eps)
    synthetic = model.design.X @ fh.beta
    oracle = gamma * model.design.y + (1.0 - gamma) * synthetic
    oracle_gap = float(np.max(np.abs(eblup_all(fh, model.design.y, model.design.X) - oracle)))
    return {
        "outer": cfg.outer,
        "successful": len(estimates),
        "target": target.tolist(),
        "mean_estimates": means.tolist(),
        "max_relative_error_beta_sigma2": float(relative.max()),
        "rho_error": float(abs(means[-1] - truth.rho)),
        "fh_oracle_max_gap": oracle_gap,
        "passed": bool(relative.max() < 0.10 and abs(means[-1] - truth.rho) <= 0.1)
        and oracle_gap < 1e-8,
    }


def _calibration_setup(cfg: RunnerConfig) -> tuple[PipelineService, ModelInputs, BootstrapInputs]:
    with tempfile.TemporaryDirectory() as tmp:
        service = _prepared_service(cfg, Path(tmp))
        model = service.load_model_inputs()
        return service, model, service.bootstrap_inputs(model)


def suite_calibration(cfg: RunnerConfig) -> dict[str, Any]:
    """Percentile-CI coverage of the covariate slope and bootstrap MSE against empirical MSE."""
    service, model, inputs = _calibration_setup(cfg)
    fit = fit_design(model.design, model.W, model.spec)
    covariate = service.config.upscaled_covariate
    slope = fit.beta_names.index(covariate)
    all_columns = list(range(fit.beta.size))
    covered = 0
    successful = 0
    bootstrap_mse = np.zeros(len(model.design.region_ids))
    squared_error = np.zeros(len(model.design.region_ids))
    for r in range(cfg.outer):
        design, truth = _outer_data(
            inputs, fit.beta, fit.sigma2_v, fit.rho, all_columns, r, cfg.seed
        )
        try:
            refit = fit_design(design, model.W, model.spec)
            run = run_algorithm1(
                refit, replace(inputs, design=design), cfg.replicates, cfg.seed + r
            )
        except SaeFusionError as exc:
            logger.warning("outer replicate %d failed: %s", r, exc.message)
            continue
        summary = {s.name: s for s in summarize_se_ci(run, service.config.level)}[covariate]
        covered += int(summary.lower <= fit.beta[slope] <= summary.upper)
        bootstrap_mse += mse_eblup(run)
        squared_error += (eblup_all(refit, design.y, design.X) - truth) ** 2
        successful += 1
        logger.info("outer replicate %d/%d done", r + 1, cfg.outer)
    coverage = covered / successful if successful else float("nan")
    ratio = float(bootstrap_mse.mean() / squared_error.mean()) if successful else float("nan")
    return {
        "outer": cfg.outer,
        "replicates": cfg.replicates,
        "successful": successful,
        "slope_ci_coverage": coverage,
        "mse_ratio_bootstrap_to_empirical": ratio,
        "passed": abs(coverage - 0.95) <= 0.03 and abs(ratio - 1.0) <= 0.25,
    }


def suite_lr_test(cfg: RunnerConfig) -> dict[str, Any]:
    """Size of the rho test under the null and power of the slope test at five SEs."""
    service, model, inputs = _calibration_setup(cfg)
    independent = model.spec.model_copy(update={"random_effect": "independent"})
    null_fit = fit_design(model.design, None, independent)
    all_columns = list(range(null_fit.beta.size))
    covariate = service.config.upscaled_covariate
    slope = null_fit.beta_names.index(covariate)
    alternative = null_fit.beta.copy()
    alternative[slope] = 5.0 * np.sqrt(null_fit.beta_cov[slope, slope])
    minimum_p = 1.0 / (cfg.replicates + 1)

    rejections = 0
    at_minimum = 0
    size_runs = 0
    power_runs = 0
    for r in range(cfg.outer):
        design, _ = _outer_data(
            inputs, null_fit.beta, null_fit.sigma2_v, 0.0, all_columns, r, cfg.seed
        )
        try:
            result = run_algorithm2(
                replace(inputs, design=design), RHO, cfg.replicates, cfg.seed + r
            )
            rejections += int(result.p_value <= 0.05)
            size_runs += 1
        except SaeFusionError as exc:
            logger.warning("size replicate %d failed: %s", r, exc.message)
        design, _ = _outer_data(
            inputs, alternative, null_fit.sigma2_v, 0.0, all_columns, cfg.outer + r, cfg.seed
        )
        try:
            result = run_algorithm2(
                replace(inputs, design=design, spec=independent),
                covariate,
                cfg.replicates,
                cfg.seed + r,
                covariate_source="observed",
            )
            at_minimum += int(np.isclose(result.p_value, minimum_p))
            power_runs += 1
        except SaeFusionError as exc:
            logger.warning("power replicate %d failed: %s", r, exc.message)
    size = rejections / size_runs if size_runs else float("nan")
    power = at_minimum / power_runs if power_runs else float("nan")
    return {
        "outer": cfg.outer,
        "replicates": cfg.replicates,
        "null_rejection_rate": size,
        "alternative_minimum_p_rate": power,
        "passed": 0.02 <= size <= 0.10 and power >= 0.95,
    }


def suite_cv_reduction(cfg: RunnerConfig) -> dict[str, Any]:
    """Area-averaged CV of model totals against the direct CV on the synthetic scenario."""
    with tempfile.TemporaryDirectory() as tmp:
        service = _prepared_service(cfg, Path(tmp))
        service.run_fit()
        service.run_bootstrap()
        service.run_diagnose()
        table = pd.read_csv(
            Path(tmp) / DIAGNOSTICS_DIR / "mse_comparison.csv",
            comment="#",
            dtype={"region_id": str},
        )
    summary = table[table["region_id"] == "ALL"].set_index("model")
    reductions = summary["cv_reduction_pct"].to_dict()
    primary = service.config.primary_effect
    return {
        "cv_reduction_pct": reductions,
        "passed": bool(reductions.get(primary, float("nan")) >= 10.0),
    }


def suite_determinism(cfg: RunnerConfig) -> dict[str, Any]:
    """Byte-identical data files across worker counts 1, 4 and 8."""
    digests: dict[int, dict[str, bytes]] = {}
    with tempfile.TemporaryDirectory() as tmp:
        for workers in (1, 4, 8):
            workdir = Path(tmp) / f"workers-{workers}"
            service = _prepared_service(replace(cfg, workers=workers), workdir)
            service.run_fit()
            service.run_bootstrap()
            digests[workers] = {
                str(path.relative_to(workdir)): path.read_bytes()
                for path in sorted(workdir.rglob("*"))
                if path.is_file()
            }
    reference = digests[1]
    differing = sorted(
        {
            name
            for files in digests.values()
            for name in set(files) | set(reference)
            if files.get(name) != reference.get(name)
        }
    )
    return {"files": len(reference), "differing": differing, "passed": not differing}


SUITES: dict[str, Callable[[RunnerConfig], dict[str, Any]]] = {
    "direct": suite_direct,
    "reml": suite_reml,
    "calibration": suite_calibration,
    "lr-test": suite_lr_test,
    "cv-reduction": suite_cv_reduction,
    "determinism": suite_determinism,
}


def run(cfg: RunnerConfig) -> dict[str, Any]:
    names = list(SUITES) if cfg.suite == "all" else [cfg.suite]
    results = {}
    for name in names:
        start = perf_counter()
        logger.info("running suite %s", name)
        result = SUITES[name](cfg)
        result["elapsed_s"] = _elapsed_s(start)
        results[name] = result
        verdict = "passed" if result["passed"] else "FAILED"
        logger.info("suite %s %s in %.1f s", name, verdict, result["elapsed_s"])
    return results


def parse_args(argv: list[str] | None = None) -> RunnerConfig:
    parser = argparse.ArgumentParser(description="Run the long Monte Carlo acceptance suites.")
    parser.add_argument("--suite", choices=["all", *SUITES], default="all")
    parser.add_argument("--seed", type=int, default=20240607)
    parser.add_argument("--outer", type=int, default=200, help="outer Monte Carlo replicates")
    parser.add_argument(
        "--replicates", type=int, default=500, help="inner bootstrap replicates (B)"
    )
    parser.add_argument("--lattice", type=int, default=8, help="scenario lattice side")
    parser.add_argument(
        "--redraws", type=int, default=10_000, help="sample redraws for the direct suite"
    )
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--report", type=Path, default=Path("acceptance_report.json"))
    args = parser.parse_args(argv)
    return RunnerConfig(
        suite=args.suite,
        seed=args.seed,
        outer=args.outer,
        replicates=args.replicates,
        lattice=args.lattice,
        redraws=args.redraws,
        workers=args.workers,
        report=args.report,
    )


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s:%(name)s:%(message)s")
    cfg = parse_args(argv)
    try:
        results = run(cfg)
    except Exception as exc:  # pragma: no cover - CLI diagnostics
        logger.error("acceptance suite %s failed: %s", cfg.suite, exc, exc_info=True)
        return 1
    cfg.report.write_bytes(dumps_json({"suites": results, "seed": cfg.seed}))
    logger.info("report written to %s", cfg.report)
    return 0 if all(result["passed"] for result in results.values()) else 1


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
