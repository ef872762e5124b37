"""Subcommand orchestration: ingest, compute, persist."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from time import perf_counter
from typing import Any

import numpy as np
import pandas as pd

from ..bootstrap import (
    RHO,
    BootstrapInputs,
    mse_eblup,
    parameter_names,
    parameter_vector,
    run_algorithm1,
    run_algorithm2,
    summarize_se_ci,
)
from ..config import PipelineConfig, config_hash
from ..diagnostics import DiagnosticInputs, diagnostics_suite, render_svg
from ..direct import compute_direct_estimates
from ..errors import ConfigError, InputError
from ..geo import build_contiguity, default_density, filter_points_near, restrict_contiguity
from ..kriging import upscale_all
from ..models import (
    AreaPrediction,
    BootstrapRun,
    CommandStatus,
    CommandSummary,
    Design,
    DirectEstimate,
    ModelSpec,
    MseSource,
    PredictionStatus,
    RegionSet,
    SfhFit,
    VariogramModel,
)
from ..scenario import make_scenario
from ..sfh import back_transform, build_design, eblup_all, fit_design, fit_report, naive_mse
from ..simulate import CovariateRound
from ..storage import (
    BLOCK_MEANS,
    BOOTSTRAP_AREAS,
    BOOTSTRAP_MSE,
    BOOTSTRAP_REPLICATES,
    BOOTSTRAP_SUMMARY,
    COVERAGE_REPORT,
    CV_CURVE,
    DIAGNOSTICS_DIR,
    DIRECT_ESTIMATES,
    EMPIRICAL_VARIOGRAM,
    FAMILY_COMPARISON,
    FIT_REPORT,
    LR_REPLICATES,
    LR_TEST,
    PREDICTIONS,
    VARIOGRAM,
    VARIOGRAM_SIMULATION,
    ArtifactStorage,
    Provenance,
)
from ..utils import substream
from ..variogram import (
    compare_families,
    cv_neighborhood,
    empirical_variogram,
    fit_ols,
    fit_residual,
)
from . import ingest

logger = logging.getLogger(__name__)

# Stream keys above any replicate index, for the non-bootstrap random choices.
PIPELINE_STREAM = 2**32
CV_LANE = 0
FAMILY_LANE = 1
FAMILIES = ("matern", "exponential", "spherical")


def _elapsed_ms(start: float) -> int:
    return max(0, int((perf_counter() - start) * 1000))


@dataclass
class ModelInputs:
    """Validated inputs shared by fit, bootstrap, test and diagnose."""

    regions: RegionSet
    direct: list[DirectEstimate]
    design: Design
    W: np.ndarray
    spec: ModelSpec
    excluded: dict[str, str]


@dataclass
class UpscaleState:
    """The upscaling artifacts a covariate round is rebuilt from."""

    points: np.ndarray
    kriging_model: VariogramModel
    simulation_model: VariogramModel
    q: int
    density: float
    block_means: dict[str, float]


class PipelineService:
    def __init__(self, config: PipelineConfig) -> None:
        self.config = config
        self.provenance = Provenance.current(config_hash(config), config.master_seed)

    def _storage(self) -> ArtifactStorage:
        return ArtifactStorage(self.config.out_dir, self.provenance)

    def _finish(
        self,
        command: str,
        start: float,
        storage: ArtifactStorage,
        warnings: list[str] | None = None,
        unreliable: bool = False,
    ) -> CommandSummary:
        summary = CommandSummary(
            command=command,
            outputs=[str(path.relative_to(storage.out_dir)) for path in storage.written],
            elapsed_ms=_elapsed_ms(start),
            warnings=warnings or [],
            status=CommandStatus.unreliable if unreliable else CommandStatus.success,
        )
        logger.info(
            "%s finished in %d ms: %d artifacts, %d warnings, status=%s",
            command,
            summary.elapsed_ms,
            len(summary.outputs),
            len(summary.warnings),
            summary.status.value,
        )
        return summary

    # ---- loaders ---------------------------------------------------------
    def _regions(self) -> RegionSet:
        return ingest.read_regions(
            self.config.regions_path,
            group_property=self.config.group_property,
            crs_note=self.config.crs_note,
        )

    def _grid(self) -> np.ndarray:
        return ingest.read_grid(
            self.config.grid_path, positive=self.config.variogram_scale == "log"
        )

    def _model_spec(self) -> ModelSpec:
        covariates = list(self.config.covariates)
        if self.config.use_upscaled_covariate:
            covariates.append(self.config.upscaled_covariate)
        return ModelSpec(
            covariates=covariates,
            standardize=self.config.standardize,
            random_effect=self.config.primary_effect,
            intercept=self.config.intercept,
        )

    def _covariate_frame(self, regions: RegionSet) -> pd.DataFrame | None:
        config = self.config
        frames = []
        if config.covariates:
            frames.append(ingest.read_covariates(config.covariates_path, config.covariates))
        if config.use_upscaled_covariate:
            path = config.resolve_input("block_means_path", BLOCK_MEANS)
            frames.append(ingest.read_block_means(path, config.upscaled_covariate))
        if not frames:
            return None
        frame = pd.concat(frames, axis=1, join="outer")
        unknown = sorted(set(frame.index) - set(regions.ids))
        if unknown:
            raise InputError(f"covariates name regions outside the region set: {unknown[:5]}")
        return frame

    def load_model_inputs(self) -> ModelInputs:
        config = self.config
        regions = self._regions()
        direct = ingest.read_direct_estimates(
            config.resolve_input("direct_path", DIRECT_ESTIMATES)
        )
        unknown = [est.region_id for est in direct if est.region_id not in regions.index]
        if unknown:
            raise InputError(f"direct estimates name unknown regions: {unknown[:5]}")
        covariates = self._covariate_frame(regions)
        spec = self._model_spec()
        design = build_design(direct, covariates, spec, var_floor=config.var_log_floor)
        full = build_contiguity(regions, config.adjacency_predicate, config.snap_tolerance)
        keep = [regions.index[rid] for rid in design.region_ids]
        contiguity = restrict_contiguity(full, keep, config.adjacency_universe)
        excluded = {est.region_id: est.reason or "unusable" for est in direct if not est.usable}
        return ModelInputs(regions, direct, design, contiguity.w, spec, excluded)

    def _upscale_state(self, regions: RegionSet) -> UpscaleState:
        config = self.config
        grid = self._grid()
        kriging_model, document = ingest.read_variogram(config.out_dir / VARIOGRAM)
        simulation_model, _ = ingest.read_variogram(
            config.out_dir / VARIOGRAM_SIMULATION, "simulation variogram"
        )
        block_means = ingest.read_block_means(config.resolve_input("block_means_path", BLOCK_MEANS))
        mask = filter_points_near(grid[:, :2], regions, config.buffer_distance)
        return UpscaleState(
            points=grid[mask],
            kriging_model=kriging_model,
            simulation_model=simulation_model,
            q=int(document.get("neighborhood", config.kriging_neighborhood)),
            density=float(document.get("quadrature_density") or self._density(regions)),
            block_means=block_means["block_mean"].to_dict(),
        )

    def _density(self, regions: RegionSet) -> float:
        if self.config.quadrature_density is not None:
            return self.config.quadrature_density
        return default_density(regions, self.config.nodes_per_region)

    def _covariate_round(self, regions: RegionSet, state: UpscaleState) -> CovariateRound:
        config = self.config
        return CovariateRound(
            regions,
            state.points[:, :2],
            state.points[:, 2],
            state.simulation_model,
            state.kriging_model,
            n_points=config.simulate_points,
            q=state.q,
            density=state.density,
            scale=config.variogram_scale,
            buffer=config.buffer_distance if config.simulate_over == "buffered" else 0.0,
            anchor=config.block_anchor,
        )

    def bootstrap_inputs(self, model: ModelInputs) -> BootstrapInputs:
        config = self.config
        covariate_round = None
        covariate = None
        if config.use_upscaled_covariate and config.simulate_covariate:
            state = self._upscale_state(model.regions)
            covariate_round = self._covariate_round(model.regions, state)
            covariate = config.upscaled_covariate
        return BootstrapInputs(
            design=model.design,
            W=model.W,
            spec=model.spec,
            covariate_round=covariate_round,
            covariate=covariate,
            workers=config.workers,
            success_threshold=config.success_threshold,
        )

    def _fit_all(self, model: ModelInputs) -> dict[str, SfhFit]:
        fits = {}
        for effect in self.config.random_effects:
            spec = model.spec.model_copy(update={"random_effect": effect})
            fits[effect] = fit_design(model.design, model.W if effect == "sar" else None, spec)
        return fits

    def _predictions(
        self, fit: SfhFit, design: Design, mse: np.ndarray | None, source: MseSource
    ) -> list[AreaPrediction]:
        eblups = eblup_all(fit, design.y, design.X)
        if mse is None:
            return [
                AreaPrediction(region_id=rid, eblup_log=float(value))
                for rid, value in zip(design.region_ids, eblups)
            ]
        return [
            back_transform(rid, float(value), float(err), float(n), source)
            for rid, value, err, n in zip(
                design.region_ids, eblups, np.maximum(mse, 0.0), design.population
            )
        ]

    def _write_predictions(
        self, storage: ArtifactStorage, predictions: dict[str, list[AreaPrediction]]
    ) -> None:
        rows = [
            {"model": model, **pred.model_dump()}
            for model, preds in predictions.items()
            for pred in preds
        ]
        columns = ["model", *AreaPrediction.model_fields]
        storage.write_csv(PREDICTIONS, pd.DataFrame(rows, columns=columns))

    # ---- subcommands -----------------------------------------------------
    def run_direct(self) -> CommandSummary:
        start = perf_counter()
        config = self.config
        regions = self._regions()
        survey = ingest.read_survey(config.survey_path)
        census = ingest.read_census(config.census_path)

        estimates, coverage = compute_direct_estimates(regions, survey, census)
        storage = self._storage()
        storage.write_csv(
            DIRECT_ESTIMATES, pd.DataFrame([est.model_dump() for est in estimates])
        )
        storage.write_json(COVERAGE_REPORT, coverage.model_dump(mode="json"))
        warnings = [f"region {rid} unusable: {reason}" for rid, reason in coverage.unusable.items()]
        return self._finish("direct", start, storage, warnings)

    def run_upscale(self) -> CommandSummary:
        start = perf_counter()
        config = self.config
        regions = self._regions()
        grid = self._grid()

        mask = filter_points_near(grid[:, :2], regions, config.buffer_distance)
        points = grid[mask]
        logger.info(
            "%d of %d grid points lie within %.0f map units of the regions",
            points.shape[0],
            grid.shape[0],
            config.buffer_distance,
        )
        emp = empirical_variogram(
            points, config.variogram_estimator, config.variogram_max_lag, config.variogram_bins
        )
        model = fit_ols(emp, config.variogram_family, config.fix_smoothness, config.nu_grid)
        simulation_model, simulation_residual = model, fit_residual(emp, model)
        if config.variogram_scale == "log":
            log_points = np.column_stack([points[:, :2], np.log(points[:, 2])])
            log_emp = empirical_variogram(
                log_points,
                config.variogram_estimator,
                config.variogram_max_lag,
                config.variogram_bins,
            )
            simulation_model = fit_ols(
                log_emp, config.variogram_family, config.fix_smoothness, config.nu_grid
            )
            simulation_residual = fit_residual(log_emp, simulation_model)

        if config.neighborhood_selection == "pinned":
            q = config.kriging_neighborhood
            logger.info("neighborhood pinned at q=%d; cross-validation skipped", q)
            curve = pd.DataFrame(
                {"q": [q], "rmse": [math.nan], "selected": [True], "note": ["pinned"]}
            )
        else:
            cv = cv_neighborhood(
                points,
                model,
                config.cv_candidates,
                config.cv_folds,
                substream(config.master_seed, PIPELINE_STREAM, CV_LANE),
            )
            q = cv.selected
            logger.info("cross-validation selected q=%d", q)
            curve = pd.DataFrame(
                {
                    "q": cv.candidates + cv.skipped,
                    "rmse": cv.rmse + [math.nan] * len(cv.skipped),
                    "selected": [c == q for c in cv.candidates] + [False] * len(cv.skipped),
                    "note": [""] * len(cv.candidates) + cv.notes,
                }
            )

        comparison = None
        if config.compare_families:
            comparison = compare_families(
                points,
                FAMILIES,
                q,
                config.cv_folds,
                substream(config.master_seed, PIPELINE_STREAM, FAMILY_LANE),
                kind=config.variogram_estimator,
                max_lag=config.variogram_max_lag,
                n_bins=config.variogram_bins,
                nu_grid=config.nu_grid,
            )
            logger.info("family comparison favours %s", comparison.best)

        density = self._density(regions)
        predictions = upscale_all(
            regions,
            points,
            model,
            q,
            density,
            workers=config.workers,
            anchor=config.block_anchor,
        )

        storage = self._storage()
        storage.write_csv(
            EMPIRICAL_VARIOGRAM,
            pd.DataFrame(emp.bins, columns=["lag", "semivariance", "pairs"]),
        )
        common = {
            "estimator": config.variogram_estimator,
            "max_lag": emp.max_lag,
            "bin_width": emp.bin_width,
            "n_points": int(points.shape[0]),
        }
        storage.write_json(
            VARIOGRAM,
            {
                **common,
                "model": model.to_document(),
                "scale": "raw",
                "role": "kriging",
                "fit_residual": fit_residual(emp, model),
                "neighborhood": q,
                "neighborhood_selection": config.neighborhood_selection,
                "quadrature_density": density,
                "buffer": config.buffer_distance,
            },
        )
        storage.write_json(
            VARIOGRAM_SIMULATION,
            {
                **common,
                "model": simulation_model.to_document(),
                "scale": config.variogram_scale,
                "role": "simulation",
                "fit_residual": simulation_residual,
            },
        )
        storage.write_csv(CV_CURVE, curve)
        if comparison is not None:
            storage.write_csv(
                FAMILY_COMPARISON,
                pd.DataFrame(
                    [
                        {
                            "family": score.family,
                            "fit_residual": score.fit_residual,
                            "cv_rmse": score.cv_rmse,
                            "best": score.family == comparison.best,
                            "error": score.error.message if score.error else "",
                        }
                        for score in comparison.scores
                    ]
                ),
            )
        storage.write_csv(
            BLOCK_MEANS,
            pd.DataFrame(
                [
                    {
                        "region_id": pred.region_id,
                        "block_mean": pred.block_mean,
                        "kriging_variance": pred.kriging_variance,
                        "neighborhood": pred.neighborhood,
                        "n_nodes": pred.n_nodes,
                        "status": pred.status.value,
                        "variance_clamped": pred.variance_clamped,
                        "error": pred.error.message if pred.error else "",
                    }
                    for pred in predictions
                ]
            ),
        )
        warnings = [
            f"region {pred.region_id} not upscaled: {pred.error.message}"
            for pred in predictions
            if pred.status is PredictionStatus.missing and pred.error is not None
        ]
        return self._finish("upscale", start, storage, warnings)

    def run_fit(self) -> CommandSummary:
        start = perf_counter()
        model = self.load_model_inputs()

        fits = self._fit_all(model)
        predictions = {}
        for effect, fit in fits.items():
            if self.config.naive_mse:
                predictions[effect] = self._predictions(
                    fit, model.design, naive_mse(fit), "analytical-naive"
                )
            else:
                predictions[effect] = self._predictions(fit, model.design, None, "deferred")

        storage = self._storage()
        storage.write_json(
            FIT_REPORT,
            {
                "models": {effect: fit_report(fit) for effect, fit in fits.items()},
                "primary": self.config.primary_effect,
                "design": {
                    "columns": model.design.columns,
                    "n_areas": len(model.design.region_ids),
                    "excluded": model.excluded,
                },
            },
        )
        self._write_predictions(storage, predictions)
        warnings = [
            f"{effect} fit reached the parameter boundary"
            for effect, fit in fits.items()
            if fit.boundary
        ]
        return self._finish("fit", start, storage, warnings)

    def run_bootstrap(self) -> CommandSummary:
        start = perf_counter()
        config = self.config
        model = self.load_model_inputs()
        inputs = self.bootstrap_inputs(model)

        fits = self._fit_all(model)
        runs: dict[str, BootstrapRun] = {}
        for effect, fit in fits.items():
            runs[effect] = run_algorithm1(
                fit, inputs, config.bootstrap_replicates, config.master_seed
            )

        predictions: dict[str, list[AreaPrediction]] = {}
        summary: dict[str, Any] = {}
        mse_rows: list[dict[str, Any]] = []
        replicate_rows: list[dict[str, Any]] = []
        area_rows: list[dict[str, Any]] = []
        for effect, fit in fits.items():
            run = runs[effect]
            mse = mse_eblup(run)
            naive = naive_mse(fit)
            predictions[effect] = self._predictions(fit, model.design, mse, "bootstrap")
            estimates = dict(zip(parameter_names(fit), parameter_vector(fit).tolist()))
            summary[effect] = {
                "parameters": summarize_se_ci(run, config.level, estimates),
                "B": run.B,
                "n_success": run.n_success,
                "unreliable": run.unreliable,
                "failures": [failure.model_dump() for failure in run.failures],
            }
            mse_rows.extend(
                {"model": effect, "region_id": rid, "mse_log": m, "naive_mse_log": n}
                for rid, m, n in zip(run.region_ids, mse, naive)
            )
            for r, b in enumerate(run.replicate_ids.tolist()):
                replicate_rows.extend(
                    {"model": effect, "replicate": b, "parameter": name, "value": value}
                    for name, value in zip(run.parameter_names, run.estimates[r])
                )
                area_rows.extend(
                    {
                        "model": effect,
                        "replicate": b,
                        "region_id": rid,
                        "truth_log": truth,
                        "eblup_log": pred,
                    }
                    for rid, truth, pred in zip(run.region_ids, run.truths[r], run.predictions[r])
                )

        storage = self._storage()
        storage.write_json(
            BOOTSTRAP_SUMMARY,
            {
                "models": summary,
                "level": config.level,
                "simulated_covariate": inputs.simulates_covariate(),
            },
        )
        storage.write_csv(BOOTSTRAP_MSE, pd.DataFrame(mse_rows))
        storage.write_csv(BOOTSTRAP_REPLICATES, pd.DataFrame(replicate_rows))
        storage.write_csv(BOOTSTRAP_AREAS, pd.DataFrame(area_rows))
        self._write_predictions(storage, predictions)

        unreliable = any(run.unreliable for run in runs.values())
        warnings = [
            f"{effect}: {run.n_success} of {run.B} replicates succeeded"
            for effect, run in runs.items()
            if run.failures
        ]
        return self._finish("bootstrap", start, storage, warnings, unreliable)

    def run_test(self) -> CommandSummary:
        start = perf_counter()
        config = self.config
        model = self.load_model_inputs()
        parameter = config.test_parameter or RHO
        if parameter == RHO and "sar" not in config.random_effects:
            raise ConfigError("testing rho needs 'sar' among random_effects")
        inputs = self.bootstrap_inputs(model)

        result = run_algorithm2(
            inputs,
            parameter,
            config.bootstrap_replicates,
            config.master_seed,
            covariate_source=config.lr_covariate_source,
        )
        storage = self._storage()
        storage.write_json(LR_TEST, result.model_dump(exclude={"replicate_stats"}))
        storage.write_csv(
            LR_REPLICATES,
            pd.DataFrame(
                {"index": range(1, result.n_success + 1), "statistic": result.replicate_stats}
            ),
        )
        unreliable = result.n_success < config.success_threshold * result.B
        warnings = [f"{len(result.failures)} LR replicates failed"] if result.failures else []
        return self._finish("test", start, storage, warnings, unreliable)

    def run_simulate(self) -> CommandSummary:
        start = perf_counter()
        scenario = make_scenario(
            self.config.scenario_config(), self.config.master_seed, self.config.out_dir
        )
        summary = CommandSummary(
            command="simulate",
            outputs=sorted(path.name for path in scenario.paths.values()),
            elapsed_ms=_elapsed_ms(start),
        )
        logger.info(
            "simulate finished in %d ms: %d artifacts", summary.elapsed_ms, len(summary.outputs)
        )
        return summary

    def _stored_run(self, effect: str, design: Design) -> BootstrapRun | None:
        path = self.config.out_dir / BOOTSTRAP_AREAS
        if not path.is_file():
            return None
        frame = ingest.read_bootstrap_areas(path, effect)
        if frame.empty:
            return None
        truths = frame.pivot(index="replicate", columns="region_id", values="truth_log")
        preds = frame.pivot(index="replicate", columns="region_id", values="eblup_log")
        missing = [rid for rid in design.region_ids if rid not in truths.columns]
        if missing:
            raise InputError(
                f"bootstrap replicates lack modeled regions {missing[:5]}", path=path
            )
        ids = design.region_ids
        return BootstrapRun(
            B=int(truths.shape[0]),
            master_seed=self.config.master_seed,
            region_ids=list(ids),
            parameter_names=[],
            replicate_ids=truths.index.to_numpy(dtype=int),
            estimates=np.empty((truths.shape[0], 0)),
            truths=truths[ids].to_numpy(dtype=float),
            predictions=preds[ids].to_numpy(dtype=float),
            success_threshold=self.config.success_threshold,
        )

    def run_diagnose(self) -> CommandSummary:
        start = perf_counter()
        config = self.config
        model = self.load_model_inputs()
        state = None
        if config.use_upscaled_covariate and (config.out_dir / VARIOGRAM).is_file():
            state = self._upscale_state(model.regions)

        fits = self._fit_all(model)
        runs = {effect: self._stored_run(effect, model.design) for effect in fits}
        predictions = {}
        for effect, fit in fits.items():
            run = runs[effect]
            if run is not None:
                predictions[effect] = self._predictions(
                    fit, model.design, mse_eblup(run), "bootstrap"
                )
            else:
                predictions[effect] = self._predictions(
                    fit, model.design, naive_mse(fit), "analytical-naive"
                )
        primary = config.primary_effect
        inputs = DiagnosticInputs(
            regions=model.regions,
            design=model.design,
            direct=model.direct,
            predictions=predictions,
            fits=fits,
            covariate_round=self._covariate_round(model.regions, state) if state else None,
            grid_points=state.points if state else None,
            actual_block_means=state.block_means if state else None,
            trajectories=config.diag_trajectories,
            master_seed=config.master_seed,
            level=config.level,
            variogram_bins=config.variogram_bins,
            variogram_max_lag=config.variogram_max_lag,
        )
        bundle = diagnostics_suite(fits[primary], runs[primary], inputs)

        storage = self._storage()
        for name, table in bundle.tables.items():
            storage.write_csv(f"{name}.csv", table, directory=DIAGNOSTICS_DIR)
        if config.render_svg:
            for name, data in render_svg(bundle).items():
                storage.write_svg(name, data)
        warnings = []
        if runs[primary] is None:
            warnings.append("no bootstrap replicates found; envelopes and grouped CIs skipped")
        return self._finish("diagnose", start, storage, warnings)


__all__ = ["PipelineService", "ModelInputs", "UpscaleState"]
