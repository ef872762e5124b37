"""Plot-ready diagnostic tables for fitted models and bootstrap runs."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.stats import beta as beta_dist
from scipy.stats import gaussian_kde, norm

from .bootstrap import mse_eblup
from .geo import count_points_per_region
from .models import (
    AreaPrediction,
    BootstrapRun,
    Design,
    DiagnosticBundle,
    DirectEstimate,
    FieldRealization,
    PredictionStatus,
    RegionSet,
    SfhFit,
)
from .pipeline.defaults import DEFAULT_DIAG_TRAJECTORIES, DEFAULT_LEVEL, DEFAULT_VARIOGRAM_BINS
from .sfh import eblup_all, naive_mse
from .simulate import CovariateRound
from .utils import LANE_COVARIATE, percentile_interval, substream
from .variogram import empirical_variogram

logger = logging.getLogger(__name__)

# Pointwise Q-Q band and prediction envelopes.
BAND_LEVEL = 0.95
DENSITY_GRID_POINTS = 128
UNGROUPED = "ungrouped"
SUMMARY_ROW = "ALL"
# Replicate index 0 is never used by the bootstrap, so diagnostics draw from it.
DIAGNOSTIC_REPLICATE = 0


@dataclass
class DiagnosticInputs:
    regions: RegionSet
    design: Design
    direct: list[DirectEstimate]
    predictions: dict[str, list[AreaPrediction]]
    fits: dict[str, SfhFit] = field(default_factory=dict)
    covariate_round: CovariateRound | None = None
    grid_points: np.ndarray | None = None
    actual_block_means: dict[str, float] | None = None
    trajectories: int = DEFAULT_DIAG_TRAJECTORIES
    master_seed: int = 0
    level: float = DEFAULT_LEVEL
    variogram_bins: int = DEFAULT_VARIOGRAM_BINS
    variogram_max_lag: float | None = None


# ---- (a) Q-Q coordinates ------------------------------------------------


def _qq_series(name: str, region_ids: Sequence[str], values: np.ndarray) -> pd.DataFrame:
    n = values.size
    sd = float(np.std(values, ddof=1)) if n > 1 else 0.0
    standardized = (values - values.mean()) / sd if sd > 0 else np.zeros(n)
    order = np.argsort(standardized, kind="stable")
    ranks = np.arange(1, n + 1)
    alpha = (1.0 - BAND_LEVEL) / 2.0
    lower = norm.ppf(beta_dist.ppf(alpha, ranks, n - ranks + 1))
    upper = norm.ppf(beta_dist.ppf(1.0 - alpha, ranks, n - ranks + 1))
    sorted_values = standardized[order]
    return pd.DataFrame(
        {
            "series": name,
            "rank": ranks,
            "region_id": [region_ids[i] for i in order],
            "value": values[order],
            "standardized": sorted_values,
            "theoretical": norm.ppf((ranks - 0.375) / (n + 0.25)),
            "band_lower": lower,
            "band_upper": upper,
            "inside": (sorted_values >= lower) & (sorted_values <= upper),
        }
    )


def qq_residuals(fit: SfhFit, design: Design) -> pd.DataFrame:
    """Blom Q-Q coordinates for sampling residuals, random effects and SAR innovations."""
    y, X = design.y, design.X
    prediction = eblup_all(fit, y, X)
    u_hat = prediction - X @ fit.beta
    sampling = (y - prediction) / np.sqrt(design.v_eps)
    frames = [
        _qq_series("sampling_error", design.region_ids, sampling),
        _qq_series("random_effect", design.region_ids, u_hat),
    ]
    if fit.random_effect == "sar":
        innovations = (np.eye(len(u_hat)) - fit.rho * fit.W) @ u_hat
        frames.append(_qq_series("innovation", design.region_ids, innovations))
    return pd.concat(frames, ignore_index=True)


# ---- (b) bootstrap prediction envelope ----------------------------------


def _totals(log_values: np.ndarray, population: np.ndarray, mse_log: np.ndarray) -> np.ndarray:
    return population * np.exp(log_values + mse_log / 2.0)


def recentred_predictions(run: BootstrapRun, eblup_log: np.ndarray) -> np.ndarray:
    """Replicates x areas: actual EBLUP minus each replicate's prediction error."""
    return eblup_log[None, :] - (run.predictions - run.truths)


def prediction_envelope(
    run: BootstrapRun,
    predictions: list[AreaPrediction],
    population: np.ndarray,
    level: float = BAND_LEVEL,
) -> pd.DataFrame:
    """Recentred replicate mean and percentile envelope per area, log scale and totals."""
    by_id = {pred.region_id: pred for pred in predictions}
    actual = np.array([by_id[rid].eblup_log for rid in run.region_ids])
    mse = np.array([by_id[rid].mse_log or 0.0 for rid in run.region_ids])
    replicates = recentred_predictions(run, actual)
    lower, upper = percentile_interval(replicates, level, axis=0)
    totals = _totals(replicates, population, mse)
    total_lower, total_upper = percentile_interval(totals, level, axis=0)
    return pd.DataFrame(
        {
            "region_id": run.region_ids,
            "actual_eblup_log": actual,
            "mean_log": replicates.mean(axis=0),
            "lower_log": lower,
            "upper_log": upper,
            "actual_total": _totals(actual, population, mse),
            "mean_total": totals.mean(axis=0),
            "lower_total": total_lower,
            "upper_total": total_upper,
        }
    )


def bootstrap_density_envelope(
    run: BootstrapRun,
    predictions: list[AreaPrediction],
    population: np.ndarray,
    level: float = BAND_LEVEL,
) -> pd.DataFrame:
    """Per-replicate kernel densities of log totals against the density of the actual log totals."""
    by_id = {pred.region_id: pred for pred in predictions}
    actual = np.array([by_id[rid].eblup_log for rid in run.region_ids])
    mse = np.array([by_id[rid].mse_log or 0.0 for rid in run.region_ids])
    population = np.asarray(population, dtype=float)
    populated = population > 0
    replicates = _totals(recentred_predictions(run, actual), population, mse)[:, populated]
    actual_totals = _totals(actual, population, mse)[populated]
    return density_envelope(np.log(replicates), np.log(actual_totals), level)


# ---- (c) variogram envelope ---------------------------------------------


def _bin_index(lags: np.ndarray, width: float) -> np.ndarray:
    return np.ceil(lags / width).astype(int) - 1


def variogram_envelope(
    trajectories: Sequence[FieldRealization],
    data_points: np.ndarray,
    *,
    n_bins: int = DEFAULT_VARIOGRAM_BINS,
    max_lag: float | None = None,
    level: float = BAND_LEVEL,
) -> pd.DataFrame:
    """
    Robust empirical variograms of simulated trajectories against the data variogram.

    Values are compared on the simulation scale: log-Gaussian trajectories
    and the data are logged first.
    """
    log_scale = bool(trajectories) and trajectories[0].scale == "log-gaussian"
    data = np.asarray(data_points, dtype=float).copy()
    if log_scale:
        data[:, 2] = np.log(data[:, 2])
    data_emp = empirical_variogram(data, "robust", max_lag, n_bins)
    width = data_emp.bin_width
    simulated = np.full((len(trajectories), n_bins), np.nan)
    for t, realization in enumerate(trajectories):
        values = np.log(realization.values) if log_scale else realization.values
        pts = np.column_stack([realization.locations, values])
        emp = empirical_variogram(pts, "robust", data_emp.max_lag, n_bins)
        simulated[t, _bin_index(emp.lags, width)] = emp.semivariances

    rows = []
    data_bins = _bin_index(data_emp.lags, width)
    for k, lag, gamma in zip(data_bins, data_emp.lags, data_emp.semivariances):
        column = simulated[:, k]
        column = column[np.isfinite(column)]
        if column.size == 0:
            continue
        lower, upper = percentile_interval(column, level)
        rows.append(
            {
                "bin": int(k),
                "lag": float(lag),
                "data": float(gamma),
                "mean": float(column.mean()),
                "lower": float(lower),
                "upper": float(upper),
                "inside": bool(lower <= gamma <= upper),
            }
        )
    return pd.DataFrame(rows, columns=["bin", "lag", "data", "mean", "lower", "upper", "inside"])


# ---- (d) point counts ----------------------------------------------------


def point_counts(
    trajectories: Sequence[FieldRealization], grid_xy: np.ndarray, regions: RegionSet
) -> pd.DataFrame:
    simulated = np.array(
        [count_points_per_region(t.locations, regions) for t in trajectories], dtype=float
    )
    return pd.DataFrame(
        {
            "region_id": regions.ids,
            "simulated_mean": simulated.mean(axis=0) if len(trajectories) else np.nan,
            "actual": count_points_per_region(grid_xy, regions),
        }
    )


# ---- (e) MSE comparison --------------------------------------------------


def mse_comparison(
    direct: list[DirectEstimate],
    predictions: dict[str, list[AreaPrediction]],
    run: BootstrapRun | None = None,
    run_model: str | None = None,
    level: float = BAND_LEVEL,
) -> pd.DataFrame:
    """
    Direct CV against model CV per area and model, plus an area-average row.

    With a bootstrap run, rows of `run_model` also carry percentile bounds of
    the replicate squared prediction errors.
    """
    direct_by_id = {est.region_id: est for est in direct}
    mse_bounds: dict[str, tuple[float, float]] = {}
    if run is not None and run_model is not None:
        lower, upper = percentile_interval((run.predictions - run.truths) ** 2, level, axis=0)
        mse_bounds = {
            rid: (float(lo), float(hi)) for rid, lo, hi in zip(run.region_ids, lower, upper)
        }
    rows = []
    for model, preds in predictions.items():
        for pred in preds:
            est = direct_by_id.get(pred.region_id)
            cv_direct = (
                math.sqrt(est.var_tau) / est.tau_tilde
                if est is not None and est.usable and est.tau_tilde
                else math.nan
            )
            mse = pred.mse_log if pred.mse_log is not None else math.nan
            cv_model = math.sqrt(math.expm1(mse)) if mse == mse else math.nan
            bounds = mse_bounds.get(pred.region_id) if model == run_model else None
            rows.append(
                {
                    "region_id": pred.region_id,
                    "model": model,
                    "mse_source": pred.mse_source,
                    "var_log_direct": est.var_log if est is not None else math.nan,
                    "mse_log": mse,
                    "mse_lower": bounds[0] if bounds else math.nan,
                    "mse_upper": bounds[1] if bounds else math.nan,
                    "cv_direct": cv_direct,
                    "cv_model": cv_model,
                }
            )
    frame = pd.DataFrame(
        rows,
        columns=[
            "region_id",
            "model",
            "mse_source",
            "var_log_direct",
            "mse_log",
            "mse_lower",
            "mse_upper",
            "cv_direct",
            "cv_model",
        ],
    )
    frame["cv_reduction_pct"] = 100.0 * (1.0 - frame["cv_model"] / frame["cv_direct"])
    averaged = ["var_log_direct", "mse_log", "mse_lower", "mse_upper", "cv_direct", "cv_model"]
    summary = frame.groupby("model", sort=False)[averaged].mean().reset_index()
    summary["region_id"] = SUMMARY_ROW
    summary["mse_source"] = [
        frame.loc[frame["model"] == model, "mse_source"].iloc[0] for model in summary["model"]
    ]
    summary["cv_reduction_pct"] = 100.0 * (1.0 - summary["cv_model"] / summary["cv_direct"])
    return pd.concat([frame, summary[frame.columns]], ignore_index=True)


# ---- supplements ---------------------------------------------------------


def _round_block_means(
    rounds: Sequence[Sequence], region_ids: Sequence[str]
) -> np.ndarray:
    """Rounds x regions matrix of simulated block means, NaN where a region failed."""
    matrix = np.full((len(rounds), len(region_ids)), np.nan)
    index = {rid: j for j, rid in enumerate(region_ids)}
    for r, predictions in enumerate(rounds):
        for pred in predictions:
            if pred.status is PredictionStatus.ok and pred.region_id in index:
                matrix[r, index[pred.region_id]] = pred.block_mean
    return matrix


def density_envelope(
    simulated: np.ndarray, actual: np.ndarray, level: float = BAND_LEVEL
) -> pd.DataFrame:
    """Kernel densities of per-round block means against the density of actual block means."""
    actual = np.asarray(actual, dtype=float)
    finite = simulated[np.isfinite(simulated)]
    lo = float(min(finite.min(), actual.min())) if finite.size else float(actual.min())
    hi = float(max(finite.max(), actual.max())) if finite.size else float(actual.max())
    grid = np.linspace(lo, hi, DENSITY_GRID_POINTS)
    densities = []
    for row in simulated:
        values = row[np.isfinite(row)]
        if values.size < 2 or np.ptp(values) == 0:
            continue
        densities.append(gaussian_kde(values)(grid))
    if np.ptp(actual) > 0:
        actual_density = gaussian_kde(actual)(grid)
    else:
        actual_density = np.full_like(grid, np.nan)
    if not densities:
        empty = np.full_like(grid, np.nan)
        return pd.DataFrame(
            {"x": grid, "actual": actual_density, "mean": empty, "lower": empty, "upper": empty}
        )
    stacked = np.vstack(densities)
    lower, upper = percentile_interval(stacked, level, axis=0)
    return pd.DataFrame(
        {
            "x": grid,
            "actual": actual_density,
            "mean": stacked.mean(axis=0),
            "lower": lower,
            "upper": upper,
        }
    )


def block_mean_agreement(
    simulated: np.ndarray, actual: np.ndarray, region_ids: Sequence[str]
) -> pd.DataFrame:
    """Per-region average simulated block mean against the actual one, with an OLS line."""
    mean_sim = np.nanmean(simulated, axis=0)
    actual = np.asarray(actual, dtype=float)
    ok = np.isfinite(mean_sim) & np.isfinite(actual)
    if ok.sum() >= 2 and np.ptp(actual[ok]) > 0:
        slope, intercept = np.polyfit(actual[ok], mean_sim[ok], 1)
    else:
        slope, intercept = math.nan, math.nan
    return pd.DataFrame(
        {
            "region_id": list(region_ids),
            "actual": actual,
            "simulated_mean": mean_sim,
            "fit_slope": float(slope),
            "fit_intercept": float(intercept),
        }
    )


def model_comparison(
    fits: dict[str, SfhFit], predictions: dict[str, list[AreaPrediction]]
) -> pd.DataFrame:
    rows = []
    for name, fit in fits.items():
        preds = predictions.get(name, [])
        mses = [p.mse_log for p in preds if p.mse_log is not None]
        rows.append(
            {
                "model": name,
                "sigma2_v": fit.sigma2_v,
                "rho": fit.rho,
                "loglik_restricted": fit.loglik,
                "n_coefficients": len(fit.beta_names),
                "boundary": fit.boundary,
                "mean_mse_log": float(np.mean(mses)) if mses else math.nan,
                "mse_source": preds[0].mse_source if preds else "deferred",
                "mean_naive_mse_log": float(np.mean(naive_mse(fit))),
            }
        )
    return pd.DataFrame(rows)


def group_aggregation(
    regions: RegionSet,
    predictions: list[AreaPrediction],
    direct: list[DirectEstimate],
    run: BootstrapRun | None = None,
    level: float = DEFAULT_LEVEL,
) -> pd.DataFrame:
    """
    Grouped totals of model predictions and direct estimates.

    Bootstrap intervals aggregate within each replicate before taking
    percentiles.
    """
    group_of = {region.id: region.group_id or UNGROUPED for region in regions.regions}
    population = {region.id: region.population_count for region in regions.regions}
    direct_by_id = {est.region_id: est for est in direct}
    groups = sorted({group_of[p.region_id] for p in predictions})
    replicate_totals: dict[str, np.ndarray] = {}
    if run is not None:
        by_id = {p.region_id: p for p in predictions}
        eblup_log = np.array([by_id[rid].eblup_log for rid in run.region_ids])
        mse = np.array([by_id[rid].mse_log or 0.0 for rid in run.region_ids])
        weights = np.array([population[rid] for rid in run.region_ids], dtype=float)
        per_area = _totals(recentred_predictions(run, eblup_log), weights, mse)
        for group in groups:
            members = [j for j, rid in enumerate(run.region_ids) if group_of[rid] == group]
            replicate_totals[group] = per_area[:, members].sum(axis=1)

    rows = []
    for group in groups:
        members = [p for p in predictions if group_of[p.region_id] == group]
        tau_sum = math.fsum(p.tau_hat for p in members if p.tau_hat is not None)
        direct_sum = math.fsum(
            direct_by_id[p.region_id].tau_tilde
            for p in members
            if p.region_id in direct_by_id and direct_by_id[p.region_id].n_i > 0
        )
        row = {
            "group_id": group,
            "n_areas": len(members),
            "tau_hat_sum": tau_sum,
            "direct_sum": direct_sum,
            "lower": math.nan,
            "upper": math.nan,
        }
        if group in replicate_totals:
            lower, upper = percentile_interval(replicate_totals[group], level)
            row["lower"], row["upper"] = float(lower), float(upper)
        rows.append(row)
    return pd.DataFrame(rows)


# ---- suite ---------------------------------------------------------------


def simulate_trajectories(
    covariate_round: CovariateRound, count: int, master_seed: int
) -> list[FieldRealization]:
    return [
        covariate_round.realize(substream(master_seed, DIAGNOSTIC_REPLICATE, LANE_COVARIATE, t))
        for t in range(count)
    ]


def diagnostics_suite(
    fit: SfhFit, run: BootstrapRun | None, inputs: DiagnosticInputs
) -> DiagnosticBundle:
    """All diagnostic tables; envelope tables need a run or a covariate round."""
    design = inputs.design
    primary = inputs.predictions.get(fit.random_effect, [])
    if run is not None and primary and all(p.mse_log is None for p in primary):
        mse = mse_eblup(run)
        primary = [
            p.model_copy(update={"mse_log": float(v), "mse_source": "bootstrap"})
            for p, v in zip(primary, mse)
        ]
    tables: dict[str, pd.DataFrame] = {
        "qq_residuals": qq_residuals(fit, design),
        "mse_comparison": mse_comparison(
            inputs.direct, inputs.predictions, run, fit.random_effect if run is not None else None
        ),
        "group_aggregation": group_aggregation(
            inputs.regions, primary, inputs.direct, run, inputs.level
        ),
    }
    if inputs.fits:
        tables["model_comparison"] = model_comparison(inputs.fits, inputs.predictions)
    if run is not None and primary:
        tables["prediction_envelope"] = prediction_envelope(run, primary, design.population)
        tables["bootstrap_density_envelope"] = bootstrap_density_envelope(
            run, primary, design.population
        )

    if inputs.covariate_round is not None and inputs.grid_points is not None:
        trajectories = simulate_trajectories(
            inputs.covariate_round, inputs.trajectories, inputs.master_seed
        )
        tables["variogram_envelope"] = variogram_envelope(
            trajectories,
            inputs.grid_points,
            n_bins=inputs.variogram_bins,
            max_lag=inputs.variogram_max_lag,
        )
        tables["point_counts"] = point_counts(
            trajectories, inputs.grid_points[:, :2], inputs.regions
        )
        if inputs.actual_block_means:
            ids = [rid for rid in inputs.regions.ids if rid in inputs.actual_block_means]
            rounds = [inputs.covariate_round.upscale(t) for t in trajectories]
            simulated = _round_block_means(rounds, ids)
            actual = np.array([inputs.actual_block_means[rid] for rid in ids])
            tables["block_mean_agreement"] = block_mean_agreement(simulated, actual, ids)
            tables["density_envelope"] = density_envelope(simulated, actual)
    logger.info("diagnostics produced %d tables", len(tables))
    return DiagnosticBundle(tables=tables)


# ---- optional rendering -------------------------------------------------


def render_svg(bundle: DiagnosticBundle) -> dict[str, bytes]:
    """SVG renderings of the main tables; empty when matplotlib is unavailable."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib is not installed; skipping SVG rendering")
        return {}

    plt.rcParams["svg.hashsalt"] = "saefusion"
    rendered: dict[str, bytes] = {}

    def _save(name: str, fig: object) -> None:
        buffer = io.BytesIO()
        fig.savefig(buffer, format="svg", metadata={"Date": None})  # type: ignore[attr-defined]
        plt.close(fig)  # type: ignore[arg-type]
        rendered[name] = buffer.getvalue()

    tables = bundle.tables
    if "qq_residuals" in tables:
        qq = tables["qq_residuals"]
        fig, ax = plt.subplots(figsize=(5, 5))
        for series, group in qq.groupby("series", sort=False):
            ax.scatter(group["theoretical"], group["standardized"], s=10, label=series)
        ax.plot(qq["theoretical"], qq["theoretical"], color="grey", linewidth=0.8)
        ax.set_xlabel("normal quantile")
        ax.set_ylabel("standardized value")
        ax.legend()
        _save("qq_residuals.svg", fig)
    if "prediction_envelope" in tables:
        env = tables["prediction_envelope"].sort_values("actual_eblup_log")
        fig, ax = plt.subplots(figsize=(6, 4))
        x = np.arange(len(env))
        ax.fill_between(x, env["lower_log"], env["upper_log"], alpha=0.3)
        ax.plot(x, env["mean_log"], label="bootstrap mean")
        ax.scatter(x, env["actual_eblup_log"], s=8, color="black", label="EBLUP")
        ax.set_ylabel("log mean")
        ax.legend()
        _save("prediction_envelope.svg", fig)
    if "bootstrap_density_envelope" in tables:
        env = tables["bootstrap_density_envelope"]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.fill_between(env["x"], env["lower"], env["upper"], alpha=0.3)
        ax.plot(env["x"], env["mean"], label="bootstrap mean")
        ax.plot(env["x"], env["actual"], color="black", label="actual")
        ax.set_xlabel("log total")
        ax.set_ylabel("density")
        ax.legend()
        _save("bootstrap_density_envelope.svg", fig)
    if "variogram_envelope" in tables:
        env = tables["variogram_envelope"]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.fill_between(env["lag"], env["lower"], env["upper"], alpha=0.3)
        ax.plot(env["lag"], env["data"], marker="o", color="black")
        ax.set_xlabel("lag")
        ax.set_ylabel("semivariance")
        _save("variogram_envelope.svg", fig)
    if "block_mean_agreement" in tables:
        agree = tables["block_mean_agreement"]
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(agree["actual"], agree["simulated_mean"], s=10)
        ax.plot(agree["actual"], agree["actual"], color="grey", linewidth=0.8)
        ax.set_xlabel("block kriging prediction")
        ax.set_ylabel("average simulated block mean")
        _save("block_mean_agreement.svg", fig)
    return rendered


__all__ = [
    "DiagnosticInputs",
    "qq_residuals",
    "prediction_envelope",
    "bootstrap_density_envelope",
    "variogram_envelope",
    "point_counts",
    "mse_comparison",
    "density_envelope",
    "block_mean_agreement",
    "model_comparison",
    "group_aggregation",
    "simulate_trajectories",
    "diagnostics_suite",
    "render_svg",
]
