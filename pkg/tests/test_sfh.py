from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest

from saefusion.errors import DesignError, InadmissibleThetaError, RankDeficientError
from saefusion.geo import build_contiguity
from saefusion.models import (
    ConvergenceReport,
    CovariateScaling,
    DirectEstimate,
    ModelSpec,
    Region,
    RegionSet,
    SfhFit,
)
from saefusion.sfh import (
    admissible_rho_interval,
    back_transform,
    build_design,
    check_rank,
    eblup,
    eblup_all,
    fit_design,
    fit_report,
    gls_beta,
    naive_mse,
    reml_fit,
    restricted_loglik,
    sar_covariance,
)
from saefusion.utils import substream


def _lattice_w(side: int) -> np.ndarray:
    regions = RegionSet(
        regions=[
            Region(id=f"R{r:02d}{c:02d}", rings=[[(c, r), (c + 1, r), (c + 1, r + 1), (c, r + 1)]])
            for r in range(side)
            for c in range(side)
        ]
    )
    return build_contiguity(regions).w


def _sar_data(
    W: np.ndarray, beta: np.ndarray, sigma2_v: float, rho: float, v_eps: float, rng
) -> tuple[np.ndarray, np.ndarray]:
    m = W.shape[0]
    X = np.column_stack([np.ones(m), rng.standard_normal(m)])
    v = np.linalg.solve(np.eye(m) - rho * W, math.sqrt(sigma2_v) * rng.standard_normal(m))
    y = X @ beta + v + math.sqrt(v_eps) * rng.standard_normal(m)
    return y, X


def _estimate(region_id: str, log_mu: float, var_log: float = 0.1) -> DirectEstimate:
    return DirectEstimate(
        region_id=region_id,
        n_i=5,
        tau_tilde=10.0 * math.exp(log_mu),
        var_tau=1.0,
        log_mu_tilde=log_mu,
        var_log=var_log,
        usable=True,
        population_count=10,
    )


def _fit_with(G: np.ndarray, v_eps: np.ndarray, beta: np.ndarray) -> SfhFit:
    m = v_eps.size
    return SfhFit(
        region_ids=[str(i) for i in range(m)],
        random_effect="independent",
        beta=beta,
        beta_names=["intercept"],
        beta_cov=np.eye(1),
        sigma2_v=float(G[0, 0]),
        rho=0.0,
        loglik=0.0,
        v_eps=v_eps,
        W=np.zeros((m, m)),
        G=G,
        V=G + np.diag(v_eps),
        convergence=ConvergenceReport(
            success=True, method="fixed", starts=0, iterations=0, objective=0.0, gradient_norm=0.0
        ),
    )


def test_three_point_covariate_standardizes_to_unit_sd():
    direct = [_estimate(rid, 1.0) for rid in "ABC"]
    covariates = pd.DataFrame({"x": [1.0, 2.0, 3.0]}, index=["A", "B", "C"])
    design = build_design(direct, covariates, ModelSpec(covariates=["x"]))
    np.testing.assert_allclose(design.X[:, 1], [-1.0, 0.0, 1.0])
    assert design.columns == ["intercept", "x"]
    assert design.scaling.means == {"x": 2.0}
    assert design.scaling.sds == {"x": 1.0}


def test_intercept_only_design_and_variance_floor():
    direct = [_estimate("A", 1.0, var_log=0.0), _estimate("B", 2.0)]
    direct.append(DirectEstimate(region_id="C", usable=False, reason="no sampled units"))
    design = build_design(direct, None, ModelSpec(random_effect="independent"))
    np.testing.assert_array_equal(design.X, np.ones((2, 1)))
    assert design.region_ids == ["A", "B"]
    assert design.v_eps[0] == pytest.approx(1e-8)


def test_stored_scaling_is_reused():
    direct = [_estimate(rid, 1.0) for rid in "AB"]
    covariates = pd.DataFrame({"x": [4.0, 6.0]}, index=["A", "B"])
    scaling = CovariateScaling(means={"x": 2.0}, sds={"x": 2.0})
    design = build_design(direct, covariates, ModelSpec(covariates=["x"]), scaling=scaling)
    np.testing.assert_allclose(design.X[:, 1], [1.0, 2.0])


def test_design_errors_name_the_column():
    direct = [_estimate(rid, 1.0) for rid in "ABC"]
    flat = pd.DataFrame({"x": [5.0, 5.0, 5.0]}, index=["A", "B", "C"])
    with pytest.raises(DesignError, match="'x' is constant"):
        build_design(direct, flat, ModelSpec(covariates=["x"]))
    with pytest.raises(DesignError, match="'z' is missing"):
        build_design(direct, flat, ModelSpec(covariates=["z"]))
    partial = pd.DataFrame({"x": [1.0, 2.0]}, index=["A", "B"])
    with pytest.raises(DesignError, match="no value for regions"):
        build_design(direct, partial, ModelSpec(covariates=["x"]))


def test_gls_beta_weighted_means():
    y = np.array([0.4, 1.2, -0.3, 2.0])
    assert gls_beta(y, np.ones((4, 1)), np.eye(4))[0] == pytest.approx(y.mean())
    beta = gls_beta(np.array([0.0, 3.0]), np.ones((2, 1)), np.diag([1.0, 4.0]))
    assert beta[0] == pytest.approx(0.6)


def test_gls_beta_matches_a_dense_solve():
    rng = np.random.default_rng(17)
    a = rng.standard_normal((12, 12))
    V = a @ a.T + 12 * np.eye(12)
    X = np.column_stack([np.ones(12), rng.standard_normal((12, 2))])
    y = rng.standard_normal(12)
    vi = np.linalg.inv(V)
    expected = np.linalg.solve(X.T @ vi @ X, X.T @ vi @ y)
    np.testing.assert_allclose(gls_beta(y, X, V), expected, atol=1e-8)


def test_duplicate_columns_are_rank_deficient():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(8)
    X = np.column_stack([np.ones(8), x, x])
    with pytest.raises(RankDeficientError) as info:
        check_rank(X, ["intercept", "a", "b"])
    assert info.value.columns in (["a"], ["b"])
    with pytest.raises(RankDeficientError):
        restricted_loglik((0.1, 0.0), rng.standard_normal(8), X, np.full(8, 0.1), None)


def test_rho_interval_of_a_path():
    W = np.array([[0.0, 1.0, 0.0], [0.5, 0.0, 0.5], [0.0, 1.0, 0.0]])
    lo, hi = admissible_rho_interval(W)
    assert lo == pytest.approx(-1.0 + 1e-6)
    assert hi == pytest.approx(1.0 - 1e-6)


def test_sar_covariance_reduces_to_iid_at_zero_rho():
    W = _lattice_w(3)
    np.testing.assert_allclose(sar_covariance(0.3, 0.0, W), 0.3 * np.eye(9))
    G = sar_covariance(0.3, 0.5, W)
    np.testing.assert_allclose(G, G.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(G) > 0)


def test_negative_variance_is_inadmissible():
    with pytest.raises(InadmissibleThetaError):
        restricted_loglik((-0.5, 0.0), np.zeros(4), np.ones((4, 1)), np.full(4, 0.1), None)


def test_reml_optimum_beats_random_admissible_points():
    rng = substream(99, 0)
    W = _lattice_w(6)
    y, X = _sar_data(W, np.array([3.45, 0.61]), 0.2, 0.7, 0.1, rng)
    v_eps = np.full(36, 0.1)
    fit = reml_fit(y, X, v_eps, W, ModelSpec())
    lo, hi = fit.rho_interval
    points = zip(rng.uniform(0.0, 2.0, 100), rng.uniform(lo, hi, 100))
    for sigma2_v, rho in points:
        assert fit.loglik >= restricted_loglik((sigma2_v, rho), y, X, v_eps, W) - 1e-6
    assert fit.convergence.success
    assert lo < fit.rho < hi


def test_reml_needs_enough_areas_and_a_matrix_for_sar():
    with pytest.raises(DesignError):
        reml_fit(np.zeros(3), np.ones((3, 2)), np.ones(3), None, ModelSpec())
    with pytest.raises(DesignError, match="contiguity"):
        reml_fit(np.arange(6.0), np.ones((6, 1)), np.ones(6), None, ModelSpec())


def test_fit_design_carries_ids_and_names():
    rng = substream(5, 0)
    m = 20
    direct = [_estimate(f"A{i}", float(v)) for i, v in enumerate(1.0 + rng.standard_normal(m))]
    covariates = pd.DataFrame({"x": rng.standard_normal(m)}, index=[e.region_id for e in direct])
    design = build_design(direct, covariates, ModelSpec(covariates=["x"]))
    fit = fit_design(design, None, ModelSpec(covariates=["x"], random_effect="independent"))
    assert fit.region_ids == design.region_ids
    assert fit.beta_names == ["intercept", "x"]
    assert fit.rho == 0.0
    report = fit_report(fit)
    assert [c["name"] for c in report["coefficients"]] == ["intercept", "x"]
    assert report["theta"]["rho"] == 0.0
    assert report["n_areas"] == m


def test_zero_area_variance_gives_the_synthetic_estimator():
    v_eps = np.full(4, 0.2)
    fit = _fit_with(np.zeros((4, 4)), v_eps, np.array([1.5]))
    y = np.array([1.0, 2.0, 0.5, 3.0])
    np.testing.assert_allclose(eblup_all(fit, y, np.ones((4, 1))), 1.5)
    np.testing.assert_allclose(naive_mse(fit), 0.0, atol=1e-12)


def test_vanishing_sampling_variance_reproduces_the_direct_estimate():
    v_eps = np.full(4, 1e-12)
    fit = _fit_with(0.5 * np.eye(4), v_eps, np.array([1.5]))
    y = np.array([1.0, 2.0, 0.5, 3.0])
    for i in range(4):
        assert eblup(fit, y, np.ones((4, 1)), i) == pytest.approx(y[i], abs=1e-6)


def test_naive_mse_lies_between_zero_and_the_area_variance():
    fit = _fit_with(0.5 * np.eye(3), np.array([0.1, 0.5, 2.0]), np.array([0.0]))
    mse = naive_mse(fit)
    assert np.all(mse > 0) and np.all(mse < 0.5)
    assert mse[0] < mse[1] < mse[2]


def test_back_transform_examples():
    identity = back_transform("A", 0.0, 0.0, 10)
    assert identity.mu_hat == pytest.approx(1.0)
    assert identity.tau_hat == pytest.approx(10.0)
    assert identity.rmse_total == 0.0

    shifted = back_transform("A", 2.0, 0.5, 4)
    assert shifted.mu_hat == pytest.approx(math.exp(2.25))
    assert shifted.mu_hat == pytest.approx(9.48774, abs=1e-5)
    assert shifted.rmse_total == pytest.approx(4 * math.exp(2.25) * math.sqrt(math.expm1(0.5)))

    assert back_transform("A", 1.0, 0.1, 0).tau_hat == 0.0
    with pytest.raises(ValueError):
        back_transform("A", 1.0, -0.1, 10)


def test_shifting_the_response_moves_only_the_intercept():
    W = _lattice_w(5)
    y, X = _sar_data(W, np.array([3.45, 0.61]), 0.2, 0.6, 0.1, substream(31, 0))
    v_eps = np.full(25, 0.1)
    base = reml_fit(y, X, v_eps, W, ModelSpec())
    shifted = reml_fit(y + 2.5, X, v_eps, W, ModelSpec())
    assert shifted.beta[0] == pytest.approx(base.beta[0] + 2.5, abs=1e-4)
    assert shifted.beta[1] == pytest.approx(base.beta[1], abs=1e-4)
    assert shifted.sigma2_v == pytest.approx(base.sigma2_v, abs=1e-4)
    assert shifted.rho == pytest.approx(base.rho, abs=1e-4)
    np.testing.assert_allclose(
        eblup_all(shifted, y + 2.5, X), eblup_all(base, y, X) + 2.5, atol=1e-4
    )


def test_independent_eblup_lies_between_direct_and_synthetic():
    rng = substream(32, 0)
    m = 30
    X = np.column_stack([np.ones(m), rng.standard_normal(m)])
    v_eps = rng.uniform(0.05, 0.5, m)
    y = X @ np.array([1.0, 0.8]) + rng.normal(0.0, math.sqrt(0.3), m)
    y = y + rng.normal(0.0, np.sqrt(v_eps))
    fit = reml_fit(y, X, v_eps, None, ModelSpec(random_effect="independent"))
    synthetic = X @ fit.beta
    estimates = eblup_all(fit, y, X)
    assert np.all(estimates >= np.minimum(y, synthetic) - 1e-10)
    assert np.all(estimates <= np.maximum(y, synthetic) + 1e-10)


def test_relabelling_the_areas_permutes_the_fit():
    W = _lattice_w(5)
    y, X = _sar_data(W, np.array([3.45, 0.61]), 0.2, 0.6, 0.1, substream(33, 0))
    v_eps = np.linspace(0.05, 0.2, 25)
    perm = substream(33, 1).permutation(25)
    base = reml_fit(y, X, v_eps, W, ModelSpec())
    relabelled = reml_fit(y[perm], X[perm], v_eps[perm], W[perm][:, perm], ModelSpec())
    np.testing.assert_allclose(relabelled.beta, base.beta, atol=1e-4)
    assert relabelled.sigma2_v == pytest.approx(base.sigma2_v, abs=1e-4)
    assert relabelled.rho == pytest.approx(base.rho, abs=1e-4)
    assert relabelled.loglik == pytest.approx(base.loglik, abs=1e-6)
    np.testing.assert_allclose(
        eblup_all(relabelled, y[perm], X[perm]), eblup_all(base, y, X)[perm], atol=1e-4
    )


def test_back_transformed_mean_increases_with_both_log_inputs():
    grid = np.linspace(-2.0, 3.0, 11)
    by_eblup = [back_transform("A", e, 0.3, 10).mu_hat for e in grid]
    by_mse = [back_transform("A", 1.0, s, 10).mu_hat for s in np.linspace(0.0, 2.0, 11)]
    assert np.all(np.diff(by_eblup) > 0)
    assert np.all(np.diff(by_mse) > 0)


@pytest.mark.slow
def test_reml_recovers_the_generating_parameters():
    W = _lattice_w(15)
    m = W.shape[0]
    beta_true = np.array([3.45, 0.61])
    v_eps = np.full(m, 0.1)
    estimates = []
    for rep in range(50):
        y, X = _sar_data(W, beta_true, 0.2, 0.7, 0.1, substream(2024, rep))
        fit = reml_fit(y, X, v_eps, W, ModelSpec())
        estimates.append([*fit.beta, fit.sigma2_v, fit.rho])
    mean = np.mean(estimates, axis=0)
    np.testing.assert_allclose(mean[:2], beta_true, rtol=0.1)
    assert mean[2] == pytest.approx(0.2, rel=0.1)
    assert mean[3] == pytest.approx(0.7, abs=0.1)


@pytest.mark.slow
def test_pure_sampling_noise_hits_the_variance_boundary():
    m = 30
    v_eps = np.full(m, 0.2)
    hits = 0
    for rep in range(200):
        rng = substream(77, rep)
        y = 1.0 + math.sqrt(0.2) * rng.standard_normal(m)
        fit = reml_fit(y, np.ones((m, 1)), v_eps, None, ModelSpec(random_effect="independent"))
        hits += fit.boundary
        if fit.boundary:
            assert fit.sigma2_v == 0.0
    assert hits >= 0.4 * 200
