"""Deviance, effective degrees of freedom, AIC, and confounding diagnostics."""

import numpy as np
import pytest
from oracles import loop_deviance, mixed_hat_trace

from stconfound import (
    Dataset,
    ModelComparison,
    ValidationError,
    aic,
    build_structures,
    comparison_row,
    confounding_correlations,
    decompose_patterns,
    effective_df,
    fit,
    poisson_deviance,
)
from stconfound.pql import _WorkingSolver, _projection_traces


# -------------------------------------------------------------- deviance

def test_deviance_zero_at_perfect_fit():
    O = np.array([3.0, 7.0, 0.0, 11.0])
    assert poisson_deviance(O, np.maximum(O, 1e-9)) == pytest.approx(0.0, abs=1e-6)


def test_deviance_known_value():
    # 2 [O log(O/mu) - (O - mu)] at O=2, mu=1 is 4 log 2 - 2.
    assert poisson_deviance([2.0], [1.0]) == pytest.approx(
        0.7725887222397812, abs=1e-12
    )


def test_deviance_zero_count_contributes_twice_the_mean():
    assert poisson_deviance([0.0], [3.0]) == pytest.approx(6.0, abs=1e-12)


def test_deviance_matches_loop_oracle():
    rng = np.random.Generator(np.random.Philox(24))
    mu = rng.lognormal(1.0, 0.7, 50)
    O = rng.poisson(mu).astype(float)
    assert poisson_deviance(O, mu) == pytest.approx(loop_deviance(O, mu), rel=1e-12)


def test_deviance_validation():
    with pytest.raises(ValidationError, match="lengths"):
        poisson_deviance([1.0, 2.0], [1.0])
    with pytest.raises(ValidationError, match="positive"):
        poisson_deviance([1.0], [0.0])


# ------------------------------------------------------- degrees of freedom

def test_aic_identity_across_roster(roster):
    for _, result in roster.values():
        assert aic(result) == pytest.approx(
            result.deviance + 2.0 * result.effective_df, abs=1e-12
        )


def test_glm_df_is_exactly_parameter_count(roster):
    bundle, result = roster["ST1"]
    assert result.effective_df == 3.0
    assert effective_df(result, bundle) == 3.0


def test_effective_df_recomputation_is_consistent(roster):
    for bundle, result in roster.values():
        assert effective_df(result, bundle) == pytest.approx(
            result.effective_df, rel=1e-9
        )


def test_effective_df_within_parameter_bounds(roster):
    for bundle, result in roster.values():
        lower = bundle.p + 1
        upper = bundle.p + 1 + sum(blk.C_rank for blk in bundle.blocks)
        assert lower <= result.effective_df <= upper + 1e-8


def test_effective_df_matches_hat_trace_oracle(small_st2):
    """df equals the trace of the penalized working-model smoother."""
    bundle, result = small_st2
    sigma2 = result.variance_components.sigma2
    trace = mixed_hat_trace(
        bundle.X_star,
        [blk.Z for blk in bundle.blocks],
        [blk.C for blk in bundle.blocks],
        [sigma2[blk.label] for blk in bundle.blocks],
        result.working_weights,
    )
    assert result.effective_df == pytest.approx(trace, rel=1e-8)


def _df_at_scaled_variances(bundle, w, sigma2_vec):
    solver = _WorkingSolver(w, bundle.blocks, sigma2_vec)
    _, _, tr_PG = _projection_traces(solver, bundle.X_star, bundle.blocks)
    return float(bundle.X_star.shape[1] + sigma2_vec @ tr_PG)


def test_df_shrinks_to_parameter_count_as_variances_vanish(small_st2):
    bundle, result = small_st2
    w = result.working_weights
    base = np.array(
        [result.variance_components.sigma2[b.label] for b in bundle.blocks]
    )
    dfs = [_df_at_scaled_variances(bundle, w, base * c) for c in (1.0, 1e-2, 1e-4)]
    assert all(df >= bundle.p + 1 for df in dfs)
    assert dfs[0] >= dfs[1] >= dfs[2]
    floor_df = _df_at_scaled_variances(bundle, w, np.full(len(base), 1e-10))
    assert floor_df == pytest.approx(bundle.p + 1, abs=1e-3)


# ------------------------------------------------------------- comparison

def test_comparison_row_and_lookup(roster):
    _, st2 = roster["ST2"]
    row = comparison_row("ST2", st2, wall_time_seconds=0.5)
    assert row.aic == pytest.approx(aic(st2))
    assert row.deviance == st2.deviance
    assert row.converged
    table = ModelComparison(rows=(row,))
    assert table.row("ST2") is row
    with pytest.raises(KeyError):
        table.row("ST9")


# ------------------------------------------------------------ correlations

def _corr_data(X, T=3):
    S = 4
    return Dataset(
        S=S, T=T,
        observed=np.ones(S * T),
        expected=np.ones(S * T),
        covariates=X,
    )


def test_correlation_with_the_smooth_pattern_is_one(structures_s4t3):
    v = structures_s4t3.spatial.U_range[:, 0]
    if v[0] < 0:
        v = -v
    X = np.tile(v, 3)[:, None]
    diag = confounding_correlations(
        _corr_data(X), structures_s4t3.spatial, structures_s4t3.temporal
    )
    assert diag.spatial.shape == (1, 3)
    np.testing.assert_allclose(diag.spatial, 1.0, atol=1e-12)
    # Flipping the covariate flips the sign.
    diag = confounding_correlations(
        _corr_data(-X), structures_s4t3.spatial, structures_s4t3.temporal
    )
    np.testing.assert_allclose(diag.spatial, -1.0, atol=1e-12)


def test_correlation_is_affine_invariant(structures_s4t3):
    rng = np.random.Generator(np.random.Philox(25))
    X = rng.standard_normal((12, 2))
    base = confounding_correlations(
        _corr_data(X), structures_s4t3.spatial, structures_s4t3.temporal
    )
    shifted = confounding_correlations(
        _corr_data(3.0 * X + 7.0),
        structures_s4t3.spatial,
        structures_s4t3.temporal,
    )
    np.testing.assert_allclose(base.spatial, shifted.spatial, atol=1e-12)
    np.testing.assert_allclose(base.temporal, shifted.temporal, atol=1e-12)


def test_constant_slice_yields_nan_marker(structures_s4t3):
    rng = np.random.Generator(np.random.Philox(26))
    X = rng.standard_normal((12, 1))
    X[:4, 0] = 2.5  # period 1 slice is constant
    diag = confounding_correlations(
        _corr_data(X), structures_s4t3.spatial, structures_s4t3.temporal
    )
    assert np.isnan(diag.spatial[0, 0])
    assert np.all(np.isfinite(diag.spatial[0, 1:]))


def test_correlations_single_period(path4):
    structures = build_structures(path4, 1)
    data = Dataset(
        S=4, T=1, observed=np.ones(4), expected=np.ones(4),
        covariates=np.array([[1.0], [2.0], [4.0], [3.0]]),
    )
    diag = confounding_correlations(data, structures.spatial)
    assert diag.temporal is None
    assert diag.spatial.shape == (1, 1)


def test_correlation_dimension_checks(structures_s4t3, structures_s3t3):
    data = _corr_data(np.ones((12, 1)) + np.arange(12)[:, None])
    with pytest.raises(ValidationError, match="spatial spectrum"):
        confounding_correlations(data, structures_s3t3.spatial, structures_s4t3.temporal)
    with pytest.raises(ValidationError, match="temporal spectrum"):
        confounding_correlations(data, structures_s4t3.spatial, None)


def test_correlations_are_bounded(study_data, study_structures):
    diag = confounding_correlations(
        study_data, study_structures.spatial, study_structures.temporal
    )
    assert diag.spatial.shape == (2, 10)
    assert diag.temporal.shape == (2, 20)
    assert np.nanmax(np.abs(diag.spatial)) <= 1.0
    assert np.nanmax(np.abs(diag.temporal)) <= 1.0


# ---------------------------------------------------------------- patterns

def test_pattern_lengths_follow_block_structure(roster):
    st2_bundle, st2 = roster["ST2"]
    S, T = st2_bundle.S, st2_bundle.T
    decomp = decompose_patterns(st2, st2_bundle)
    assert decomp.patterns["spatial"].shape == (S,)
    assert decomp.patterns["temporal"].shape == (T,)
    assert decomp.patterns["interaction"].shape == (S * T,)
    assert np.all(decomp.patterns["spatial"] > 0)


def test_st4_patterns_are_exponentiated_effects(roster):
    bundle, result = roster["ST4"]
    decomp = decompose_patterns(result, bundle)
    np.testing.assert_allclose(
        decomp.patterns["spatial"],
        np.exp(result.coefficients["spatial"]),
        rtol=1e-12,
    )
    assert decomp.patterns["spatial"].shape == (bundle.S,)


def test_restricted_spatial_pattern_varies_over_time(roster):
    """After restriction the spatial surface is no longer time-constant."""
    bundle, result = roster["ST3"]
    pattern = decompose_patterns(result, bundle).patterns["spatial"]
    assert pattern.shape == (bundle.S * bundle.T,)
    by_time = pattern.reshape(bundle.T, bundle.S)
    assert np.max(by_time.max(axis=0) - by_time.min(axis=0)) > 1e-6


def test_patterns_multiply_back_to_fitted_means(roster, study_data):
    for bundle, result in roster.values():
        decomp = decompose_patterns(result, bundle)
        np.testing.assert_allclose(
            decomp.risks * study_data.expected, result.fitted_mu, rtol=1e-10
        )


def test_null_fit_patterns_are_flat(null_fit):
    _, bundle, result = null_fit
    decomp = decompose_patterns(result, bundle)
    for values in decomp.patterns.values():
        np.testing.assert_allclose(values, 1.0, atol=1e-6)


def test_glm_has_no_patterns(roster):
    bundle, result = roster["ST1"]
    assert decompose_patterns(result, bundle).patterns == {}
