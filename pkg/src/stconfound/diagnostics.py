"""Fit quality measures and confounding diagnostics.

Deviance is the standard Poisson deviance; effective degrees of freedom
is the trace of the operator mapping the working response to the fitted
working linear predictor at convergence,

    df = (p + 1) + sum_k sigma2_k tr(P G_k),

which collapses to p + 1 when there are no random blocks. AIC is
deviance + 2 df. Confounding diagnostics correlate each covariate with
the eigenvector of the spatial (or temporal) structure matrix having
the smallest non-null eigenvalue: the smoothest non-constant pattern,
and the direction along which fixed and random effects compete.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.special

from .errors import ValidationError
from .model import Dataset, DesignBundle
from .structures import PrecisionSpectrum


def poisson_deviance(observed, fitted_mu) -> float:
    """2 sum[O log(O/mu) - (O - mu)], with zero counts contributing 2 mu."""
    O = np.asarray(observed, dtype=float).ravel()
    mu = np.asarray(fitted_mu, dtype=float).ravel()
    if O.shape != mu.shape:
        raise ValidationError("observed and fitted lengths differ")
    if np.any(mu <= 0):
        raise ValidationError("fitted means must be positive")
    terms = scipy.special.xlogy(O, O) - scipy.special.xlogy(O, mu) - (O - mu)
    return float(2.0 * terms.sum())


def aic(fit) -> float:
    """Deviance plus twice the effective degrees of freedom."""
    return float(fit.deviance + 2.0 * fit.effective_df)


def effective_df(fit, bundle: DesignBundle) -> float:
    """Trace of the working-model hat operator at the fitted state.

    Recomputed from the bundle, the fit's working weights and its
    variance components; agrees with ``fit.effective_df``.
    """
    if not bundle.blocks:
        return float(bundle.X_star.shape[1])
    from .pql import _WorkingSolver, _projection_traces, _sigma2_vector

    sigma2_vec = _sigma2_vector(bundle, fit.variance_components.sigma2)
    solver = _WorkingSolver(
        fit.working_weights, bundle.blocks, sigma2_vec, context=" in effective_df"
    )
    _, _, tr_PG = _projection_traces(solver, bundle.X_star, bundle.blocks)
    return float(bundle.X_star.shape[1] + sigma2_vec @ tr_PG)


@dataclass(frozen=True)
class ComparisonRow:
    """One model's selection criteria and timing."""

    label: str
    deviance: float
    effective_df: float
    aic: float
    wall_time_seconds: float
    converged: bool = True


@dataclass(frozen=True)
class ModelComparison:
    """Selection criteria for a set of fitted models, in fitting order."""

    rows: tuple[ComparisonRow, ...]

    def row(self, label: str) -> ComparisonRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def comparison_row(label: str, fit, wall_time_seconds: float) -> ComparisonRow:
    return ComparisonRow(
        label=label,
        deviance=float(fit.deviance),
        effective_df=float(fit.effective_df),
        aic=aic(fit),
        wall_time_seconds=float(wall_time_seconds),
        converged=bool(fit.converged),
    )


@dataclass(frozen=True, eq=False)
class CorrelationDiagnostic:
    """Correlations between covariates and the smoothest structure eigenvectors.

    ``spatial`` is p x T: covariate j's areal slice at each period
    against the spatial eigenvector. ``temporal`` is p x S (None when
    T = 1): covariate j's time series in each area against the temporal
    eigenvector. Undefined correlations (a constant slice) are recorded
    as NaN markers; they never contaminate other entries.
    """

    covariate_names: tuple[str, ...]
    spatial: np.ndarray
    temporal: np.ndarray | None


def _signed_smallest_eigenvector(spectrum: PrecisionSpectrum) -> np.ndarray:
    v = spectrum.U_range[:, 0].copy()
    if v[0] < 0:
        v = -v
    return v


def _safe_corr(a: np.ndarray, b: np.ndarray) -> float:
    sa = a - a.mean()
    sb = b - b.mean()
    na = float(np.sqrt(sa @ sa))
    nb = float(np.sqrt(sb @ sb))
    if na == 0.0 or nb == 0.0:
        return float("nan")
    return float(np.clip(sa @ sb / (na * nb), -1.0, 1.0))


def confounding_correlations(
    data: Dataset,
    spatial: PrecisionSpectrum,
    temporal: PrecisionSpectrum | None = None,
) -> CorrelationDiagnostic:
    """Per-period spatial and per-area temporal confounding correlations."""
    S, T, p = data.S, data.T, data.n_covariates
    if spatial.dim != S:
        raise ValidationError(f"spatial spectrum has dimension {spatial.dim}, data has S={S}")
    v_s = _signed_smallest_eigenvector(spatial)
    spatial_corr = np.empty((p, T))
    for j in range(p):
        for t in range(T):
            spatial_corr[j, t] = _safe_corr(data.covariates[t * S:(t + 1) * S, j], v_s)

    temporal_corr = None
    if T > 1:
        if temporal is None or temporal.dim != T:
            raise ValidationError("temporal spectrum missing or wrong size")
        v_t = _signed_smallest_eigenvector(temporal)
        temporal_corr = np.empty((p, S))
        for j in range(p):
            for s in range(S):
                temporal_corr[j, s] = _safe_corr(data.covariates[s::S, j], v_t)
    return CorrelationDiagnostic(
        covariate_names=data.covariate_names, spatial=spatial_corr, temporal=temporal_corr
    )


@dataclass(frozen=True, eq=False)
class PatternDecomposition:
    """Multiplicative risk components from a fitted model.

    Each pattern is the exponentiated block contribution: length S
    (spatial) and T (temporal) where the block is structured that way,
    and length TS for interaction or restricted blocks. ``risks`` is
    exp(linear predictor), so risks * expected = fitted_mu.
    """

    patterns: dict[str, np.ndarray]
    risks: np.ndarray


def decompose_patterns(fit, bundle: DesignBundle) -> PatternDecomposition:
    """Exponentiated per-block contributions and total relative risks."""
    patterns = {label: np.exp(effect) for label, effect in fit.random_effects.items()}
    return PatternDecomposition(patterns=patterns, risks=np.exp(fit.linear_predictor))
