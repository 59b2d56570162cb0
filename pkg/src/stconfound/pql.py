"""Penalized quasi-likelihood fitting of the Poisson mixed models.

Each outer iteration linearizes the Poisson log-likelihood around the
current linear predictor eta (offset log e excluded), giving the
working vector and weights

    O* = eta + (O - mu)/mu,      W = diag(mu),      mu = e * exp(eta),

then treats O* as Gaussian with marginal covariance

    V = W^{-1} + sum_k sigma2_k G_k,      G_k = Z_k C_k Z_k',

solving the working model by GLS and BLUP,

    beta = (X' V^{-1} X)^{-1} X' V^{-1} O*,
    u_k  = sigma2_k C_k Z_k' V^{-1} (O* - X beta),

and finally taking one REML Fisher-scoring step in the variance
components using the projection
P = V^{-1} - V^{-1} X (X' V^{-1} X)^{-1} X' V^{-1}:

    score_k = -1/2 [tr(P G_k) - O*' P G_k P O*],
    info_kl =  1/2  tr(P G_k P G_l).

The inner (IRLS) loop runs to convergence at fixed sigma2 before each
variance step; when the information matrix is not positive definite the
step falls back to the EM form sigma2 + (2 sigma2^2 / q_k) * score_k,
halved until positive. Variances are floored at 1e-10 with a boundary
flag rather than allowed to reach zero, keeping V invertible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, NumericalError, ValidationError
from .model import Dataset, DesignBundle, StandardizationRecord

SIGMA2_FLOOR = 1e-10
DEFAULT_SIGMA2_INIT = 0.1
MAX_STEP_HALVINGS = 20
# Working weights are the Poisson means; this floor only guards against
# underflow of exp at extreme linear predictors.
WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class PQLOptions:
    """Tolerances and iteration limits for a PQL fit."""

    tol: float = 1e-5
    max_outer: int = 100
    max_inner: int = 50
    warm_start: "VarianceComponents | None" = None
    sigma2_init: float = DEFAULT_SIGMA2_INIT


@dataclass(frozen=True)
class VarianceComponents:
    """Variance component estimates keyed by block label.

    ``standard_errors`` come from the inverse REML information at the
    estimate; ``at_boundary`` marks components pinned at the 1e-10 floor.
    """

    sigma2: dict[str, float]
    standard_errors: dict[str, float]
    at_boundary: dict[str, bool]

    def __post_init__(self):
        for label, value in self.sigma2.items():
            if not (value > 0):
                raise ValidationError(f"sigma2[{label!r}] must be positive, got {value}")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Everything a converged (or stopped) PQL fit produces.

    ``linear_predictor`` excludes the offset, so
    fitted_mu = expected * exp(linear_predictor). ``random_effects``
    holds each block's estimate on its natural scale: per-area and
    per-period vectors where the block structure permits, and a full
    length-TS contribution for interaction or restricted blocks.
    ``beta_cov`` is the GLS covariance conditional on the estimated
    variance components.
    """

    variant: str
    S: int
    T: int
    beta: np.ndarray
    beta_cov: np.ndarray
    term_names: tuple[str, ...]
    random_effects: dict[str, np.ndarray]
    coefficients: dict[str, np.ndarray]
    variance_components: VarianceComponents
    fitted_mu: np.ndarray
    linear_predictor: np.ndarray
    working_weights: np.ndarray
    converged: bool
    iterations: int
    deviance: float
    effective_df: float
    standardization: StandardizationRecord
    tol: float

    @property
    def beta_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.beta_cov))


@dataclass(frozen=True, eq=False)
class PQLState:
    """A snapshot of the working model: enough to take one variance step."""

    bundle: DesignBundle
    W_diag: np.ndarray
    working_response: np.ndarray
    sigma2: dict[str, float]


@dataclass(frozen=True, eq=False)
class InnerFit:
    """Output of the inner IRLS loop at fixed variance components."""

    beta: np.ndarray
    coefficients: dict[str, np.ndarray]
    eta: np.ndarray
    mu: np.ndarray
    W_diag: np.ndarray
    working_response: np.ndarray
    iterations: int
    converged: bool


class _WorkingSolver:
    """Solves with V = W^{-1} + sum sigma2_k G_k, choosing the cheaper form.

    When the total random dimension is below N/2 the Woodbury identity
    V^{-1} = W - W F (I + F' W F)^{-1} F' W with G_k = F_k F_k' is used;
    otherwise V is formed and Cholesky-factorized densely.
    """

    def __init__(self, W_diag: np.ndarray, blocks, sigma2_vec, context: str = ""):
        self.W_diag = W_diag
        N = W_diag.size
        parts = [
            math.sqrt(s2) * blk.root for blk, s2 in zip(blocks, sigma2_vec)
        ]
        m = sum(part.shape[1] for part in parts)
        try:
            if 0 < m < N / 2:
                F = np.hstack(parts)
                WF = W_diag[:, None] * F
                M = np.eye(m) + F.T @ WF
                self._cho = scipy.linalg.cho_factor(0.5 * (M + M.T))
                self._WF = WF
                self._woodbury = True
            else:
                V = np.diag(1.0 / W_diag)
                for blk, s2 in zip(blocks, sigma2_vec):
                    V += s2 * blk.G
                self._cho = scipy.linalg.cho_factor(0.5 * (V + V.T))
                self._woodbury = False
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"working covariance is not positive definite{context}"
            ) from exc

    def solve(self, B: np.ndarray) -> np.ndarray:
        """V^{-1} B for a vector or matrix B."""
        if self._woodbury:
            WB = self.W_diag[:, None] * B if B.ndim == 2 else self.W_diag * B
            correction = self._WF @ scipy.linalg.cho_solve(self._cho, self._WF.T @ B)
            return WB - correction
        return scipy.linalg.cho_solve(self._cho, B)

    def inverse(self) -> np.ndarray:
        """Dense V^{-1}."""
        if self._woodbury:
            Vinv = np.diag(self.W_diag) - self._WF @ scipy.linalg.cho_solve(
                self._cho, self._WF.T
            )
        else:
            Vinv = scipy.linalg.cho_solve(self._cho, np.eye(self.W_diag.size))
        return 0.5 * (Vinv + Vinv.T)


def _sigma2_vector(bundle: DesignBundle, sigma2: dict[str, float]) -> np.ndarray:
    labels = [blk.label for blk in bundle.blocks]
    missing = [lab for lab in labels if lab not in sigma2]
    extra = [lab for lab in sigma2 if lab not in labels]
    if missing or extra:
        raise ValidationError(
            f"variance component labels do not match bundle blocks "
            f"(missing {missing}, extra {extra})"
        )
    return np.array([max(float(sigma2[lab]), SIGMA2_FLOOR) for lab in labels])


def irls_inner(
    bundle: DesignBundle,
    data: Dataset,
    sigma2: dict[str, float],
    start: np.ndarray | None = None,
    tol: float = 1e-6,
    max_inner: int = 50,
) -> InnerFit:
    """Inner IRLS loop: fit the working model at fixed variance components.

    Iterates working vector construction and GLS/BLUP solves until the
    linear predictor is stable. Steps that overflow the Poisson mean are
    halved up to 20 times before failing.

    Returns
    -------
    InnerFit
        With W_diag equal to the fitted means at the returned solution.
    """
    offset = np.log(data.expected)
    O = data.observed
    X = bundle.X_star
    blocks = bundle.blocks
    sigma2_vec = _sigma2_vector(bundle, sigma2)

    if start is None:
        eta = np.log(np.maximum(O, 0.5)) - offset
    else:
        eta = np.asarray(start, dtype=float).copy()
    mu = np.exp(offset + eta)

    beta = np.zeros(X.shape[1])
    coefficients: dict[str, np.ndarray] = {blk.label: np.zeros(blk.q) for blk in blocks}
    converged = False
    iterations = 0
    for inner in range(1, max_inner + 1):
        iterations = inner
        W = np.maximum(mu, WEIGHT_FLOOR)
        ostar = eta + (O - mu) / W
        solver = _WorkingSolver(W, blocks, sigma2_vec, context=f" at inner iteration {inner}")
        VinvX = solver.solve(X)
        XtVinvX = X.T @ VinvX
        try:
            cho = scipy.linalg.cho_factor(0.5 * (XtVinvX + XtVinvX.T))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"normal equations singular at inner iteration {inner}"
            ) from exc
        beta = scipy.linalg.cho_solve(cho, VinvX.T @ ostar)
        resid_weighted = solver.solve(ostar - X @ beta)
        eta_new = X @ beta
        for blk, s2 in zip(blocks, sigma2_vec):
            u = s2 * (blk.C @ (blk.Z.T @ resid_weighted))
            coefficients[blk.label] = u
            eta_new = eta_new + blk.Z @ u

        step = eta_new - eta
        for _ in range(MAX_STEP_HALVINGS + 1):
            mu_new = np.exp(offset + eta + step)
            if np.all(np.isfinite(mu_new)) and mu_new.max() < 1e280:
                break
            step = 0.5 * step
        else:
            raise NumericalError(
                f"Poisson mean overflow persists after {MAX_STEP_HALVINGS} "
                f"step halvings at inner iteration {inner}"
            )
        delta = np.max(np.abs(step)) / max(np.max(np.abs(eta + step)), 1.0)
        eta = eta + step
        mu = mu_new
        if delta <= tol:
            converged = True
            break

    W = np.maximum(mu, WEIGHT_FLOOR)
    return InnerFit(
        beta=beta,
        coefficients=dict(coefficients),
        eta=eta,
        mu=mu,
        W_diag=W,
        working_response=eta + (O - mu) / W,
        iterations=iterations,
        converged=converged,
    )


def _projection_traces(solver: _WorkingSolver, X: np.ndarray, blocks):
    """REML projection P and the products P G_k with their traces."""
    Vinv = solver.inverse()
    VinvX = Vinv @ X
    XtVinvX = X.T @ VinvX
    try:
        cho = scipy.linalg.cho_factor(0.5 * (XtVinvX + XtVinvX.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("normal equations singular in variance step") from exc
    P = Vinv - VinvX @ scipy.linalg.cho_solve(cho, VinvX.T)
    P = 0.5 * (P + P.T)
    PG = [P @ blk.G for blk in blocks]
    tr_PG = np.array([np.trace(M) for M in PG])
    return P, PG, tr_PG


def _reml_quantities(solver: _WorkingSolver, X: np.ndarray, blocks, ostar: np.ndarray):
    """REML score, Fisher information and tr(P G_k) at the current state."""
    P, PG, tr_PG = _projection_traces(solver, X, blocks)
    Py = P @ ostar
    quad = np.array([Py @ (blk.G @ Py) for blk in blocks])
    score = -0.5 * (tr_PG - quad)
    k = len(blocks)
    info = np.empty((k, k))
    for a in range(k):
        for b in range(a, k):
            info[a, b] = info[b, a] = 0.5 * float(np.sum(PG[a] * PG[b].T))
    return score, info, tr_PG


def _variance_step(sigma2_vec: np.ndarray, score: np.ndarray, info: np.ndarray, ranks):
    """One scoring step, with the EM fallback when the information is not PD."""
    try:
        np.linalg.cholesky(info)
        step = np.linalg.solve(info, score)
        if not np.all(np.isfinite(step)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        step = 2.0 * sigma2_vec**2 / np.asarray(ranks, dtype=float) * score
        for _ in range(MAX_STEP_HALVINGS):
            if np.all(sigma2_vec + step > 0):
                break
            step = 0.5 * step
    return np.maximum(sigma2_vec + step, SIGMA2_FLOOR)


def update_variance_components(state: PQLState) -> VarianceComponents:
    """One REML Fisher-scoring step on the working linear mixed model.

    Scores and information are evaluated at ``state``; iterating this
    update at fixed weights and working response converges to the REML
    estimate of the working model.
    """
    bundle = state.bundle
    blocks = bundle.blocks
    if not blocks:
        return VarianceComponents(sigma2={}, standard_errors={}, at_boundary={})
    sigma2_vec = _sigma2_vector(bundle, state.sigma2)
    solver = _WorkingSolver(state.W_diag, blocks, sigma2_vec, context=" in variance step")
    score, info, _ = _reml_quantities(solver, bundle.X_star, blocks, state.working_response)
    new_vec = _variance_step(sigma2_vec, score, info, [blk.C_rank for blk in blocks])
    ses = _information_standard_errors(info)
    labels = [blk.label for blk in blocks]
    return VarianceComponents(
        sigma2={lab: float(v) for lab, v in zip(labels, new_vec)},
        standard_errors={lab: float(se) for lab, se in zip(labels, ses)},
        at_boundary={lab: bool(v <= SIGMA2_FLOOR * 1.01) for lab, v in zip(labels, new_vec)},
    )


def _information_standard_errors(info: np.ndarray) -> np.ndarray:
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    diag = np.diag(cov).copy()
    diag[diag < 0] = np.nan
    return np.sqrt(diag)


def warm_start_from(previous: FitResult) -> VarianceComponents:
    """Variance components of a converged fit, reusable as initial values."""
    if not previous.converged:
        raise ConvergenceError(
            "cannot warm-start from a fit that did not converge"
        )
    return previous.variance_components


def _natural_scale_effects(bundle: DesignBundle, coefficients) -> dict[str, np.ndarray]:
    """Map block coefficients to per-area/per-period vectors where possible."""
    S = bundle.S
    effects = {}
    for blk in bundle.blocks:
        contribution = blk.Z @ coefficients[blk.label]
        if blk.label == "spatial" and blk.label not in bundle.restrict_blocks:
            effects[blk.label] = contribution[:S]
        elif blk.label == "temporal" and blk.label not in bundle.restrict_blocks:
            effects[blk.label] = contribution[::S]
        else:
            effects[blk.label] = contribution
    return effects


def _relative_change(new: np.ndarray, old: np.ndarray | None) -> float:
    if old is None:
        return np.inf
    denom = max(float(np.max(np.abs(new))), 1e-8)
    return float(np.max(np.abs(new - old))) / denom


def fit(bundle: DesignBundle, data: Dataset, opts: PQLOptions | None = None) -> FitResult:
    """Fit a design bundle to a dataset by penalized quasi-likelihood.

    The outer loop alternates a fully converged inner IRLS pass with one
    REML scoring step in the variance components, stopping when the
    relative changes in beta and every sigma2 drop below ``opts.tol``.
    A final inner pass at the converged variances makes the reported
    estimates self-consistent. ST1 bundles reduce to a Poisson GLM fit.

    Returns
    -------
    FitResult
        With ``converged=False`` (never an exception) when the iteration
        limit is reached.
    """
    opts = opts or PQLOptions()
    if bundle.n_obs != data.n_obs or bundle.S != data.S or bundle.T != data.T:
        raise ValidationError(
            f"bundle is for S={bundle.S}, T={bundle.T}; data has S={data.S}, T={data.T}"
        )
    # Deviance lives in diagnostics, which imports nothing from here eagerly.
    from .diagnostics import poisson_deviance

    X = bundle.X_star
    blocks = bundle.blocks
    labels = [blk.label for blk in blocks]
    inner_tol = opts.tol / 10.0

    if not blocks:
        inner = irls_inner(bundle, data, {}, None, tol=inner_tol, max_inner=opts.max_inner)
        solver = _WorkingSolver(inner.W_diag, blocks, np.empty(0), context=" at GLM solution")
        vc = VarianceComponents(sigma2={}, standard_errors={}, at_boundary={})
        return _assemble_result(
            bundle, data, inner, solver, vc,
            effective_df=float(X.shape[1]),
            converged=inner.converged,
            iterations=inner.iterations,
            deviance=poisson_deviance(data.observed, inner.mu),
            tol=opts.tol,
        )

    if opts.warm_start is not None:
        sigma2_vec = _sigma2_vector(bundle, opts.warm_start.sigma2)
    else:
        sigma2_vec = np.full(len(blocks), float(opts.sigma2_init))
    ranks = [blk.C_rank for blk in blocks]

    eta = None
    prev_beta = None
    converged = False
    outer = 0
    for outer in range(1, opts.max_outer + 1):
        inner = irls_inner(
            bundle, data, dict(zip(labels, sigma2_vec)),
            start=eta, tol=inner_tol, max_inner=opts.max_inner,
        )
        eta = inner.eta
        solver = _WorkingSolver(
            inner.W_diag, blocks, sigma2_vec, context=f" at outer iteration {outer}"
        )
        score, info, _ = _reml_quantities(solver, X, blocks, inner.working_response)
        new_vec = _variance_step(sigma2_vec, score, info, ranks)

        delta_beta = _relative_change(inner.beta, prev_beta)
        deltas_sigma = []
        for new, old in zip(new_vec, sigma2_vec):
            if new <= SIGMA2_FLOOR * 1.01 and old <= SIGMA2_FLOOR * 1.01:
                deltas_sigma.append(0.0)
            else:
                deltas_sigma.append(abs(new - old) / max(new, 1e-8))
        prev_beta = inner.beta
        sigma2_vec = new_vec
        if max(delta_beta, max(deltas_sigma)) <= opts.tol:
            converged = True
            break

    # Final inner pass at the converged variances, then the information
    # for standard errors and the hat-trace degrees of freedom.
    inner = irls_inner(
        bundle, data, dict(zip(labels, sigma2_vec)),
        start=eta, tol=inner_tol, max_inner=opts.max_inner,
    )
    solver = _WorkingSolver(inner.W_diag, blocks, sigma2_vec, context=" at solution")
    score, info, tr_PG = _reml_quantities(solver, X, blocks, inner.working_response)
    ses = _information_standard_errors(info)
    vc = VarianceComponents(
        sigma2={lab: float(v) for lab, v in zip(labels, sigma2_vec)},
        standard_errors={lab: float(se) for lab, se in zip(labels, ses)},
        at_boundary={
            lab: bool(v <= SIGMA2_FLOOR * 1.01) for lab, v in zip(labels, sigma2_vec)
        },
    )
    effective_df = float(X.shape[1] + float(sigma2_vec @ tr_PG))
    return _assemble_result(
        bundle, data, inner, solver, vc,
        effective_df=effective_df,
        converged=converged and inner.converged,
        iterations=outer,
        deviance=poisson_deviance(data.observed, inner.mu),
        tol=opts.tol,
    )


def _assemble_result(
    bundle: DesignBundle,
    data: Dataset,
    inner: InnerFit,
    solver: _WorkingSolver,
    vc: VarianceComponents,
    effective_df: float,
    converged: bool,
    iterations: int,
    deviance: float,
    tol: float,
) -> FitResult:
    X = bundle.X_star
    VinvX = solver.solve(X)
    XtVinvX = X.T @ VinvX
    try:
        cho = scipy.linalg.cho_factor(0.5 * (XtVinvX + XtVinvX.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("normal equations singular at solution") from exc
    beta_cov = scipy.linalg.cho_solve(cho, np.eye(X.shape[1]))
    term_names = ("intercept",) + tuple(data.covariate_names)
    return FitResult(
        variant=bundle.variant,
        S=bundle.S,
        T=bundle.T,
        beta=inner.beta,
        beta_cov=0.5 * (beta_cov + beta_cov.T),
        term_names=term_names,
        random_effects=_natural_scale_effects(bundle, inner.coefficients),
        coefficients=dict(inner.coefficients),
        variance_components=vc,
        fitted_mu=inner.mu,
        linear_predictor=inner.eta,
        working_weights=inner.W_diag,
        converged=converged,
        iterations=iterations,
        deviance=deviance,
        effective_df=effective_df,
        standardization=bundle.standardization,
        tol=tol,
    )
