"""Datasets and design bundles for the spatio-temporal model roster.

Observations are Poisson counts O_it for S areas and T periods, stacked
area-fastest within time, with offsets log e_it and standardized
covariates X. The linear predictor is

    eta = X_* beta + Z_xi xi + Z_gamma gamma + Z_delta delta,

where Z_xi = 1_T (x) I_S, Z_gamma = I_T (x) 1_S and Z_delta = I_TS.
Four variants are assembled:

  ST1  fixed effects only (a Poisson GLM);
  ST2  the identifiable reparameterization: each random effect is
       replaced by its range-eigenbasis coordinates, with diagonal
       prior covariance 1/eigenvalue per coordinate;
  ST3  ST2 with selected blocks premultiplied by the restriction
       operator W^{-1/2} L L' W^{1/2}, removing the part of each block
       that lies along the fixed effects in the W inner product;
  ST4  full-dimension designs with singular prior covariances V_k whose
       null spaces are spanned by weighted orthogonality constraints.

The purely spatial model is the T = 1 case with the temporal and
interaction blocks disabled.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ValidationError
from .projections import constrained_covariance, constraint_matrices, weighted_projector
from .structures import ModelStructures

VARIANTS = ("ST1", "ST2", "ST3", "ST4")
BLOCK_LABELS = ("spatial", "temporal", "interaction")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Complete areal panel: counts, expected counts and covariates.

    Vectors follow the area-fastest layout: entry t*S + s is area s+1 at
    period t+1. ``covariates`` may be raw; design assembly standardizes.
    """

    S: int
    T: int
    observed: np.ndarray
    expected: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        N = self.S * self.T
        observed = np.asarray(self.observed, dtype=float).ravel()
        expected = np.asarray(self.expected, dtype=float).ravel()
        covariates = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        if covariates.size == 0:
            covariates = covariates.reshape(N, 0)
        if self.S < 1 or self.T < 1:
            raise ValidationError("S and T must be positive")
        if observed.shape != (N,):
            raise ValidationError(f"observed has length {observed.size}, expected {N}")
        if expected.shape != (N,):
            raise ValidationError(f"expected has length {expected.size}, expected {N}")
        if covariates.shape[0] != N:
            raise ValidationError(
                f"covariates have {covariates.shape[0]} rows, expected {N}"
            )
        if np.any(observed < 0) or not np.allclose(observed, np.round(observed)):
            raise ValidationError("observed counts must be nonnegative integers")
        if np.any(expected <= 0) or not np.all(np.isfinite(expected)):
            raise ValidationError("expected counts must be strictly positive")
        if not np.all(np.isfinite(covariates)):
            raise ValidationError("covariates must be finite")
        names = tuple(self.covariate_names) or tuple(
            f"x{j + 1}" for j in range(covariates.shape[1])
        )
        if len(names) != covariates.shape[1]:
            raise ValidationError(
                f"{len(names)} covariate names for {covariates.shape[1]} columns"
            )
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "expected", expected)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n_obs(self) -> int:
        return self.S * self.T

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]


def expected_counts(observed, population) -> np.ndarray:
    """Internally standardized expected counts: e = n * (sum O / sum n).

    Totals are conserved: sum(e) equals sum(O).
    """
    O = np.asarray(observed, dtype=float).ravel()
    n = np.asarray(population, dtype=float).ravel()
    if O.shape != n.shape:
        raise ValidationError("observed and population lengths differ")
    if np.any(n <= 0):
        bad = np.flatnonzero(n <= 0)
        raise ValidationError(f"population must be positive everywhere (cells {bad.tolist()})")
    total = n.sum()
    if total <= 0:
        raise ValidationError("total population must be positive")
    return n * (O.sum() / total)


@dataclass(frozen=True)
class StandardizationRecord:
    """Per-column means and scales used to standardize the covariates.

    Scales use the sample (1/(N-1)) variance convention. Suffices to map
    coefficients fitted on the standardized scale back to the raw scale.
    """

    means: tuple[float, ...]
    scales: tuple[float, ...]
    ddof: int = 1

    def beta_to_raw(self, beta: np.ndarray) -> np.ndarray:
        """Map [intercept, coefs] on the standardized scale to the raw scale."""
        beta = np.asarray(beta, dtype=float)
        if beta.size != len(self.means) + 1:
            raise ValidationError(
                f"beta has length {beta.size}, expected {len(self.means) + 1}"
            )
        means = np.array(self.means)
        scales = np.array(self.scales)
        raw = np.empty_like(beta)
        raw[1:] = beta[1:] / scales
        raw[0] = beta[0] - float(raw[1:] @ means)
        return raw


def standardize_covariates(raw: np.ndarray) -> tuple[np.ndarray, StandardizationRecord]:
    """Center and scale each column to mean 0, sample variance 1.

    Already standardized columns pass through unchanged (to round-off).
    A constant column has no scale and is rejected.
    """
    X = np.atleast_2d(np.asarray(raw, dtype=float))
    if X.size == 0:
        X = X.reshape(X.shape[0] if X.ndim == 2 and X.shape[0] else 0, 0)
    means = X.mean(axis=0) if X.shape[0] else np.zeros(X.shape[1])
    scales = X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.ones(X.shape[1])
    if np.any(scales <= 0):
        bad = [f"x{j + 1}" for j in np.flatnonzero(scales <= 0)]
        raise ValidationError(f"constant covariate columns cannot be standardized: {bad}")
    return (X - means) / scales, StandardizationRecord(
        means=tuple(float(m) for m in means), scales=tuple(float(s) for s in scales)
    )


@dataclass(frozen=True)
class ModelSpec:
    """Which model variant to assemble and how.

    ``restrict_blocks`` applies to ST3 only and defaults to all three
    blocks; ``weight_source`` records where the frozen weights for
    ST3/ST4 come from.
    """

    variant: str
    restrict_blocks: tuple[str, ...] = BLOCK_LABELS
    weight_source: str = "from_ST2_fit"

    def __post_init__(self):
        variant = str(self.variant).upper()
        if variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "variant", variant)
        blocks = tuple(self.restrict_blocks)
        unknown = [b for b in blocks if b not in BLOCK_LABELS]
        if unknown:
            raise ValidationError(f"unknown restrict blocks {unknown}; expected {BLOCK_LABELS}")
        if variant == "ST3" and not blocks:
            raise ValidationError("ST3 requires at least one restricted block")
        object.__setattr__(self, "restrict_blocks", blocks)
        if self.weight_source not in ("from_ST2_fit", "user_supplied"):
            raise ValidationError(f"unknown weight_source {self.weight_source!r}")


@dataclass(frozen=True, eq=False)
class RandomBlock:
    """One random-effect block: design Z, prior covariance C at unit variance.

    ``C`` may be singular (ST4's constrained covariances); ``C_rank`` is
    its rank, used as the effective coordinate count. ``constraints``
    carries the rows B that span the null space of C, when applicable.
    """

    label: str
    Z: np.ndarray
    C: np.ndarray
    C_rank: int
    constraints: np.ndarray | None = None

    @cached_property
    def G(self) -> np.ndarray:
        """Z C Z', the block's unit-variance contribution to the marginal covariance."""
        return self.Z @ self.C @ self.Z.T

    @cached_property
    def root(self) -> np.ndarray:
        """A factor F with F F' = Z C Z'; column count is the rank of C."""
        eigvals, eigvecs = np.linalg.eigh(0.5 * (self.C + self.C.T))
        lam_max = max(float(eigvals[-1]), 0.0)
        keep = eigvals > 1e-12 * lam_max if lam_max > 0 else np.zeros(eigvals.size, bool)
        return self.Z @ (eigvecs[:, keep] * np.sqrt(eigvals[keep]))

    @property
    def q(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True, eq=False)
class DesignBundle:
    """Everything a fit needs: fixed design, random blocks, bookkeeping.

    ``W_design`` is the frozen weight vector used to build restriction
    operators or constraints (None for ST1/ST2). ``X_std`` is the
    standardized covariate matrix (no intercept).
    """

    variant: str
    S: int
    T: int
    X_star: np.ndarray
    blocks: tuple[RandomBlock, ...]
    standardization: StandardizationRecord
    X_std: np.ndarray
    W_design: np.ndarray | None = None
    restrict_blocks: tuple[str, ...] = ()

    @property
    def n_obs(self) -> int:
        return self.X_star.shape[0]

    @property
    def p(self) -> int:
        return self.X_star.shape[1] - 1

    def block(self, label: str) -> RandomBlock:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)


def _base_blocks(structures: ModelStructures, S: int, T: int) -> list[RandomBlock]:
    """ST2 blocks: range-eigenbasis designs with diagonal unit covariances."""
    sp = structures.spatial
    blocks = [
        RandomBlock(
            label="spatial",
            Z=np.kron(np.ones((T, 1)), sp.U_range),
            C=np.diag(1.0 / sp.eigvals_range),
            C_rank=sp.range_dim,
        )
    ]
    if T > 1:
        tm = structures.temporal
        it = structures.interaction
        blocks.append(
            RandomBlock(
                label="temporal",
                Z=np.kron(tm.U_range, np.ones((S, 1))),
                C=np.diag(1.0 / tm.eigvals_range),
                C_rank=tm.range_dim,
            )
        )
        blocks.append(
            RandomBlock(
                label="interaction",
                Z=it.U_range,
                C=np.diag(1.0 / it.eigvals_range),
                C_rank=it.range_dim,
            )
        )
    return blocks


def build_design(
    spec: ModelSpec,
    data: Dataset,
    structures: ModelStructures,
    W_diag=None,
) -> DesignBundle:
    """Assemble the design bundle for one model variant.

    Parameters
    ----------
    spec : ModelSpec
    data : Dataset
    structures : ModelStructures
        Spectral splits for the dataset's graph and period count.
    W_diag : array_like, optional
        Frozen working weights; required for ST3 and ST4, ignored
        otherwise. Conventionally the converged ST2 weights.

    Raises
    ------
    ValidationError
        On dimension mismatches or when ST3/ST4 weights are missing.
    """
    S, T, N = data.S, data.T, data.n_obs
    if structures.spatial.dim != S:
        raise ValidationError(
            f"spatial structure has dimension {structures.spatial.dim}, data has S={S}"
        )
    if T > 1 and (structures.temporal is None or structures.temporal.dim != T):
        raise ValidationError(f"temporal structure missing or wrong size for T={T}")
    X_std, record = standardize_covariates(data.covariates)
    X_star = np.hstack([np.ones((N, 1)), X_std])

    if spec.variant == "ST1":
        return DesignBundle(
            variant="ST1", S=S, T=T, X_star=X_star, blocks=(),
            standardization=record, X_std=X_std,
        )

    if spec.variant == "ST2":
        return DesignBundle(
            variant="ST2", S=S, T=T, X_star=X_star,
            blocks=tuple(_base_blocks(structures, S, T)),
            standardization=record, X_std=X_std,
        )

    if W_diag is None:
        raise ValidationError(
            f"{spec.variant} needs frozen working weights (fit ST2 first or supply them)"
        )
    w = np.asarray(W_diag, dtype=float).ravel()
    if w.shape != (N,) or np.any(w <= 0):
        raise ValidationError(f"weights must be {N} positive values")

    if spec.variant == "ST3":
        proj = weighted_projector(X_std, w)
        restricted = tuple(b for b in spec.restrict_blocks if T > 1 or b == "spatial")
        blocks = []
        for blk in _base_blocks(structures, S, T):
            if blk.label in restricted:
                blk = RandomBlock(
                    label=blk.label, Z=proj.restrict(blk.Z), C=blk.C, C_rank=blk.C_rank
                )
            blocks.append(blk)
        return DesignBundle(
            variant="ST3", S=S, T=T, X_star=X_star, blocks=tuple(blocks),
            standardization=record, X_std=X_std, W_design=w,
            restrict_blocks=restricted,
        )

    # ST4: full-dimension designs with constrained prior covariances.
    cons = constraint_matrices(X_std, w, S, T)
    spatial_cov = constrained_covariance(structures.spatial.Q, cons.B_spatial)
    blocks = [
        RandomBlock(
            label="spatial",
            Z=np.kron(np.ones((T, 1)), np.eye(S)),
            C=spatial_cov.V,
            C_rank=spatial_cov.L_basis.shape[1],
            constraints=cons.B_spatial,
        )
    ]
    if T > 1:
        temporal_cov = constrained_covariance(structures.temporal.Q, cons.B_temporal)
        interaction_cov = constrained_covariance(
            structures.interaction.Q, cons.B_interaction
        )
        blocks.append(
            RandomBlock(
                label="temporal",
                Z=np.kron(np.eye(T), np.ones((S, 1))),
                C=temporal_cov.V,
                C_rank=temporal_cov.L_basis.shape[1],
                constraints=cons.B_temporal,
            )
        )
        blocks.append(
            RandomBlock(
                label="interaction",
                Z=np.eye(N),
                C=interaction_cov.V,
                C_rank=interaction_cov.L_basis.shape[1],
                constraints=cons.B_interaction,
            )
        )
    return DesignBundle(
        variant="ST4", S=S, T=T, X_star=X_star, blocks=tuple(blocks),
        standardization=record, X_std=X_std, W_design=w,
    )
