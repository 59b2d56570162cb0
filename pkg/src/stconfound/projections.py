"""Projectors and constraint algebra for alleviating confounding.

Two devices are built here, both relative to the converged working
weights W of an unrestricted fit and the fixed design X_* = [1 : X]:

  * restricted regression uses the weighted residual projector
        P^c = I - W^{1/2} X_* (X_*' W X_*)^{-1} X_*' W^{1/2},
    whose eigenvalue-1 eigenvectors L give the restriction operator
    W^{-1/2} L L' W^{1/2} that strips from any random-effect design the
    part lying along the fixed effects;

  * orthogonality constraints use matrices B whose rows are weighted
    sums of the random effects against the fixed-effect columns.  A
    Gaussian prior with precision Q restricted to {u : B u = 0} has
    covariance V = L (L' Q L)^{-1} L' where L spans the null space of B,
    and the corresponding oblique projector P = L (L' Q L)^{-1} L' Q
    maps any vector onto that set along Q-orthogonal directions.

Conditioning by kriging, Q+ - Q+ B' (B Q+ B')^{-1} B Q+ with Q+ the
Moore-Penrose inverse, is also provided: it agrees with V only when the
rows of B span the kernel of Q, and otherwise zeroes the kernel as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import CollinearityError, IllPosedConstraintsError, ValidationError
from .structures import spectral_split

# Eigenvalues of a projection matrix are 0 or 1 up to round-off; 0.5 is
# the maximally separated classification threshold.
PROJECTION_EIGENVALUE_THRESHOLD = 0.5


def _fix_signs(U: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    if U.shape[1] == 0:
        return U
    anchor = np.abs(U).argmax(axis=0)
    signs = np.sign(U[anchor, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def _as_weight_vector(W_diag, N: int) -> np.ndarray:
    w = np.asarray(W_diag, dtype=float).ravel()
    if w.shape != (N,):
        raise ValidationError(f"weight vector has length {w.size}, expected {N}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValidationError("weights must be finite and strictly positive")
    return w


def _with_intercept(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.size == 0:
        X = X.reshape(X.shape[0] if X.ndim == 2 and X.shape[0] else 0, 0)
    if X.ndim != 2:
        raise ValidationError(f"covariate matrix must be 2-d, got {X.ndim}-d")
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _dependent_columns(M: np.ndarray) -> list[str]:
    """Greedy scan naming the columns that add no rank (0 = intercept)."""
    labels = ["intercept"] + [f"x{j}" for j in range(1, M.shape[1])]
    kept: list[int] = []
    dependent = []
    for j in range(M.shape[1]):
        trial = M[:, kept + [j]]
        if np.linalg.matrix_rank(trial) == len(kept) + 1:
            kept.append(j)
        else:
            dependent.append(labels[j])
    return dependent


@dataclass(frozen=True, eq=False)
class WeightedProjector:
    """Weighted residual projector split into fixed and complement bases.

    ``K`` is an orthonormal basis of col(W^{1/2} X_*) and ``L`` an
    orthonormal basis of its orthogonal complement, so
    K K' + L L' = I and L L' is the residual projector P^c.
    """

    W_diag: np.ndarray
    K: np.ndarray
    L: np.ndarray
    X_star: np.ndarray

    @property
    def n(self) -> int:
        return self.W_diag.size

    def residual_projector(self) -> np.ndarray:
        """P^c = L L' = I - K K'."""
        return self.L @ self.L.T

    def restrict(self, Z: np.ndarray) -> np.ndarray:
        """Apply the restriction operator W^{-1/2} L L' W^{1/2} to a design.

        The result is orthogonal to X_* in the W inner product:
        X_*' W (restricted Z) = 0.
        """
        Z = np.asarray(Z, dtype=float)
        if Z.shape[0] != self.n:
            raise ValidationError(f"design has {Z.shape[0]} rows, expected {self.n}")
        sw = np.sqrt(self.W_diag)
        return (self.L @ (self.L.T @ (sw[:, None] * Z))) / sw[:, None]


def weighted_projector(X: np.ndarray, W_diag) -> WeightedProjector:
    """Split R^N into the weighted fixed-effect space and its complement.

    Parameters
    ----------
    X : ndarray, shape (N, p)
        Covariate matrix without intercept; the intercept column is
        prepended internally to form X_*.
    W_diag : array_like, shape (N,)
        Positive working weights.

    Returns
    -------
    WeightedProjector
        K spans col(W^{1/2} X_*); L its orthogonal complement, with
        exactly N - p - 1 columns.

    Raises
    ------
    CollinearityError
        If X_* is rank deficient, naming the dependent columns.
    """
    X_star = _with_intercept(X)
    N, k = X_star.shape
    w = _as_weight_vector(W_diag, N)
    M = np.sqrt(w)[:, None] * X_star
    if np.linalg.matrix_rank(M) < k:
        raise CollinearityError(_dependent_columns(M))
    # Residual projector; eigenvalues are 0 (fixed space) or 1 (complement).
    Qm, _ = np.linalg.qr(M)
    Pc = np.eye(N) - Qm @ Qm.T
    eigvals, eigvecs = np.linalg.eigh(Pc)
    mask = eigvals > PROJECTION_EIGENVALUE_THRESHOLD
    if int(mask.sum()) != N - k:
        raise ValidationError(
            f"projector split found {int(mask.sum())} complement directions, expected {N - k}"
        )
    U = _fix_signs(eigvecs)
    return WeightedProjector(W_diag=w, K=U[:, ~mask], L=U[:, mask], X_star=X_star)


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Weighted-sum constraint matrices for the three random-effect blocks.

    Rows of ``B_spatial`` ((p+1) x S) are the per-area weighted sums of
    each fixed-effect column; ``B_temporal`` ((p+1) x T) the per-period
    sums; ``B_interaction`` ((S+T-1+p) x TS) stacks the per-area and
    per-period sum rows and the covariate rows, with one redundant sum
    row removed so it has full row rank.
    """

    B_spatial: np.ndarray
    B_temporal: np.ndarray
    B_interaction: np.ndarray


def constraint_matrices(
    X: np.ndarray, W_diag, S: int, T: int, *, drop_temporal_row: int | None = None
) -> ConstraintSet:
    """Constraint matrices making each random-effect block orthogonal to X_*.

    The observation vector is stacked area-fastest within time, so the
    spatial design is 1_T (x) I_S and the temporal design I_T (x) 1_S.

    Parameters
    ----------
    X : ndarray, shape (TS, p)
    W_diag : array_like, shape (TS,)
    S, T : int
    drop_temporal_row : int, optional
        Which of the T per-period sum rows to remove from the interaction
        stack (any choice spans the same row space once the global-sum
        redundancy is accounted for). Defaults to the last.

    Returns
    -------
    ConstraintSet
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N = S * T
    if X.shape[0] != N:
        raise ValidationError(f"covariates have {X.shape[0]} rows, expected S*T = {N}")
    w = _as_weight_vector(W_diag, N)
    X_star = _with_intercept(X)
    WX = w[:, None] * X_star

    Z_spatial = np.tile(np.eye(S), (T, 1))
    Z_temporal = np.kron(np.eye(T), np.ones((S, 1)))
    B_spatial = WX.T @ Z_spatial
    B_temporal = WX.T @ Z_temporal

    if drop_temporal_row is None:
        drop_temporal_row = T - 1
    if not (0 <= drop_temporal_row < T):
        raise ValidationError(f"drop_temporal_row must be in 0..{T - 1}")
    keep = [t for t in range(T) if t != drop_temporal_row]
    # The global sum row is already redundant (it is the sum of the per-area
    # rows); one per-period row is dropped to remove the remaining dependence
    # among the S + T sum rows.
    B_interaction = np.vstack(
        [
            (w[:, None] * Z_spatial).T,
            (w[:, None] * Z_temporal[:, keep]).T,
            (w[:, None] * X).T,
        ]
    )
    return ConstraintSet(
        B_spatial=B_spatial, B_temporal=B_temporal, B_interaction=B_interaction
    )


def _nullspace_basis(B: np.ndarray, n: int) -> np.ndarray:
    """Orthonormal basis of {u : B u = 0} via the row-space projector."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.size == 0:
        return np.eye(n)
    if B.shape[1] != n:
        raise ValidationError(f"constraint matrix has {B.shape[1]} columns, expected {n}")
    P_row = B.T @ np.linalg.pinv(B @ B.T) @ B
    eigvals, eigvecs = np.linalg.eigh(np.eye(n) - P_row)
    mask = eigvals > PROJECTION_EIGENVALUE_THRESHOLD
    return _fix_signs(eigvecs[:, mask])


def _solve_reduced_precision(Q: np.ndarray, L: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve (L' Q L) y = rhs, failing if the constraints leave Q's kernel in play."""
    M = L.T @ Q @ L
    eigvals, eigvecs = np.linalg.eigh(0.5 * (M + M.T))
    if M.shape[0] and eigvals[0] <= 1e-10 * max(eigvals[-1], 0.0):
        raise IllPosedConstraintsError(
            "constraints do not exclude the kernel of the precision matrix; "
            "the restricted prior is improper"
        )
    return eigvecs @ ((eigvecs.T @ rhs) / eigvals[:, None])


def oblique_projector(Q: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Oblique projector onto {u : B u = 0} along Q-orthogonal directions.

    P = L (L' Q L)^{-1} L' Q with L an orthonormal basis of the null
    space of B. P is idempotent, annihilated by B on the left range,
    and the identity on range(L); it is not symmetric unless the
    constraint directions happen to be Q-invariant.
    """
    Q = np.asarray(Q, dtype=float)
    n = Q.shape[0]
    L = _nullspace_basis(B, n)
    P = L @ _solve_reduced_precision(Q, L, L.T @ Q)
    return P, L


@dataclass(frozen=True, eq=False)
class ConstrainedCovariance:
    """Covariance of a Gaussian with precision Q constrained to B u = 0.

    V = L (L' Q L)^{-1} L'; satisfies B V = 0 and V Q V = V, and its null
    space is exactly the row space of B.
    """

    V: np.ndarray
    L_basis: np.ndarray


def constrained_covariance(Q: np.ndarray, B: np.ndarray) -> ConstrainedCovariance:
    """Covariance of the precision-Q Gaussian restricted to {u : B u = 0}."""
    Q = np.asarray(Q, dtype=float)
    L = _nullspace_basis(B, Q.shape[0])
    V = L @ _solve_reduced_precision(Q, L, L.T)
    return ConstrainedCovariance(V=0.5 * (V + V.T), L_basis=L)


def kriging_covariance(Q: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Conditional covariance via generalized-inverse kriging algebra.

    Q+ - Q+ B' (B Q+ B')^{-1} B Q+ with Q+ the Moore-Penrose inverse.
    Because Q+ already annihilates the kernel of Q, the result is
    orthogonal to that kernel in addition to the rows of B, which is the
    known defect of this construction relative to the restricted prior.
    """
    Q = np.asarray(Q, dtype=float)
    Qp = spectral_split(Q).pinv()
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.size == 0:
        return Qp
    if B.shape[1] != Q.shape[0]:
        raise ValidationError(
            f"constraint matrix has {B.shape[1]} columns, expected {Q.shape[0]}"
        )
    QB = Qp @ B.T
    M = B @ QB
    try:
        c, low = scipy.linalg.cho_factor(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        raise IllPosedConstraintsError(
            "B Q+ B' is singular; constraints lie in the kernel of Q"
        ) from exc
    V = Qp - QB @ scipy.linalg.cho_solve((c, low), QB.T)
    return 0.5 * (V + V.T)
