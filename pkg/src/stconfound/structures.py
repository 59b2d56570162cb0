"""Precision matrices for areal spatio-temporal models and their eigen-splits.

Three structure matrices are used throughout:

    spatial   : the neighbourhood matrix of the areal graph
                (degree on the diagonal, -1 for each neighbour pair),
                rank S-1 on a connected map with kernel span{1_S};
    temporal  : the first-order random-walk structure matrix,
                tridiagonal (1, 2, ..., 2, 1) / -1, rank T-1,
                kernel span{1_T};
    interaction : the Kronecker product Q_temporal (x) Q_spatial,
                acting on vectors stacked area-fastest within time,
                kernel dimension S + T - 1.

Each matrix is decomposed once into an orthonormal kernel basis, an
orthonormal range basis, and the strictly positive range eigenvalues.
The interaction split is assembled from the factor splits (Kronecker
products of the factor eigenblocks), never by re-decomposing the
TS x TS matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DisconnectedGraphError, ValidationError

# Relative thresholds for classifying eigenvalues of a PSD structure matrix.
NULL_EIGENVALUE_RTOL = 1e-10
PSD_RTOL = 1e-8


@dataclass(frozen=True)
class SpatialGraph:
    """Areal adjacency structure: ``n_areas`` districts and unordered neighbour pairs.

    Edges are 1-based ``(i, j)`` pairs with ``i != j``; duplicates and
    self-loops are rejected, and the graph must be connected.
    """

    n_areas: int
    edges: tuple[tuple[int, int], ...]

    def __init__(self, n_areas: int, edges) -> None:
        if n_areas < 1:
            raise ValidationError(f"n_areas must be positive, got {n_areas}")
        canon = []
        seen = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValidationError(f"self-loop on area {i}")
            if not (1 <= i <= n_areas and 1 <= j <= n_areas):
                raise ValidationError(f"edge ({i}, {j}) outside 1..{n_areas}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValidationError(f"duplicate edge ({i}, {j})")
            seen.add(key)
            canon.append(key)
        object.__setattr__(self, "n_areas", n_areas)
        object.__setattr__(self, "edges", tuple(sorted(canon)))
        comps = self._components()
        if len(comps) > 1:
            raise DisconnectedGraphError(comps)

    def _components(self) -> list[list[int]]:
        neighbours: dict[int, list[int]] = {i: [] for i in range(1, self.n_areas + 1)}
        for i, j in self.edges:
            neighbours[i].append(j)
            neighbours[j].append(i)
        unvisited = set(range(1, self.n_areas + 1))
        comps = []
        while unvisited:
            start = min(unvisited)
            stack, comp = [start], []
            unvisited.discard(start)
            while stack:
                node = stack.pop()
                comp.append(node)
                for nb in neighbours[node]:
                    if nb in unvisited:
                        unvisited.discard(nb)
                        stack.append(nb)
            comps.append(comp)
        return comps

    @classmethod
    def from_matrix(cls, adjacency: np.ndarray) -> "SpatialGraph":
        """Build a graph from a symmetric 0/1 adjacency matrix."""
        A = np.asarray(adjacency)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValidationError(f"adjacency matrix must be square, got shape {A.shape}")
        if not np.array_equal(A, A.T):
            raise ValidationError("adjacency matrix must be symmetric")
        if not np.isin(A, (0, 1)).all():
            raise ValidationError("adjacency matrix entries must be 0 or 1")
        if np.any(np.diag(A) != 0):
            raise ValidationError("adjacency matrix must have a zero diagonal")
        rows, cols = np.nonzero(np.triu(A, k=1))
        edges = [(int(r) + 1, int(c) + 1) for r, c in zip(rows, cols)]
        return cls(A.shape[0], edges)

    @classmethod
    def lattice(cls, rows: int, cols: int) -> "SpatialGraph":
        """Regular rows x cols lattice with rook (4-neighbour) adjacency."""
        if rows < 1 or cols < 1:
            raise ValidationError("lattice dimensions must be positive")
        edges = []
        for r in range(rows):
            for c in range(cols):
                idx = r * cols + c + 1
                if c + 1 < cols:
                    edges.append((idx, idx + 1))
                if r + 1 < rows:
                    edges.append((idx, idx + cols))
        return cls(rows * cols, edges)


@dataclass(frozen=True, eq=False)
class PrecisionSpectrum:
    """A PSD precision matrix with its kernel/range eigen-split.

    ``[U_null : U_range]`` is orthonormal, ``Q @ U_null = 0``,
    ``Q = U_range @ diag(eigvals_range) @ U_range.T`` and the range
    eigenvalues are sorted ascending and strictly positive.
    """

    dim: int
    Q: np.ndarray
    U_null: np.ndarray
    U_range: np.ndarray
    eigvals_range: np.ndarray

    @property
    def kernel_dim(self) -> int:
        return self.U_null.shape[1]

    @property
    def range_dim(self) -> int:
        return self.U_range.shape[1]

    def pinv(self) -> np.ndarray:
        """Moore-Penrose pseudo-inverse, from the stored split."""
        return (self.U_range / self.eigvals_range) @ self.U_range.T


def build_spatial_precision(graph: SpatialGraph) -> np.ndarray:
    """Neighbourhood structure matrix: degree on the diagonal, -1 per neighbour pair.

    Rows sum to zero, so the matrix is PSD of rank S-1 on a connected map.
    """
    S = graph.n_areas
    Q = np.zeros((S, S))
    for i, j in graph.edges:
        Q[i - 1, j - 1] = -1.0
        Q[j - 1, i - 1] = -1.0
        Q[i - 1, i - 1] += 1.0
        Q[j - 1, j - 1] += 1.0
    return Q


def build_rw1_precision(T: int) -> np.ndarray:
    """First-order random-walk structure matrix (T x T, rank T-1)."""
    if T < 2:
        raise ValidationError(f"random-walk structure needs T >= 2, got T={T}")
    Q = np.zeros((T, T))
    idx = np.arange(T - 1)
    Q[idx, idx + 1] = -1.0
    Q[idx + 1, idx] = -1.0
    Q[idx, idx] += 1.0
    Q[idx + 1, idx + 1] += 1.0
    return Q


def _fix_signs(U: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive (deterministic basis)."""
    if U.shape[1] == 0:
        return U
    anchor = np.abs(U).argmax(axis=0)
    signs = np.sign(U[anchor, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def spectral_split(Q: np.ndarray) -> PrecisionSpectrum:
    """Eigen-split of a symmetric PSD matrix into kernel and range parts.

    Eigenvalues with magnitude at most ``1e-10 * lambda_max`` are classified
    as null; an eigenvalue below ``-1e-8 * lambda_max`` raises.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {Q.shape}")
    if not np.allclose(Q, Q.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(Q).max())):
        raise ValidationError("matrix is not symmetric")
    Q = 0.5 * (Q + Q.T)
    eigvals, eigvecs = np.linalg.eigh(Q)
    lam_max = float(eigvals[-1]) if Q.shape[0] else 0.0
    if lam_max < 0:
        raise ValidationError("matrix is not positive semi-definite (all eigenvalues negative)")
    if eigvals[0] < -PSD_RTOL * max(lam_max, 1e-300):
        raise ValidationError(
            f"matrix is not positive semi-definite (min eigenvalue {eigvals[0]:.3e})"
        )
    null_mask = eigvals <= NULL_EIGENVALUE_RTOL * lam_max
    U = _fix_signs(eigvecs)
    return PrecisionSpectrum(
        dim=Q.shape[0],
        Q=Q,
        U_null=U[:, null_mask],
        U_range=U[:, ~null_mask],
        eigvals_range=eigvals[~null_mask].copy(),
    )


def interaction_eigenstructure(
    spatial: PrecisionSpectrum, temporal: PrecisionSpectrum
) -> PrecisionSpectrum:
    """Eigen-split of the interaction precision Q_temporal (x) Q_spatial.

    Assembled from the factor splits: the kernel basis is
    ``[Un_t (x) Un_s : Un_t (x) Ur_s : Ur_t (x) Un_s]``, the range basis
    ``Ur_t (x) Ur_s`` with eigenvalues the products of the factor
    eigenvalues (re-sorted ascending). Vectors are stacked area-fastest
    within time, matching the Kronecker order of the product.
    """
    U_null = np.hstack(
        [
            np.kron(temporal.U_null, spatial.U_null),
            np.kron(temporal.U_null, spatial.U_range),
            np.kron(temporal.U_range, spatial.U_null),
        ]
    )
    U_range = np.kron(temporal.U_range, spatial.U_range)
    eigvals = np.kron(temporal.eigvals_range, spatial.eigvals_range)
    order = np.argsort(eigvals, kind="stable")
    return PrecisionSpectrum(
        dim=spatial.dim * temporal.dim,
        Q=np.kron(temporal.Q, spatial.Q),
        U_null=U_null,
        U_range=U_range[:, order],
        eigvals_range=eigvals[order],
    )


@dataclass(frozen=True, eq=False)
class ModelStructures:
    """The spatial, temporal and interaction splits for one dataset.

    ``temporal`` and ``interaction`` are None in the purely spatial case
    (T = 1), where the temporal and interaction random effects are disabled.
    """

    spatial: PrecisionSpectrum
    temporal: PrecisionSpectrum | None = None
    interaction: PrecisionSpectrum | None = None
    graph: SpatialGraph | None = None


def build_structures(graph: SpatialGraph, T: int) -> ModelStructures:
    """Spectral splits of all precision matrices needed for S areas and T periods."""
    spatial = spectral_split(build_spatial_precision(graph))
    if T == 1:
        return ModelStructures(spatial=spatial, graph=graph)
    temporal = spectral_split(build_rw1_precision(T))
    return ModelStructures(
        spatial=spatial,
        temporal=temporal,
        interaction=interaction_eigenstructure(spatial, temporal),
        graph=graph,
    )
