"""Weighted residual projectors, constraint matrices, oblique projections."""

import numpy as np
import pytest
from oracles import conditional_sample_cov, hat_matrix, moment_standard_errors

from stconfound import (
    CollinearityError,
    DesignBundle,
    IllPosedConstraintsError,
    ModelSpec,
    RandomBlock,
    Scenario,
    ValidationError,
    build_design,
    build_rw1_precision,
    constrained_covariance,
    constraint_matrices,
    fit,
    generate,
    kriging_covariance,
    oblique_projector,
    spectral_split,
    standardize_covariates,
    weighted_projector,
)

RW3 = build_rw1_precision(3)
RW5 = build_rw1_precision(5)
W_ROW5 = np.array([[1.0, 2.0, 3.0, 2.0, 1.0]])


# ------------------------------------------------------ weighted projector

def test_unweighted_intercept_only_projector():
    proj = weighted_projector(np.empty((4, 0)), np.ones(4))
    expect = np.eye(4) - np.full((4, 4), 0.25)
    np.testing.assert_allclose(proj.residual_projector(), expect, atol=1e-12)
    assert proj.K.shape == (4, 1)
    assert proj.L.shape == (4, 3)


def test_projector_invariants_random():
    rng = np.random.Generator(np.random.Philox(6))
    for _ in range(5):
        N = int(rng.integers(6, 15))
        p = int(rng.integers(0, 4))
        X = rng.standard_normal((N, p))
        w = rng.lognormal(0.0, 0.6, N)
        proj = weighted_projector(X, w)
        assert proj.L.shape == (N, N - p - 1)
        np.testing.assert_allclose(proj.K.T @ proj.K, np.eye(p + 1), atol=1e-10)
        np.testing.assert_allclose(
            proj.L.T @ proj.L, np.eye(N - p - 1), atol=1e-10
        )
        np.testing.assert_allclose(proj.K.T @ proj.L, 0.0, atol=1e-10)
        np.testing.assert_allclose(
            proj.K @ proj.K.T + proj.L @ proj.L.T, np.eye(N), atol=1e-10
        )


def test_fixed_space_matches_weighted_hat_matrix():
    """K K' is the hat matrix of sqrt(w) X_*, i.e. the conjugated GLS hat."""
    rng = np.random.Generator(np.random.Philox(7))
    X = rng.standard_normal((6, 2))
    w = rng.lognormal(0.0, 0.5, 6)
    proj = weighted_projector(X, w)
    X_star = np.hstack([np.ones((6, 1)), X])
    sw = np.sqrt(w)
    conjugated = sw[:, None] * hat_matrix(X_star, w) / sw[None, :]
    np.testing.assert_allclose(proj.K @ proj.K.T, conjugated, atol=1e-10)


def test_restrict_is_weighted_orthogonal_to_fixed_effects():
    rng = np.random.Generator(np.random.Philox(8))
    X = rng.standard_normal((12, 2))
    w = rng.lognormal(0.0, 0.4, 12)
    proj = weighted_projector(X, w)
    Z = rng.standard_normal((12, 5))
    Zr = proj.restrict(Z)
    X_star = np.hstack([np.ones((12, 1)), X])
    np.testing.assert_allclose(X_star.T @ (w[:, None] * Zr), 0.0, atol=1e-10)
    # Restriction is idempotent.
    np.testing.assert_allclose(proj.restrict(Zr), Zr, atol=1e-10)


def test_restrict_rejects_wrong_row_count():
    proj = weighted_projector(np.empty((4, 0)), np.ones(4))
    with pytest.raises(ValidationError, match="rows"):
        proj.restrict(np.ones((5, 2)))


def test_collinearity_error_names_columns():
    x1 = np.arange(6.0)
    X = np.column_stack([x1, 2.0 * x1])
    with pytest.raises(CollinearityError) as err:
        weighted_projector(X, np.ones(6))
    assert err.value.dependent_columns == ["x2"]
    # A constant column duplicates the intercept.
    with pytest.raises(CollinearityError) as err:
        weighted_projector(np.column_stack([np.full(6, 3.0), x1]), np.ones(6))
    assert err.value.dependent_columns == ["x1"]


def test_projector_weight_validation():
    with pytest.raises(ValidationError, match="length"):
        weighted_projector(np.empty((4, 0)), np.ones(3))
    with pytest.raises(ValidationError, match="positive"):
        weighted_projector(np.empty((4, 0)), np.array([1.0, 1.0, 0.0, 1.0]))


# ---------------------------------------------------- constraint matrices

def test_constraints_unweighted_no_covariates():
    cons = constraint_matrices(np.empty((6, 0)), np.ones(6), S=3, T=2)
    np.testing.assert_allclose(cons.B_spatial, [[2.0, 2.0, 2.0]])
    np.testing.assert_allclose(cons.B_temporal, [[3.0, 3.0]])
    assert cons.B_interaction.shape == (3 + 2 - 1, 6)
    assert np.linalg.matrix_rank(cons.B_interaction) == 4


def test_constraints_match_explicit_sums():
    rng = np.random.Generator(np.random.Philox(9))
    S, T = 3, 2
    X = rng.standard_normal((S * T, 1))
    w = rng.lognormal(0.0, 0.3, S * T)
    cons = constraint_matrices(X, w, S, T)
    X_star = np.hstack([np.ones((S * T, 1)), X])
    for i in range(2):
        for s in range(S):
            total = sum(w[t * S + s] * X_star[t * S + s, i] for t in range(T))
            assert cons.B_spatial[i, s] == pytest.approx(total, abs=1e-12)
        for t in range(T):
            total = sum(w[t * S + s] * X_star[t * S + s, i] for s in range(S))
            assert cons.B_temporal[i, t] == pytest.approx(total, abs=1e-12)


def test_interaction_constraints_shape_and_rank():
    rng = np.random.Generator(np.random.Philox(10))
    S, T, p = 4, 3, 2
    X = rng.standard_normal((S * T, p))
    w = rng.lognormal(0.0, 0.5, S * T)
    B = constraint_matrices(X, w, S, T).B_interaction
    assert B.shape == (S + T - 1 + p, S * T)
    assert np.linalg.matrix_rank(B) == S + T - 1 + p
    # First S rows are the weighted per-area sums.
    for s in range(S):
        expect = np.zeros(S * T)
        for t in range(T):
            expect[t * S + s] = w[t * S + s]
        np.testing.assert_allclose(B[s], expect, atol=1e-14)


def test_interaction_constraint_row_space_is_drop_invariant():
    rng = np.random.Generator(np.random.Philox(11))
    S, T, p = 3, 4, 1
    X = rng.standard_normal((S * T, p))
    w = rng.lognormal(0.0, 0.5, S * T)
    B_last = constraint_matrices(X, w, S, T).B_interaction
    B_first = constraint_matrices(X, w, S, T, drop_temporal_row=0).B_interaction
    k = S + T - 1 + p
    assert np.linalg.matrix_rank(B_last) == k
    assert np.linalg.matrix_rank(B_first) == k
    assert np.linalg.matrix_rank(np.vstack([B_last, B_first])) == k


def test_constraint_validation():
    with pytest.raises(ValidationError, match="rows"):
        constraint_matrices(np.ones((5, 1)), np.ones(6), S=3, T=2)
    with pytest.raises(ValidationError, match="drop_temporal_row"):
        constraint_matrices(np.empty((6, 0)), np.ones(6), S=3, T=2, drop_temporal_row=2)


def _st4_bundle_with_drop(data, structures, w, drop):
    """ST4 bundle assembled by hand so the dropped sum row can be varied."""
    N = data.n_obs
    X_std, record = standardize_covariates(data.covariates)
    X_star = np.hstack([np.ones((N, 1)), X_std])
    cons = constraint_matrices(X_std, w, data.S, data.T, drop_temporal_row=drop)
    covs = {
        "spatial": constrained_covariance(structures.spatial.Q, cons.B_spatial),
        "temporal": constrained_covariance(structures.temporal.Q, cons.B_temporal),
        "interaction": constrained_covariance(structures.interaction.Q, cons.B_interaction),
    }
    designs = {
        "spatial": np.kron(np.ones((data.T, 1)), np.eye(data.S)),
        "temporal": np.kron(np.eye(data.T), np.ones((data.S, 1))),
        "interaction": np.eye(N),
    }
    blocks = tuple(
        RandomBlock(
            label=label,
            Z=designs[label],
            C=covs[label].V,
            C_rank=covs[label].L_basis.shape[1],
        )
        for label in ("spatial", "temporal", "interaction")
    )
    return DesignBundle(
        variant="ST4", S=data.S, T=data.T, X_star=X_star, blocks=blocks,
        standardization=record, X_std=X_std, W_design=np.asarray(w, float),
    )


def test_dropped_row_choice_does_not_change_the_fit(path3, structures_s3t3):
    scenario = Scenario(
        grid=path3, T=3, beta_true=(0.2,),
        sigma2_true={"spatial": 0.4, "temporal": 0.1, "interaction": 0.05},
        confounding_rho=(0.6,), baseline_expected=60.0, seed=5,
    )
    data, _ = generate(scenario)
    st2 = fit(build_design(ModelSpec("ST2"), data, structures_s3t3), data)
    assert st2.converged
    w = st2.working_weights
    fits = [
        fit(_st4_bundle_with_drop(data, structures_s3t3, w, drop), data)
        for drop in (None, 0)
    ]
    np.testing.assert_allclose(fits[0].beta, fits[1].beta, atol=1e-6)
    np.testing.assert_allclose(fits[0].fitted_mu, fits[1].fitted_mu, atol=1e-6)


# ------------------------------------------------------- oblique projector

def test_oblique_projector_invariants():
    rng = np.random.Generator(np.random.Philox(12))
    Q = build_rw1_precision(7)
    B = rng.standard_normal((2, 7)) + 0.5  # generic rows, not in the kernel
    P, L = oblique_projector(Q, B)
    np.testing.assert_allclose(P @ P, P, atol=1e-10)
    np.testing.assert_allclose(B @ P, 0.0, atol=1e-10)
    np.testing.assert_allclose(P @ L, L, atol=1e-10)


def test_oblique_projector_kernel_constraint_is_orthogonal():
    # Constraining away exactly the kernel leaves the orthogonal projector.
    P, _ = oblique_projector(RW3, np.ones((1, 3)))
    np.testing.assert_allclose(P, np.eye(3) - np.full((3, 3), 1.0 / 3.0), atol=1e-12)


def test_oblique_projector_is_genuinely_oblique():
    P, _ = oblique_projector(RW3, np.array([[1.0, 2.0, 1.0]]))
    assert np.max(np.abs(P - P.T)) > 1e-6


def test_oblique_projector_rejects_kernel_leak():
    # u1 = u2 does not exclude the constant vector, so L'QL is singular.
    with pytest.raises(IllPosedConstraintsError):
        oblique_projector(RW3, np.array([[1.0, -1.0, 0.0]]))


# --------------------------------------------------- constrained covariance

def test_constrained_covariance_identity_precision():
    V = constrained_covariance(np.eye(3), np.ones((1, 3))).V
    np.testing.assert_allclose(V, np.eye(3) - np.full((3, 3), 1.0 / 3.0), atol=1e-12)


def test_constrained_covariance_kernel_constraint_is_pinv():
    got = constrained_covariance(RW3, np.ones((1, 3)))
    np.testing.assert_allclose(got.V, np.linalg.pinv(RW3), atol=1e-12)


def test_constrained_covariance_invariants():
    rng = np.random.Generator(np.random.Philox(13))
    for m in (1, 2):
        B = rng.standard_normal((m, 5)) + 0.3
        got = constrained_covariance(RW5, B)
        V = got.V
        np.testing.assert_allclose(B @ V, 0.0, atol=1e-10)
        np.testing.assert_allclose(V @ RW5 @ V, V, atol=1e-10)
        np.testing.assert_allclose(V, V.T, atol=1e-12)
        eigvals = np.linalg.eigvalsh(V)
        assert eigvals.min() > -1e-10
        assert np.linalg.matrix_rank(V, tol=1e-8) == 5 - m
        assert got.L_basis.shape == (5, 5 - m)


def test_projected_pseudoinverse_equals_constrained_covariance():
    """P Q+ P' reproduces the constrained covariance exactly."""
    P, _ = oblique_projector(RW5, W_ROW5)
    V = constrained_covariance(RW5, W_ROW5).V
    Qp = spectral_split(RW5).pinv()
    np.testing.assert_allclose(P @ Qp @ P.T, V, atol=1e-10)


def test_projected_prior_samples_have_constrained_covariance():
    """Monte Carlo: projecting range-space draws yields covariance V."""
    split = spectral_split(RW5)
    P, _ = oblique_projector(RW5, W_ROW5)
    V = constrained_covariance(RW5, W_ROW5).V
    n = 100_000
    emp = conditional_sample_cov(split, P, n, seed=777)
    se = moment_standard_errors(V, n)
    assert np.max(np.abs(emp - V) / (3.0 * se)) < 1.0


# ----------------------------------------------------- kriging covariance

def test_kriging_with_no_constraints_is_pinv():
    np.testing.assert_allclose(
        kriging_covariance(RW3, np.empty((0, 3))), np.linalg.pinv(RW3), atol=1e-12
    )


def test_kriging_identity_precision_single_coordinate():
    B = np.array([[1.0, 0.0, 0.0]])
    V = kriging_covariance(np.eye(3), B)
    expect = np.eye(3)
    expect[0, 0] = 0.0
    np.testing.assert_allclose(V, expect, atol=1e-12)


def test_kriging_also_annihilates_the_kernel():
    """Kriging zeroes the constant even when B does not span the kernel."""
    V_krig = kriging_covariance(RW5, W_ROW5)
    V_cons = constrained_covariance(RW5, W_ROW5).V
    ones = np.ones(5)
    assert np.max(np.abs(V_krig @ ones)) < 1e-10
    assert np.max(np.abs(V_cons @ ones)) > 0.1
    np.testing.assert_allclose(W_ROW5 @ V_krig, 0.0, atol=1e-10)
    np.testing.assert_allclose(W_ROW5 @ V_cons, 0.0, atol=1e-10)


def test_kriging_rejects_constraints_inside_the_kernel():
    with pytest.raises(IllPosedConstraintsError, match="singular"):
        kriging_covariance(RW3, np.ones((1, 3)))


def test_kriging_matches_constrained_for_nonsingular_precision():
    # With no kernel to disagree about, the two constructions coincide.
    rng = np.random.Generator(np.random.Philox(14))
    A = rng.standard_normal((5, 5))
    Q = A @ A.T + 5.0 * np.eye(5)
    B = rng.standard_normal((2, 5))
    np.testing.assert_allclose(
        kriging_covariance(Q, B), constrained_covariance(Q, B).V, atol=1e-9
    )
