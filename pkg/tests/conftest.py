"""Shared fixtures: small graphs, spectral splits, and reusable fitted models.

The fits are session-scoped because they are reused by many tests; all
of them are deterministic given the frozen scenario seeds.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from stconfound import (
    Dataset,
    ModelSpec,
    PQLOptions,
    Scenario,
    SpatialGraph,
    build_design,
    build_structures,
    default_scenario,
    fit,
    generate,
    warm_start_from,
)


def random_connected_graph(rng, S: int) -> SpatialGraph:
    """Random spanning tree on S nodes plus a few extra edges."""
    edges = set()
    for i in range(2, S + 1):
        j = int(rng.integers(1, i))
        edges.add((j, i))
    for _ in range(int(rng.integers(0, S))):
        i = int(rng.integers(1, S + 1))
        j = int(rng.integers(1, S + 1))
        if i != j:
            edges.add((min(i, j), max(i, j)))
    return SpatialGraph(S, sorted(edges))


@pytest.fixture(scope="session")
def graph_factory():
    return random_connected_graph


@pytest.fixture(scope="session")
def path3() -> SpatialGraph:
    return SpatialGraph(3, [(1, 2), (2, 3)])


@pytest.fixture(scope="session")
def path4() -> SpatialGraph:
    return SpatialGraph(4, [(1, 2), (2, 3), (3, 4)])


@pytest.fixture(scope="session")
def structures_s3t3(path3):
    return build_structures(path3, 3)


@pytest.fixture(scope="session")
def structures_s4t3(path4):
    return build_structures(path4, 3)


@pytest.fixture(scope="session")
def small_scenario(path4) -> Scenario:
    """S=4 path, T=3, one moderately confounded covariate."""
    return Scenario(
        grid=path4,
        T=3,
        beta_true=(0.3,),
        sigma2_true={"spatial": 0.5, "temporal": 0.2, "interaction": 0.1},
        confounding_rho=(0.5,),
        baseline_expected=100.0,
        seed=11,
    )


@pytest.fixture(scope="session")
def small_data(small_scenario) -> Dataset:
    data, _ = generate(small_scenario)
    return data


@pytest.fixture(scope="session")
def small_st2(small_data, structures_s4t3):
    """Converged ST2 fit on the small instance, with its bundle."""
    bundle = build_design(ModelSpec("ST2"), small_data, structures_s4t3)
    result = fit(bundle, small_data)
    assert result.converged
    return bundle, result


@pytest.fixture(scope="session")
def study_scenario() -> Scenario:
    return default_scenario(seed=914)


@pytest.fixture(scope="session")
def study_data(study_scenario) -> Dataset:
    data, _ = generate(study_scenario)
    return data


@pytest.fixture(scope="session")
def study_structures(study_scenario):
    return build_structures(study_scenario.grid, study_scenario.T)


@pytest.fixture(scope="session")
def roster(study_data, study_structures):
    """All four variants fitted to the study dataset: variant -> (bundle, fit).

    ST3 and ST4 reuse the converged ST2 weights and warm-start from its
    variance components, matching the intended pipeline.
    """
    opts = PQLOptions()
    fits = {}
    for variant in ("ST1", "ST2"):
        bundle = build_design(ModelSpec(variant), study_data, study_structures)
        fits[variant] = (bundle, fit(bundle, study_data, opts))
    st2 = fits["ST2"][1]
    assert st2.converged
    warm = dataclasses.replace(opts, warm_start=warm_start_from(st2))
    for variant in ("ST3", "ST4"):
        bundle = build_design(
            ModelSpec(variant), study_data, study_structures, st2.working_weights
        )
        fits[variant] = (bundle, fit(bundle, study_data, warm))
    for variant, (_, result) in fits.items():
        assert result.converged, f"{variant} fit on the study data did not converge"
    return fits


@pytest.fixture(scope="session")
def null_fit(path3, structures_s3t3):
    """ST2 fit on observed == expected data with no covariates."""
    data = Dataset(
        S=3, T=3,
        observed=np.full(9, 20.0),
        expected=np.full(9, 20.0),
        covariates=np.empty((9, 0)),
    )
    bundle = build_design(ModelSpec("ST2"), data, structures_s3t3)
    return data, bundle, fit(bundle, data)
