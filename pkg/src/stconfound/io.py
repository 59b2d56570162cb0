"""File formats: dataset and adjacency ingestion, fit serialization.

Dataset CSV: header ``area,time,observed,expected[,population],x1,...``
with 1-based dense area and time indices; any column beyond the
reserved names is a covariate. Rows may arrive in any order and are
normalized to the area-fastest layout. When ``expected`` is absent it
is derived from ``population`` by internal standardization.

Adjacency files are auto-detected: either an edge list (two 1-based
indices per line) or a square 0/1 matrix; ``#`` starts a comment.

A serialized fit is a directory: ``fit.json`` with every scalar and
small-vector field (full float precision), plus CSVs for random
effects, block coefficients and per-cell fitted quantities. The
round-trip through ``serialize_fit``/``load_fit`` is lossless to 1e-12.
"""

from __future__ import annotations

import importlib.metadata
import json
import re
from pathlib import Path

import numpy as np
import pandas as pd

from .diagnostics import CorrelationDiagnostic, ModelComparison, PatternDecomposition
from .errors import ValidationError
from .model import Dataset, StandardizationRecord, expected_counts
from .pql import FitResult, VarianceComponents
from .simulate import WALD_Z95, Scenario, TruthRecord, default_scenario
from .structures import SpatialGraph

RESERVED_COLUMNS = ("area", "time", "observed", "expected", "population")

try:
    SOFTWARE_VERSION = importlib.metadata.version("stconfound")
except importlib.metadata.PackageNotFoundError:
    SOFTWARE_VERSION = "unknown"


def load_dataset(path) -> Dataset:
    """Read a dataset CSV, checking the (area, time) grid is complete."""
    df = pd.read_csv(path)
    missing = [c for c in ("area", "time", "observed") if c not in df.columns]
    if missing:
        raise ValidationError(f"dataset is missing required columns {missing}")
    if "expected" not in df.columns and "population" not in df.columns:
        raise ValidationError("dataset needs an 'expected' or a 'population' column")

    area = df["area"].to_numpy()
    time = df["time"].to_numpy()
    for name, values in (("area", area), ("time", time)):
        if not np.allclose(values, np.round(values)):
            raise ValidationError(f"{name} indices must be integers")
    area = area.astype(int)
    time = time.astype(int)
    S, T = int(area.max()), int(time.max())
    if area.min() < 1 or time.min() < 1:
        raise ValidationError("area and time indices are 1-based")

    present = set(zip(area.tolist(), time.tolist()))
    if len(present) != len(df):
        raise ValidationError("duplicate (area, time) rows in dataset")
    gaps = [(s, t) for t in range(1, T + 1) for s in range(1, S + 1) if (s, t) not in present]
    if gaps:
        shown = ", ".join(f"(area {s}, time {t})" for s, t in gaps[:10])
        more = f" and {len(gaps) - 10} more" if len(gaps) > 10 else ""
        raise ValidationError(f"dataset grid is incomplete; missing {shown}{more}")

    df = df.sort_values(["time", "area"], kind="stable").reset_index(drop=True)
    observed = df["observed"].to_numpy(dtype=float)
    if not np.allclose(observed, np.round(observed)) or np.any(observed < 0):
        raise ValidationError("observed counts must be nonnegative integers")
    if "expected" in df.columns:
        expected = df["expected"].to_numpy(dtype=float)
    else:
        expected = expected_counts(observed, df["population"].to_numpy(dtype=float))
    covariate_names = tuple(c for c in df.columns if c not in RESERVED_COLUMNS)
    covariates = df[list(covariate_names)].to_numpy(dtype=float)
    if covariates.size == 0:
        covariates = covariates.reshape(len(df), 0)
    return Dataset(
        S=S, T=T, observed=observed, expected=expected,
        covariates=covariates, covariate_names=covariate_names,
    )


def save_dataset(data: Dataset, path) -> None:
    """Write a dataset in the standard CSV layout."""
    S, T = data.S, data.T
    frame = {
        "area": np.tile(np.arange(1, S + 1), T),
        "time": np.repeat(np.arange(1, T + 1), S),
        "observed": data.observed.astype(int),
        "expected": data.expected,
    }
    for j, name in enumerate(data.covariate_names):
        frame[name] = data.covariates[:, j]
    pd.DataFrame(frame).to_csv(path, index=False)


def _numeric_rows(path) -> list[list[float]]:
    rows = []
    text = Path(path).read_text()
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = re.split(r"[,\s]+", line)
        try:
            rows.append([float(p) for p in parts if p])
        except ValueError as exc:
            raise ValidationError(f"adjacency file line {line_no} is not numeric: {line!r}") from exc
    if not rows:
        raise ValidationError("adjacency file is empty")
    return rows


def read_adjacency(path) -> SpatialGraph:
    """Read a neighbourhood structure from an edge list or a 0/1 matrix.

    An edge list has two 1-based indices per line; anything else is
    treated as a square matrix. The number of areas in an edge list is
    the largest index mentioned (valid because the graph must be
    connected anyway).
    """
    rows = _numeric_rows(path)
    is_edge_list = all(len(r) == 2 for r in rows) and all(
        v >= 1 and float(v).is_integer() for r in rows for v in r
    )
    if is_edge_list:
        edges = [(int(i), int(j)) for i, j in rows]
        n_areas = max(max(i, j) for i, j in edges)
        return SpatialGraph(n_areas, edges)
    n = len(rows)
    if any(len(r) != n for r in rows):
        raise ValidationError(
            f"adjacency matrix must be square; got {n} rows with lengths {sorted({len(r) for r in rows})}"
        )
    return SpatialGraph.from_matrix(np.array(rows))


def save_adjacency(graph: SpatialGraph, path) -> None:
    """Write a graph as an edge list, one '<i> <j>' pair per line."""
    lines = [f"{i} {j}" for i, j in graph.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def serialize_fit(result: FitResult, path) -> None:
    """Write a fit to a directory: fit.json plus CSV companions."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    se = result.beta_se
    beta_table = [
        {
            "term": term,
            "estimate": float(b),
            "se": float(s),
            "ci_lower": float(b - WALD_Z95 * s),
            "ci_upper": float(b + WALD_Z95 * s),
        }
        for term, b, s in zip(result.term_names, result.beta, se)
    ]
    payload = {
        "software": {"name": "stconfound", "version": SOFTWARE_VERSION},
        "variant": result.variant,
        "S": result.S,
        "T": result.T,
        "converged": result.converged,
        "iterations": result.iterations,
        "tol": result.tol,
        "deviance": result.deviance,
        "effective_df": result.effective_df,
        "aic": result.deviance + 2.0 * result.effective_df,
        "term_names": list(result.term_names),
        "beta": result.beta,
        "beta_table": beta_table,
        "beta_cov": result.beta_cov,
        "variance_components": {
            "sigma2": result.variance_components.sigma2,
            "standard_errors": result.variance_components.standard_errors,
            "at_boundary": result.variance_components.at_boundary,
        },
        "standardization": {
            "means": list(result.standardization.means),
            "scales": list(result.standardization.scales),
            "ddof": result.standardization.ddof,
        },
    }
    (out / "fit.json").write_text(json.dumps(_jsonable(payload), indent=2))

    _write_block_csv(out / "random_effects.csv", result.random_effects)
    _write_block_csv(out / "coefficients.csv", result.coefficients)

    S, T = result.S, result.T
    pd.DataFrame(
        {
            "area": np.tile(np.arange(1, S + 1), T),
            "time": np.repeat(np.arange(1, T + 1), S),
            "linear_predictor": result.linear_predictor,
            "fitted_mu": result.fitted_mu,
            "working_weight": result.working_weights,
            "risk": np.exp(result.linear_predictor),
        }
    ).to_csv(out / "fitted.csv", index=False, float_format="%.17g")


def _write_block_csv(path: Path, blocks: dict[str, np.ndarray]) -> None:
    rows = []
    for label, values in blocks.items():
        for idx, v in enumerate(np.asarray(values).ravel(), start=1):
            rows.append((label, idx, float(v)))
    pd.DataFrame(rows, columns=["block", "index", "value"]).to_csv(
        path, index=False, float_format="%.17g"
    )


def _read_block_csv(path: Path) -> dict[str, np.ndarray]:
    df = pd.read_csv(path)
    out: dict[str, np.ndarray] = {}
    for label, group in df.groupby("block", sort=False):
        out[str(label)] = group.sort_values("index")["value"].to_numpy(dtype=float)
    return out


def load_fit(path) -> FitResult:
    """Reconstruct a FitResult from a directory written by serialize_fit."""
    src = Path(path)
    try:
        payload = json.loads((src / "fit.json").read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"no fit.json under {src}") from exc
    fitted = pd.read_csv(src / "fitted.csv").sort_values(["time", "area"], kind="stable")
    vc = payload["variance_components"]
    record = payload["standardization"]
    return FitResult(
        variant=payload["variant"],
        S=int(payload["S"]),
        T=int(payload["T"]),
        beta=np.array(payload["beta"], dtype=float),
        beta_cov=np.array(payload["beta_cov"], dtype=float),
        term_names=tuple(payload["term_names"]),
        random_effects=_read_block_csv(src / "random_effects.csv"),
        coefficients=_read_block_csv(src / "coefficients.csv"),
        variance_components=VarianceComponents(
            sigma2={k: float(v) for k, v in vc["sigma2"].items()},
            standard_errors={k: float(v) for k, v in vc["standard_errors"].items()},
            at_boundary={k: bool(v) for k, v in vc["at_boundary"].items()},
        ),
        fitted_mu=fitted["fitted_mu"].to_numpy(dtype=float),
        linear_predictor=fitted["linear_predictor"].to_numpy(dtype=float),
        working_weights=fitted["working_weight"].to_numpy(dtype=float),
        converged=bool(payload["converged"]),
        iterations=int(payload["iterations"]),
        deviance=float(payload["deviance"]),
        effective_df=float(payload["effective_df"]),
        standardization=StandardizationRecord(
            means=tuple(record["means"]), scales=tuple(record["scales"]),
            ddof=int(record["ddof"]),
        ),
        tol=float(payload["tol"]),
    )


def save_truth(truth: TruthRecord, path) -> None:
    """Write a simulation truth record as JSON."""
    payload = {
        "beta": truth.beta,
        "xi": truth.xi,
        "gamma": truth.gamma,
        "delta": truth.delta,
        "linear_predictor": truth.linear_predictor,
        "confounding_rho": list(truth.confounding_rho),
        "seed": truth.seed,
    }
    Path(path).write_text(json.dumps(_jsonable(payload), indent=2))


_SCENARIO_KEYS = {
    "rows", "cols", "T", "beta", "rho",
    "sigma2_spatial", "sigma2_temporal", "sigma2_interaction",
    "baseline", "seed",
}


def parse_scenario_file(path) -> Scenario:
    """Parse a 'key = value' scenario file; unset keys take defaults.

    Keys: rows, cols, T, beta (comma list), rho (comma list),
    sigma2_spatial, sigma2_temporal, sigma2_interaction, baseline, seed.
    """
    values: dict[str, str] = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"scenario line {line_no} is not 'key = value': {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _SCENARIO_KEYS:
            raise ValidationError(f"unknown scenario key {key!r} on line {line_no}")
        values[key] = raw.strip()
    return scenario_from_options(**values)


def scenario_from_options(**options) -> Scenario:
    """Build a Scenario from string or numeric options with defaults."""
    base = default_scenario()

    def floats(raw):
        if isinstance(raw, str):
            return tuple(float(p) for p in re.split(r"[,\s]+", raw) if p)
        return tuple(float(v) for v in np.atleast_1d(raw))

    rows = int(options.get("rows", 5))
    cols = int(options.get("cols", 4))
    beta = floats(options["beta"]) if "beta" in options else base.beta_true
    rho = floats(options["rho"]) if "rho" in options else base.confounding_rho
    sigma2 = dict(base.sigma2_true)
    for label in ("spatial", "temporal", "interaction"):
        key = f"sigma2_{label}"
        if key in options:
            sigma2[label] = float(options[key])
    return Scenario(
        grid=(rows, cols),
        T=int(options.get("T", base.T)),
        beta_true=beta,
        sigma2_true=sigma2,
        confounding_rho=rho,
        baseline_expected=float(options.get("baseline", 50.0)),
        seed=int(options.get("seed", base.seed)),
    )


def save_comparison(comparison: ModelComparison, path) -> None:
    """Model selection criteria as CSV, one row per model."""
    pd.DataFrame(
        [
            {
                "model": r.label,
                "deviance": r.deviance,
                "effective_df": r.effective_df,
                "aic": r.aic,
                "wall_time_seconds": r.wall_time_seconds,
                "converged": r.converged,
            }
            for r in comparison.rows
        ]
    ).to_csv(path, index=False, float_format="%.17g")


def save_correlations(diag: CorrelationDiagnostic, out_dir) -> None:
    """Confounding correlations as CSVs (spatial always, temporal when T > 1)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        {"covariate": name, "time": t + 1, "correlation": diag.spatial[j, t]}
        for j, name in enumerate(diag.covariate_names)
        for t in range(diag.spatial.shape[1])
    ]
    pd.DataFrame(rows).to_csv(out / "spatial_correlations.csv", index=False)
    if diag.temporal is not None:
        rows = [
            {"covariate": name, "area": s + 1, "correlation": diag.temporal[j, s]}
            for j, name in enumerate(diag.covariate_names)
            for s in range(diag.temporal.shape[1])
        ]
        pd.DataFrame(rows).to_csv(out / "temporal_correlations.csv", index=False)


def save_patterns(decomp: PatternDecomposition, S: int, T: int, path) -> None:
    """Pattern decomposition as CSV keyed by (area, time).

    Patterns below TS resolution are replicated to the full grid.
    """
    frame = {
        "area": np.tile(np.arange(1, S + 1), T),
        "time": np.repeat(np.arange(1, T + 1), S),
    }
    for label, values in decomp.patterns.items():
        values = np.asarray(values).ravel()
        if values.size == S:
            values = np.tile(values, T)
        elif values.size == T:
            values = np.repeat(values, S)
        elif values.size != S * T:
            raise ValidationError(
                f"pattern {label!r} has length {values.size}, not S, T or TS"
            )
        frame[label] = values
    frame["risk"] = decomp.risks
    pd.DataFrame(frame).to_csv(path, index=False, float_format="%.17g")
