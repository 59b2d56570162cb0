"""Command-line interface.

Subcommands:

  fit       fit one model variant to a dataset and serialize the result
  simulate  generate a synthetic dataset (and its truth record) to disk
  diagnose  confounding-correlation diagnostics for a dataset
  compare   fit several variants, sharing the ST2 weights, and tabulate
            deviance / effective df / AIC / wall time

Exit codes: 0 success, 2 invalid input or options, 3 convergence or
numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import io as stio
from .diagnostics import (
    ModelComparison,
    comparison_row,
    confounding_correlations,
    decompose_patterns,
)
from .errors import ConvergenceError, NumericalError, ValidationError
from .model import ModelSpec, build_design
from .pql import FitResult, PQLOptions, fit, warm_start_from
from .simulate import generate
from .structures import build_structures

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_IO = 4

ROSTER = ("ST1", "ST2", "ST3", "ST4")


def _parse_blocks(raw: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in raw.split(",") if part.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stconfound",
        description=(
            "Poisson spatio-temporal areal models with confounding alleviated "
            "by restricted regression or orthogonality constraints, fitted by PQL."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit one model variant")
    p_fit.add_argument("--data", required=True, help="dataset CSV")
    p_fit.add_argument("--adjacency", required=True, help="edge list or 0/1 matrix file")
    p_fit.add_argument("--model", required=True, choices=[v.lower() for v in ROSTER])
    p_fit.add_argument(
        "--restrict", default="spatial,temporal,interaction",
        help="comma-separated blocks to restrict (st3 only)",
    )
    p_fit.add_argument("--tol", type=float, default=1e-5)
    p_fit.add_argument("--max-outer", type=int, default=100)
    p_fit.add_argument("--max-inner", type=int, default=50)
    p_fit.add_argument(
        "--warm-start", default=None,
        help="directory of a serialized converged ST2 fit to reuse (weights and sigma2)",
    )
    p_fit.add_argument("--out", required=True, help="output directory")
    p_fit.set_defaults(func=run_fit)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    p_sim.add_argument("--scenario", default=None, help="key = value scenario file")
    p_sim.add_argument("--rows", type=int, default=None, help="lattice rows")
    p_sim.add_argument("--cols", type=int, default=None, help="lattice columns")
    p_sim.add_argument("--periods", type=int, default=None, help="number of periods")
    p_sim.add_argument("--beta", default=None, help="comma-separated true coefficients")
    p_sim.add_argument("--rho", default=None, help="comma-separated confounding targets")
    p_sim.add_argument("--sigma2-spatial", type=float, default=None)
    p_sim.add_argument("--sigma2-temporal", type=float, default=None)
    p_sim.add_argument("--sigma2-interaction", type=float, default=None)
    p_sim.add_argument("--baseline", type=float, default=None, help="expected count per cell")
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.set_defaults(func=run_simulate)

    p_diag = sub.add_parser("diagnose", help="confounding correlation diagnostics")
    p_diag.add_argument("--data", required=True)
    p_diag.add_argument("--adjacency", required=True)
    p_diag.add_argument("--out", required=True, help="output directory")
    p_diag.set_defaults(func=run_diagnose)

    p_cmp = sub.add_parser("compare", help="fit several variants and tabulate criteria")
    p_cmp.add_argument("--data", required=True)
    p_cmp.add_argument("--adjacency", required=True)
    p_cmp.add_argument(
        "--models", default="st1,st2,st3,st4",
        help="comma-separated subset of st1,st2,st3,st4",
    )
    p_cmp.add_argument("--restrict", default="spatial,temporal,interaction")
    p_cmp.add_argument("--tol", type=float, default=1e-5)
    p_cmp.add_argument("--max-outer", type=int, default=100)
    p_cmp.add_argument("--max-inner", type=int, default=50)
    p_cmp.add_argument("--out", required=True, help="output directory")
    p_cmp.set_defaults(func=run_compare)

    return parser


def _load_inputs(args):
    data = stio.load_dataset(args.data)
    graph = stio.read_adjacency(args.adjacency)
    if graph.n_areas != data.S:
        raise ValidationError(
            f"adjacency has {graph.n_areas} areas but dataset has S={data.S}"
        )
    return data, build_structures(graph, data.T)


def _print_fit(label: str, result: FitResult) -> None:
    state = f"converged in {result.iterations} iterations" if result.converged else (
        f"did NOT converge within {result.iterations} iterations"
    )
    print(f"{label}: {state}")
    aic = result.deviance + 2.0 * result.effective_df
    print(
        f"  deviance {result.deviance:.2f}, effective df {result.effective_df:.2f}, "
        f"AIC {aic:.2f}"
    )
    for term, b, s in zip(result.term_names, result.beta, result.beta_se):
        print(f"  {term:<16} {b: .4f} (SE {s:.4f})")
    for lab, s2 in result.variance_components.sigma2.items():
        se = result.variance_components.standard_errors[lab]
        flag = " [at boundary]" if result.variance_components.at_boundary[lab] else ""
        print(f"  sigma2[{lab}] {s2:.4f} (SE {se:.4f}){flag}")


def _fit_variant(
    variant: str,
    data,
    structures,
    opts: PQLOptions,
    restrict: tuple[str, ...],
    st2_result: FitResult | None,
):
    """Build and fit one variant, reusing an ST2 result for ST3/ST4."""
    spec = ModelSpec(variant, restrict_blocks=restrict)
    if variant in ("ST3", "ST4"):
        if st2_result is None:
            raise ValidationError(f"{variant} requires a converged ST2 fit for its weights")
        if not st2_result.converged:
            raise ConvergenceError(
                f"cannot fit {variant}: the prerequisite ST2 fit did not converge"
            )
        bundle = build_design(spec, data, structures, st2_result.working_weights)
        opts = replace(opts, warm_start=warm_start_from(st2_result))
    else:
        bundle = build_design(spec, data, structures)
    return bundle, fit(bundle, data, opts)


def run_fit(args) -> int:
    data, structures = _load_inputs(args)
    variant = args.model.upper()
    restrict = _parse_blocks(args.restrict)
    opts = PQLOptions(tol=args.tol, max_outer=args.max_outer, max_inner=args.max_inner)

    st2_result = None
    if variant in ("ST3", "ST4"):
        if args.warm_start is not None:
            st2_result = stio.load_fit(args.warm_start)
            if st2_result.variant != "ST2":
                raise ValidationError(
                    f"--warm-start must point to an ST2 fit, found {st2_result.variant}"
                )
            if st2_result.S != data.S or st2_result.T != data.T:
                raise ValidationError("--warm-start fit does not match the dataset shape")
        else:
            print("fitting ST2 first (weights and warm start for " + variant + ")")
            _, st2_result = _fit_variant("ST2", data, structures, opts, restrict, None)
            _print_fit("ST2", st2_result)

    bundle, result = _fit_variant(variant, data, structures, opts, restrict, st2_result)
    _print_fit(variant, result)

    out = Path(args.out)
    stio.serialize_fit(result, out)
    if bundle.blocks:
        stio.save_patterns(decompose_patterns(result, bundle), data.S, data.T, out / "patterns.csv")
    print(f"wrote {out}/fit.json")
    if not result.converged:
        print("warning: fit did not converge; outputs written anyway", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def run_simulate(args) -> int:
    if args.scenario is not None:
        scenario = stio.parse_scenario_file(args.scenario)
    else:
        scenario = stio.scenario_from_options()
    overrides = {}
    if (args.rows is None) != (args.cols is None):
        raise ValidationError("--rows and --cols must be given together")
    if args.rows is not None:
        overrides["grid"] = (args.rows, args.cols)
    if args.periods is not None:
        overrides["T"] = args.periods
    if args.beta is not None:
        overrides["beta_true"] = tuple(float(p) for p in args.beta.split(","))
    if args.rho is not None:
        overrides["confounding_rho"] = tuple(float(p) for p in args.rho.split(","))
    sigma2 = dict(scenario.sigma2_true)
    for label in ("spatial", "temporal", "interaction"):
        value = getattr(args, f"sigma2_{label}")
        if value is not None:
            sigma2[label] = value
    overrides["sigma2_true"] = sigma2
    if args.baseline is not None:
        overrides["baseline_expected"] = args.baseline
    if args.seed is not None:
        overrides["seed"] = args.seed
    scenario = replace(scenario, **overrides) if overrides else scenario

    data, truth = generate(scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stio.save_dataset(data, out / "dataset.csv")
    stio.save_adjacency(scenario.grid, out / "adjacency.txt")
    stio.save_truth(truth, out / "truth.json")
    print(
        f"wrote {out}/dataset.csv (S={data.S}, T={data.T}, p={data.n_covariates}), "
        f"adjacency.txt, truth.json"
    )
    return EXIT_OK


def run_diagnose(args) -> int:
    data, structures = _load_inputs(args)
    diag = confounding_correlations(data, structures.spatial, structures.temporal)
    stio.save_correlations(diag, args.out)
    print(f"wrote correlation diagnostics under {args.out}")
    return EXIT_OK


def run_compare(args) -> int:
    data, structures = _load_inputs(args)
    requested = [m.strip().upper() for m in args.models.split(",") if m.strip()]
    unknown = [m for m in requested if m not in ROSTER]
    if unknown:
        raise ValidationError(f"unknown model variants {unknown}; expected subset of {ROSTER}")
    if not requested:
        raise ValidationError("no models requested")
    restrict = _parse_blocks(args.restrict)
    opts = PQLOptions(tol=args.tol, max_outer=args.max_outer, max_inner=args.max_inner)
    ordered = [v for v in ROSTER if v in requested]
    needs_st2 = any(v in ("ST3", "ST4") for v in ordered)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    st2_bundle, st2_result = None, None
    st2_seconds = 0.0

    def ensure_st2():
        nonlocal st2_bundle, st2_result, st2_seconds
        if st2_result is None:
            t0 = time.perf_counter()
            st2_bundle, st2_result = _fit_variant("ST2", data, structures, opts, restrict, None)
            st2_seconds = time.perf_counter() - t0
            if not st2_result.converged and needs_st2:
                raise ConvergenceError(
                    "ST2 did not converge; ST3/ST4 depend on its weights and warm start"
                )
        return st2_bundle, st2_result

    rows = []
    for variant in ordered:
        if variant == "ST2":
            bundle, result = ensure_st2()
            seconds = st2_seconds
        elif variant in ("ST3", "ST4"):
            ensure_st2()
            t1 = time.perf_counter()
            bundle, result = _fit_variant(variant, data, structures, opts, restrict, st2_result)
            # Dependent fits owe the prerequisite ST2 time in their total.
            seconds = time.perf_counter() - t1 + st2_seconds
        else:
            t1 = time.perf_counter()
            bundle, result = _fit_variant(variant, data, structures, opts, restrict, None)
            seconds = time.perf_counter() - t1
        _print_fit(variant, result)
        rows.append(comparison_row(variant, result, seconds))
        model_dir = out / variant.lower()
        stio.serialize_fit(result, model_dir)
        if bundle.blocks:
            stio.save_patterns(
                decompose_patterns(result, bundle), data.S, data.T, model_dir / "patterns.csv"
            )

    comparison = ModelComparison(rows=tuple(rows))
    stio.save_comparison(comparison, out / "comparison.csv")
    print(f"wrote {out}/comparison.csv")
    if any(not r.converged for r in rows):
        return EXIT_CONVERGENCE
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConvergenceError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
