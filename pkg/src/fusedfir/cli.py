"""Command-line surface for reproducible batch runs.

Subcommands: ``synth`` (write a synthetic benchmark), ``bounds`` (penalty
upper bounds), ``fit`` (per-condition least squares), ``run`` (the full
pipeline), ``eval`` (cross-evaluation from stored coefficient CSVs).
Exit codes: 0 ok, 2 data/config error, 3 unmet precondition, 4 solver
non-convergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


from . import _json
from .bounds import FusionUndefinedError, compute_bounds
from .data import (
    IngestionError,
    ModelStructure,
    build_regressor,
    generate_synthetic,
    load_dataset,
    load_manifest,
    parse_dataset_name,
    scenario_from_config,
)
from .estimation import ls_fit
from .pipeline import (
    GridSearchFailedError,
    GridSpec,
    PipelineStageError,
    cross_evaluate,
    read_theta_csv,
    run_pipeline,
    write_fit_matrix_csv,
    write_theta_csv,
)
from .solver import SolverConfig

EXIT_OK = 0
EXIT_DATA = 2
EXIT_PRECONDITION = 3
EXIT_NO_CONVERGENCE = 4


def _float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


def _load_role_problems(manifest_path: Path, taps: int, role: str):
    entries = [e for e in load_manifest(manifest_path) if e.role == role]
    if not entries:
        raise IngestionError(f"manifest has no {role} datasets")
    entries.sort(key=lambda e: e.name)
    structure = ModelStructure(taps=taps, channels=len(entries[0].channels))
    problems = [
        build_regressor(load_dataset(manifest_path.parent / e.file, e), structure)
        for e in entries
    ]
    return structure, problems


def cmd_synth(args: argparse.Namespace) -> int:
    config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    scenario = scenario_from_config(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    datasets = generate_synthetic(scenario)
    manifest = []
    for ds in datasets:
        from .data import write_dataset_csv

        write_dataset_csv(ds, out / f"{ds.name}.csv")
        parsed = parse_dataset_name(ds.name)
        role = "estimation" if parsed and parsed[1] == 1 else "validation"
        manifest.append(
            {
                "name": ds.name,
                "file": f"{ds.name}.csv",
                "role": role,
                "channels": list(ds.channel_names),
                "output": "y",
            }
        )
    (out / "manifest.json").write_text(_json.dumps(manifest), encoding="utf-8")

    # Truth summary goes to a sidecar only; the manifest must stay blind.
    sidecar = {
        "assignment": dict(scenario.assignment),
        "group_truths": [[float(x) for x in g.values] for g in scenario.group_truths],
        "irrelevant_channels": sorted(scenario.irrelevant_channels),
        "noise_sigma": scenario.noise_sigma,
        "noiseless": scenario.noise_sigma == 0.0,
        "seed": scenario.seed,
    }
    (out / "ground_truth.json").write_text(_json.dumps(sidecar), encoding="utf-8")
    print(
        f"synth: wrote {len(datasets)} datasets, manifest.json and "
        f"ground_truth.json to {out}"
    )
    return EXIT_OK


def cmd_bounds(args: argparse.Namespace) -> int:
    _, problems = _load_role_problems(Path(args.manifest), args.taps, "estimation")
    report = compute_bounds(problems)
    text = _json.dumps(report.to_dict())
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    _, problems = _load_role_problems(Path(args.manifest), args.taps, "estimation")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fits = [ls_fit(p) for p in problems]
    write_theta_csv(
        out / "thetas.csv",
        [p.condition_name for p in problems],
        [f.theta for f in fits],
    )
    summary = {
        p.condition_name: {
            "residual_norm_sq": f.residual_norm_sq,
            "gram_min_eig": f.gram_min_eig,
            "gram_positive_definite": f.gram_positive_definite,
        }
        for p, f in zip(problems, fits)
    }
    (out / "fits.json").write_text(_json.dumps(summary), encoding="utf-8")
    print(f"fit: wrote {len(fits)} least-squares models to {out}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    entries = load_manifest(manifest_path)
    structure = ModelStructure(taps=args.taps, channels=len(entries[0].channels))
    grid = GridSpec(
        lambda1_factors=args.lambda1_factors or GridSpec().lambda1_factors,
        lambda2_values=args.lambda2_values or GridSpec().lambda2_values,
    )
    cfg = SolverConfig(
        rho=args.rho,
        eps_abs=args.eps_abs,
        eps_rel=args.eps_rel,
        max_iter=args.max_iter,
        trace=args.trace,
    )
    variant = "l2_squared" if args.fusion_variant == "l2-squared" else "l2"
    report = run_pipeline(
        entries,
        structure,
        grid,
        args.k,
        cfg,
        args.seed,
        fusion_variant=variant,
        literal_criterion=args.literal_criterion,
        auto_k=args.auto_k,
        threads=args.threads,
        base_dir=manifest_path.parent,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    write_theta_csv(out / "thetas.csv", report.theta_names, report.solve_result.thetas)
    write_theta_csv(
        out / "category_thetas.csv",
        ["+".join(report.refit_members[c]) for c in sorted(report.refits)],
        [report.refits[c].theta for c in sorted(report.refits)],
    )
    write_fit_matrix_csv(out / "fit_matrix.csv", report.fit_reports)
    if args.trace and report.solve_result.trace is not None:
        lines = ["iter,objective,primal_res,dual_res"]
        lines += [
            f"{it},{obj:.17g},{r:.17g},{s:.17g}"
            for it, obj, r, s in report.solve_result.trace
        ]
        (out / "trace.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    if report.bounds is not None:
        print(
            f"bounds: lambda1_max={report.bounds.lambda1_max:.6g} "
            f"lambda2_max={report.bounds.lambda2_max:.6g}"
        )
    else:
        print("bounds: skipped (single condition)")
    print(
        f"grid: selected lambda1={report.selected.lambda1:.6g} "
        f"lambda2={report.selected.lambda2:.6g}"
    )
    sr = report.solve_result
    print(
        f"solve: converged={sr.converged} iterations={sr.iterations} "
        f"objective={sr.objective.total:.6g}"
    )
    print(f"cluster: k={report.clusters.k} labels={report.clusters.labels}")
    print(f"refit: {len(report.refits)} categories")
    print(f"evaluate: {len(report.fit_reports)} FIT cells -> {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    entries = load_manifest(manifest_path)
    role = "evaluation" if any(e.role == "evaluation" for e in entries) else "validation"
    structure, problems = _load_role_problems(manifest_path, args.taps, role)
    models = read_theta_csv(args.thetas, structure)
    reports = cross_evaluate(models, problems)
    if args.out:
        write_fit_matrix_csv(args.out, reports)
        print(f"eval: wrote {len(reports)} FIT cells to {args.out}")
    else:
        for r in reports:
            fit = "undefined" if r.fit_percent is None else f"{r.fit_percent:.17g}"
            print(f"{r.model_source},{r.eval_dataset},{fit}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusedfir",
        description="Fused FIR soft-sensor estimation across working conditions",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("config", help="scenario config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bounds", help="closed-form penalty upper bounds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--taps", type=int, required=True)
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("fit", help="per-condition least-squares fits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--taps", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("run", help="full estimation pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--taps", type=int, required=True)
    p.add_argument("--k", type=int, required=True, help="cluster count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--threads",
        type=int,
        default=os.cpu_count(),
        help="workers for the parallel grid search (default: all cores)",
    )
    p.add_argument("--literal-criterion", action="store_true")
    p.add_argument("--fusion-variant", choices=("l2", "l2-squared"), default="l2")
    p.add_argument("--auto-k", action="store_true")
    p.add_argument("--trace", action="store_true")
    p.add_argument("--lambda1-factors", type=_float_tuple, default=None)
    p.add_argument("--lambda2-values", type=_float_tuple, default=None)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--eps-abs", type=float, default=1e-8)
    p.add_argument("--eps-rel", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=50_000)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="cross-evaluate stored models")
    p.add_argument("--manifest", required=True)
    p.add_argument("--taps", type=int, required=True)
    p.add_argument("--thetas", required=True, help="theta CSV written by fit/run")
    p.add_argument("--out", default=None, help="FIT matrix CSV path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FusionUndefinedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except GridSearchFailedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except PipelineStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, FusionUndefinedError):
            return EXIT_PRECONDITION
        if isinstance(exc.cause, GridSearchFailedError) or "converge" in str(exc.cause):
            return EXIT_NO_CONVERGENCE
        return EXIT_DATA
    except (IngestionError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
