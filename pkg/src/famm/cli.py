"""Command-line interface: ``famm fit | simulate | fpca | check-identifiability | version``.

Exit codes: 0 success, 1 identifiability check failed, 2 input error,
3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InputError, NumericalError

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3, 4

log = logging.getLogger("famm")


def _named_paths(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise InputError(f"expected NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        out[name] = path
    return out


def _resolve(base, path):
    p = Path(path)
    return p if p.is_absolute() else Path(base) / p


def cmd_fit(args):
    from .inference import coef_with_ci, default_eval_grid, fitted_with_ci, residual_curves
    from .io import (
        ensure_writable_dir, fit_summary, load_dataset, plot_curve, plot_surface, safe_name,
        write_json, write_matrix_csv, write_term_estimate,
    )
    from .solver import fit_model
    from .spec import load_model_spec, spec_hash

    spec = load_model_spec(args.spec)
    if args.seed is not None:
        spec.optimizer.seed = args.seed
    base = Path(args.spec).parent
    data = spec.data
    responses = args.responses or (data.get("responses") and _resolve(base, data["responses"]))
    if not responses:
        raise InputError("no response file: pass --responses or set data.responses in the spec")
    covariates = args.covariates or (data.get("covariates") and _resolve(base, data["covariates"]))
    functional = {k: _resolve(base, v) for k, v in data.get("functional", {}).items()}
    functional.update(_named_paths(args.functional))
    groupings = args.groupings.split(",") if args.groupings else data.get("groupings", [])
    out_dir = args.out or spec.outputs.get("dir")
    if not out_dir:
        raise InputError("no output directory: pass --out or set outputs.dir in the spec")
    out = ensure_writable_dir(out_dir)

    ds = load_dataset(responses, covariates, functional, groupings)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = fit_model(ds, spec)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)

    level = spec.outputs.get("level", 0.95)
    summary = fit_summary(model, spec_hash(spec), spec.optimizer.seed)
    summary["warnings"] = [str(w.message) for w in caught]
    write_json(out / "summary.json", summary)

    terms_dir = out / "terms"
    terms_dir.mkdir(exist_ok=True)
    plots = spec.outputs.get("plots", True)
    if plots:
        (out / "plots").mkdir(exist_ok=True)
    for term in model.terms:
        grid, shape = default_eval_grid(model, term)
        est = coef_with_ci(model, term.label, grid, level)
        name = safe_name(term.label)
        write_term_estimate(terms_dir / f"{name}.csv", est)
        if not plots:
            continue
        if shape is None and est.values.size > 1:
            plot_curve(out / "plots" / f"{name}.svg", est)
        elif shape is not None and shape[1] > 1 and term.kind not in ("ffpc_smooth", "functional_smooth"):
            xlabel = "s" if term.kind == "functional_linear" else "covariate"
            plot_surface(out / "plots" / f"{name}.svg", est, shape[0], shape[1], xlabel=xlabel)

    fit = fitted_with_ci(model, level)
    ids = ds.curve_ids[ds.curve_index]
    with open(out / "fitted.csv", "w", encoding="utf-8") as fh:
        from .io import fmt

        fh.write("curve_id,t,y,fitted,se,ci_lo,ci_hi\n")
        for row in zip(ids, ds.t, ds.y, fit.values, fit.se, fit.ci_lower, fit.ci_upper):
            fh.write(",".join([str(int(row[0]))] + [fmt(v) for v in row[1:]]) + "\n")
    res = residual_curves(model)
    if res.covariance is not None:
        write_matrix_csv(out / "residual_covariance.csv", res.covariance, res.grid)
        write_matrix_csv(out / "residual_correlation.csv", res.correlation, res.grid)
    print(json.dumps({k: summary[k] for k in ("converged", "reml_value", "sigma2_eps", "edf_total")}))
    return EXIT_OK


def cmd_simulate(args):
    from .io import ensure_writable_dir, write_dataset, write_json, fmt
    from .simulation import SimConfig, default_model_spec, generate_scenario, results_csv, run_study
    from .spec import serialize_model_spec

    cfg = SimConfig(args.scenario, args.M, args.ni, args.T, args.snr_b, args.snr_eps, args.reps, args.seed)
    if args.write_data:
        d = ensure_writable_dir(args.write_data)
        ds, truth = generate_scenario(cfg, 0)
        block = write_dataset(d, ds)
        spec = default_model_spec(cfg.scenario)
        spec.data = block
        (d / "spec.json").write_text(serialize_model_spec(spec) + "\n")
        with open(d / "truth.csv", "w", encoding="utf-8") as fh:
            comps = list(truth.components)
            fh.write(",".join(["curve_id", "t", "predictor"] + comps) + "\n")
            ids = ds.curve_ids[ds.curve_index]
            cols = [truth.predictor] + [truth.components[c] for c in comps]
            for k in range(ds.n_obs):
                fh.write(",".join([str(int(ids[k])), fmt(ds.t[k])] + [fmt(c[k]) for c in cols]) + "\n")
        write_json(d / "truth_meta.json", {"sigma_eps": truth.sigma_eps, "labels": truth.labels})
    if args.out:
        out = Path(args.out)
        ensure_writable_dir(out.parent if str(out.parent) else ".")
        results = run_study([cfg], workers=args.workers)
        text = results_csv(results, record_timing=args.record_timing)
        out.write_text(text)
        failed = sum(r.error is not None for r in results)
        print(f"{len(results)} replicates, {failed} failed -> {out}")
    return EXIT_OK


def cmd_fpca(args):
    from .fpca import fpca
    from .io import ensure_writable_dir, read_wide_csv, write_json, write_matrix_csv, write_wide_csv, fmt

    out = ensure_writable_dir(args.out)
    grid, ids, values = read_wide_csv(args.curves)
    threshold = None if args.n_components else args.threshold
    res = fpca(values, grid, threshold=threshold or 0.995, n_components=args.n_components)
    K = res.n_components
    write_wide_csv(out / "eigenfunctions.csv", grid, list(range(1, K + 1)), res.eigenfunctions.T)
    with open(out / "eigenvalues.csv", "w", encoding="utf-8") as fh:
        fh.write("component,eigenvalue\n")
        for k, v in enumerate(res.eigenvalues, start=1):
            fh.write(f"{k},{fmt(v)}\n")
    with open(out / "scores.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(["curve_id"] + [f"score_{k}" for k in range(1, K + 1)]) + "\n")
        for cid, row in zip(ids, res.scores):
            fh.write(",".join([str(cid)] + [fmt(v) for v in row]) + "\n")
    write_matrix_csv(out / "covariance.csv", res.smoothed_covariance, grid)
    write_json(out / "fpca.json", {"n_components": K, "noise_variance": res.noise_variance})
    print(f"{K} components, noise variance {res.noise_variance:.6g}")
    return EXIT_OK


def cmd_check(args):
    from .basis import bspline_basis
    from .constraints import effective_rank, nullspace_overlap
    from .data import FunctionalCovariate
    from .io import read_wide_csv

    paths = _named_paths(args.functional)
    if not paths:
        raise InputError("give at least one --functional NAME=PATH")
    worst = 0.0
    print("covariate,effective_rank,overlap")
    for name, path in paths.items():
        grid, _, values = read_wide_csv(path)
        if np.isnan(values).any():
            raise InputError(f"{path}: functional covariates must be complete (reconstruct them first)")
        x = FunctionalCovariate(grid, values)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            r = effective_rank(x, args.threshold)
        _, sb = bspline_basis(grid, args.k_s, 3, args.order_s)
        ov = nullspace_overlap(x, sb, args.threshold)
        worst = max(worst, ov)
        print(f"{name},{r},{ov:.6f}")
    return EXIT_CHECK_FAILED if worst > args.max_overlap else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="famm", description="Functional additive mixed models")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model specification to data files")
    f.add_argument("--spec", required=True, help="JSON model specification")
    f.add_argument("--responses", help="long CSV curve_id,t,y (overrides the spec)")
    f.add_argument("--covariates", help="per-curve covariate CSV (overrides the spec)")
    f.add_argument("--functional", action="append", metavar="NAME=PATH", help="wide functional covariate CSV")
    f.add_argument("--groupings", help="comma-separated grouping columns of the covariate CSV")
    f.add_argument("--out", help="output directory")
    f.add_argument("--seed", type=int, help="optimizer multistart seed")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run simulation replicates")
    s.add_argument("--scenario", type=int, required=True)
    s.add_argument("--M", type=int, default=10)
    s.add_argument("--ni", type=int, default=3)
    s.add_argument("--T", type=int, default=30)
    s.add_argument("--snr-b", type=float, default=1.0)
    s.add_argument("--snr-eps", type=float, default=5.0)
    s.add_argument("--reps", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1, help="worker processes (capped by FAMM_THREADS)")
    s.add_argument("--out", help="results CSV")
    s.add_argument("--record-timing", action="store_true",
                   help="fill the seconds column (makes output run-dependent)")
    s.add_argument("--write-data", metavar="DIR", help="write replicate 0 data, truth and a matching spec")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("fpca", help="functional principal components of a wide curve CSV")
    c.add_argument("--curves", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--threshold", type=float, default=0.995)
    c.add_argument("--n-components", type=int)
    c.set_defaults(func=cmd_fpca)

    k = sub.add_parser("check-identifiability", help="effective rank and penalty-nullspace overlap")
    k.add_argument("--functional", action="append", metavar="NAME=PATH", required=True)
    k.add_argument("--k-s", type=int, default=5)
    k.add_argument("--order-s", type=int, default=1)
    k.add_argument("--threshold", type=float, default=0.995)
    k.add_argument("--max-overlap", type=float, default=0.9)
    k.set_defaults(func=cmd_check)

    v = sub.add_parser("version", help="print the version")
    v.set_defaults(func=lambda a: print(__version__) or EXIT_OK)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
