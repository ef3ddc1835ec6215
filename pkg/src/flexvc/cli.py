"""Command-line interface: ``flexvc simulate | fit | bandwidth | check-design``."""
from __future__ import annotations

import argparse
import csv
import sys
import warnings
from pathlib import Path

import numpy as np

from .kernels import KernelSpec
from .model import build_group_view, check_design, load_model, read_csv, validate_dataset


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _names(text: str) -> tuple:
    return tuple(v.strip().lower() for v in text.split(",") if v.strip())


def _load(args):
    spec = load_model(args.model)
    data = read_csv(args.data, spec)
    problems = validate_dataset(data, spec)
    if problems:
        for p in problems[:20]:
            print(f"invalid data: {p}", file=sys.stderr)
        if len(problems) > 20:
            print(f"... {len(problems) - 20} more", file=sys.stderr)
        raise SystemExit(2)
    return spec, data, build_group_view(spec)


def _bandwidths(args, spec, data, view):
    if args.bandwidths == "auto":
        from .bandwidth import SelectionConfig, select_bandwidths

        h, _ = select_bandwidths(data, spec, view,
                                 config=SelectionConfig(degree=args.pilot_degree))
        return tuple(float(min(v, 0.5)) for v in h)
    h = _floats(args.bandwidths)
    if len(h) == 1:
        h = h * view.p
    if len(h) != view.p:
        raise SystemExit(f"need {view.p} bandwidths (one per smoothing covariate), got {len(h)}")
    return h


def cmd_simulate(args) -> int:
    from .simulation import ExperimentConfig, run_experiment

    if args.bandwidths in ("auto", "reference"):
        bw = args.bandwidths
    else:
        bw = _floats(args.bandwidths)
    cfg = ExperimentConfig(model=args.model, estimators=_names(args.estimator), n=_ints(args.n),
                           reps=args.reps, seed=args.seed, bandwidths=bw, knots=args.knots,
                           grid_size=args.grid, workers=args.workers, out=args.out)
    results = run_experiment(cfg)
    for (est, n), cell in results.items():
        table = cell["table"]
        status = "" if cell["complete"] else "  (incomplete)"
        print(f"{est} n={n}{status}")
        if table is None:
            continue
        for row in table.rows:
            iv = "-" if row["IV"] is None else f"{row['IV']:.4f}"
            print(f"  {row['component']:>8}  IMSE {row['IMSE']:.4f}  ISB {row['ISB']:.4f}  IV {iv}")
    return 0


def cmd_fit(args) -> int:
    from .sbf import SBFConfig, fit_sbf

    spec, data, view = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.estimator == "spline":
        from .spline import fit_spline

        fit = fit_spline(data, spec, view, K=args.knots, grid_size=args.grid)
    else:
        h = _bandwidths(args, spec, data, view)
        cfg = SBFConfig(grid_size=args.grid, kind=args.estimator)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            fit = fit_sbf(data, spec, view, KernelSpec(h), config=cfg)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "j", "k", "z", "value"])
        for k, slot, j, l in view.components():
            for z, v in zip(fit.grids[k], fit.values[k][slot]):
                w.writerow([f"f[{j},{l}]", j, l, repr(float(z)), repr(float(v))])
    trace = [
        f"estimator = {fit.kind}",
        f"bandwidths = {list(fit.bandwidths) if fit.bandwidths else []}",
        f"converged = {str(fit.converged).lower()}",
        f"outer_iterations = {fit.outer_iterations}",
        f"criteria = {[float(c) for c in fit.criteria]}",
        f"residuals = {[float(r) for r in fit.residuals]}",
        f"inner_sweeps = {list(fit.inner_sweeps)}",
        f"warnings = {fit.warnings}",
    ]
    (out / "trace.txt").write_text("\n".join(trace) + "\n")
    print(f"{fit.kind}: converged={fit.converged} outer={fit.outer_iterations} -> {out}")
    return 0 if fit.converged else 1


def cmd_bandwidth(args) -> int:
    from .bandwidth import SelectionConfig, select_bandwidths

    spec, data, view = _load(args)
    h, diag = select_bandwidths(data, spec, view, config=SelectionConfig(degree=args.pilot_degree))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "objective_surface.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sweep", "axis", "covariate", "c", "objective"])
        for sweep, k, c, value in diag["surface"]:
            w.writerow([sweep, k, view.axes[k], repr(c), repr(value)])
    lines = [f"h = {[float(v) for v in h]}", f"c = {list(diag['c'])}",
             f"objective = {diag['objective']!r}",
             f"at_grid_bound = {[view.axes[k] for k in diag['at_bound']]}"]
    (out / "bandwidths.txt").write_text("\n".join(lines) + "\n")
    print(",".join(f"{v:.4f}" for v in h))
    return 0


def cmd_check_design(args) -> int:
    spec, data, view = _load(args)
    h = _floats(args.bandwidths)
    report = check_design(data, spec, view, h if len(h) > 1 else h[0], grid_size=args.grid,
                          threshold=args.threshold)
    rows = []
    for k, (z, ev) in enumerate(zip(report.grid, report.min_eigenvalues)):
        for zz, e in zip(z, ev):
            rows.append([view.axes[k], repr(float(zz)), "" if np.isnan(e) else repr(float(e)),
                         bool(np.isnan(e) or e < report.threshold)])
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["covariate", "z", "min_eigenvalue", "flagged"])
            w.writerows(rows)
    for k, ev in enumerate(report.min_eigenvalues):
        finite = ev[np.isfinite(ev)]
        low = f"{finite.min():.4g}" if finite.size else "undefined"
        print(f"x{view.axes[k]}: min eigenvalue {low}, flagged {len(report.flagged[k])}, "
              f"undefined {len(report.undefined[k])}")
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexvc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Monte-Carlo replication of a simulation design")
    p.add_argument("--model", choices=["a", "b"], default="a")
    p.add_argument("--estimator", default="sbf", help="comma list of sbf, ll, spline, oracle")
    p.add_argument("--n", default="500", help="comma list of sample sizes")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int, default=20240101)
    p.add_argument("--bandwidths", default="reference", help="reference | auto | h1,h2,...")
    p.add_argument("--knots", type=int, default=1)
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one dataset and write the component curves")
    p.add_argument("--data", required=True, help="CSV with header y,x1,...,xD")
    p.add_argument("--model", required=True, help="YAML model config")
    p.add_argument("--estimator", choices=["nw", "ll", "spline"], default="nw")
    p.add_argument("--bandwidths", default="auto", help="auto | h | h1,h2,...")
    p.add_argument("--pilot-degree", type=int, default=3)
    p.add_argument("--knots", type=int, default=1)
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bandwidth", help="plug-in bandwidth selection")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--pilot-degree", type=int, default=3)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_bandwidth)

    p = sub.add_parser("check-design", help="smallest eigenvalues of the local design matrices")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--bandwidths", required=True, help="h or h1,h2,...")
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--threshold", type=float, default=1e-6)
    p.add_argument("--out", help="optional CSV of per-grid-point eigenvalues")
    p.set_defaults(func=cmd_check_design)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
