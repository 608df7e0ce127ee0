"""Command line interface: ``taglasso fit | simulate | export-dot``.

Exit codes: 0 success, 2 malformed input, 3 solver divergence,
4 no grid cell satisfies the block-count constraint.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import logging
import os
import sys

import numpy as np

from . import __version__
from .io import (FitDocument, InputError, SchemaError, build_document, file_sha256,
                 read_matrix_csv, read_symmetric_csv, read_tree_csv)
from .model import NotPositiveDefiniteError, SampleCovariance, sample_covariance
from .selection import (ConstraintSet, FoldError, SelectionError, constrained_select,
                        cross_validate, lambda_grid, refit)
from .simulation import (DESIGNS, ESTIMATORS, DesignError, DesignSpec, format_summary,
                         run_study, summarize)
from .solver import DivergenceError, Penalties, SolverConfig, la_admm
from .tree import (AggregationTree, StructureError, TreeError, aggregate_precision,
                   block_means, nonzero_block_edges, validate_tree)

log = logging.getLogger("taglasso")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_INFEASIBLE = 0, 2, 3, 4
JOBS_ENV = "TAGLASSO_JOBS"


class UsageError(ValueError):
    """Invalid flag combination or value."""


def default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp for reproducible output
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
           else _dt.datetime.now(_dt.timezone.utc))
    return now.replace(microsecond=0).isoformat()


# -- fit ---------------------------------------------------------------------------------

def _load_inputs(args):
    x = None
    if args.data:
        if args.cov:
            raise UsageError("give either --data or --cov, not both")
        x, names = read_matrix_csv(args.data)
        if x.shape[0] < 2:
            raise InputError(args.data, None, f"need at least 2 data rows, found {x.shape[0]}")
        if x.shape[1] < 2:
            raise InputError(args.data, None, "need at least 2 variables")
        s = sample_covariance(x)
    elif args.cov:
        if args.n is None:
            raise UsageError("--cov needs --n (the sample count)")
        m, names = read_symmetric_csv(args.cov)
        try:
            s = SampleCovariance(m, n=args.n)
        except ValueError as exc:
            raise InputError(args.cov, None, str(exc)) from None
    else:
        raise UsageError("one of --data or --cov is required")
    names = names or [f"X{j + 1}" for j in range(s.p)]

    if args.tree:
        tree = read_tree_csv(args.tree)
        problems = validate_tree(tree, names)
        if problems:
            raise InputError(args.tree, None, "; ".join(problems))
        tree = tree.with_variables(names)
    else:
        tree = AggregationTree.star(s.p, names)
    return x, s, names, tree


def _aggregated(omega, d, partition):
    try:
        agg = aggregate_precision(omega, d, partition)
    except StructureError as exc:
        log.warning("no aggregated matrix: %s", exc)
        return None
    return {"c": agg.c.tolist(), "omega_agg": agg.omega_agg.tolist(),
            "floored": [int(j) for j in np.flatnonzero(agg.floored)],
            "max_deviation": float(agg.max_deviation)}


def cmd_fit(args) -> int:
    x, s, names, tree = _load_inputs(args)
    config = SolverConfig(rho1=args.rho1, t_stages=args.stages, maxit=args.maxit)
    selection = None
    if args.cv:
        if x is None:
            raise UsageError("--cv needs the raw data (--data)")
        if args.lambda1 is not None or args.lambda2 is not None:
            raise UsageError("--cv chooses the penalties; drop --lambda1/--lambda2")
        grid = lambda_grid(s, tree, size=args.grid_size, config=config)
        sel = cross_validate(x, tree, grid, folds=args.folds, config=config, seed=args.seed,
                             full_fits=args.kmax is not None, jobs=args.jobs)
        lam1, lam2 = (constrained_select(sel, k_max=args.kmax) if args.kmax is not None
                      else sel.chosen)
        selection = {"lambda1_values": sel.lambda1_values.tolist(),
                     "lambda2_values": sel.lambda2_values.tolist(),
                     "cv_scores": np.where(np.isfinite(sel.cv_scores), sel.cv_scores, None).tolist(),
                     "folds": args.folds, "kmax": args.kmax}
    else:
        if args.lambda2 is None:
            raise UsageError("give --lambda2 (and optionally --lambda1), or --cv")
        lam1 = 0.0 if args.lambda1 is None else args.lambda1
        lam2 = args.lambda2
    penalties = Penalties(float(lam1), float(lam2))
    fit = la_admm(s, tree, penalties, config)
    am = fit.ancestor
    residuals = {"fit": fit.residual}
    if args.refit:
        est = refit(s, tree, ConstraintSet.from_fit(fit), config)
        omega, gamma, d, partition = est.omega, est.gamma, est.d, est.partition
        support = omega != 0
        residuals["refit"] = est.converged_residual
    else:
        omega, gamma, d, partition, support = fit.omega, fit.gamma, fit.d, fit.partition, fit.support
    i, j = np.nonzero(np.triu(support, 1))
    edges = list(zip(i.tolist(), j.tolist()))

    provenance = {"inputs": {}, "seed": args.seed, "timestamp": _timestamp(),
                  "version": __version__}
    for key in ("data", "cov", "tree"):
        path = getattr(args, key)
        if path:
            provenance["inputs"][key] = {"path": os.path.basename(path), "sha256": file_sha256(path)}
    if args.cov:
        provenance["n"] = args.n
    doc = build_document(
        variables=names, omega=omega, gamma=gamma, d=d, partition=partition,
        node_order=am.node_order, edges=edges, penalties=(penalties.lambda1, penalties.lambda2),
        config={"rho1": config.rho1, "t_stages": config.t_stages, "maxit": config.maxit,
                "rho_factor": config.rho_factor, "dual_init": config.dual_init},
        residuals=residuals, aggregated=_aggregated(omega, d, partition), selection=selection,
        provenance=provenance, refitted=args.refit)
    doc.save(args.out)
    print(f"K={partition.k} edges={len(edges)} residual={fit.residual:.3g} "
          f"lambda1={penalties.lambda1:.6g} lambda2={penalties.lambda2:.6g}")
    return EXIT_OK


# -- simulate ------------------------------------------------------------------------------

def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def cmd_simulate(args) -> int:
    estimators = [e.strip() for e in args.estimators.split(",") if e.strip()]
    bad = [e for e in estimators if e not in ESTIMATORS]
    if bad or not estimators:
        raise UsageError(f"unknown estimator(s) {bad}; valid names: {', '.join(ESTIMATORS)}")
    sizes = _int_list(args.sizes) if args.sizes else None
    try:
        spec = DesignSpec(args.design, p=args.p, block_sizes=sizes, k=args.k,
                          n_edges=args.n_edges, seed=args.seed)
    except DesignError as exc:
        raise UsageError(str(exc)) from None
    if args.n < 2 or args.reps < 1:
        raise UsageError("--n must be at least 2 and --reps at least 1")
    config = SolverConfig(rho1=args.rho1, t_stages=args.stages, maxit=args.maxit)
    result = run_study(spec, n=args.n, reps=args.reps, estimators=estimators, config=config,
                       seed=args.seed, folds=args.folds, jobs=args.jobs)
    result.to_csv(args.out)
    print(f"design={spec.kind} p={spec.p} n={args.n} K={spec.k} reps={args.reps} "
          "(standard errors in parentheses)")
    print(format_summary(summarize(result, estimators)))
    failed = sum(1 for d in result.details if d.get("error"))
    if failed:
        print(f"{failed} estimator fits failed; their rows hold NA")
    return EXIT_OK


# -- export-dot -----------------------------------------------------------------------------

def _q(name: str) -> str:
    return '"' + str(name).replace("\\", "\\\\").replace('"', '\\"') + '"'


def full_graph_dot(doc: FitDocument) -> str:
    names = doc.variables
    lines = ["graph full {", "  node [shape=ellipse];"]
    lines += [f"  {_q(v)};" for v in names]
    lines += [f"  {_q(names[i])} -- {_q(names[j])};" for i, j in sorted(doc.edges)]
    lines.append("}")
    return "\n".join(lines) + "\n"


def aggregated_graph_dot(doc: FitDocument, ctol: float = 1e-6) -> str:
    from .tree import Partition
    partition = Partition(doc.labels)
    agg = doc.content.get("aggregated")
    if agg is not None:
        c = np.array(agg["c"], dtype=float)
    else:
        c = block_means(doc.omega - np.diag(doc.d), partition)
    names = doc.variables
    lines = ["graph aggregated {", "  node [shape=circle];"]
    for b, members in enumerate(partition.blocks):
        size = len(members)
        label = ", ".join(names[j] for j in members)
        lines.append(f"  B{b + 1} [label={_q(label)}, members={size}, "
                     f"width={0.5 + 0.25 * np.sqrt(size):.4f}];")
    for k, l in nonzero_block_edges(c, ctol):
        lines.append(f"  B{k + 1} -- B{l + 1} [weight={c[k, l]:.6g}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_export_dot(args) -> int:
    try:
        doc = FitDocument.load(args.fit)
    except OSError as exc:
        raise InputError(args.fit, None, exc.strerror or str(exc)) from None
    prefix = args.out_prefix or os.path.splitext(args.fit)[0]
    full, agg = prefix + "_full.dot", prefix + "_aggregated.dot"
    with open(full, "w") as fh:
        fh.write(full_graph_dot(doc))
    with open(agg, "w") as fh:
        fh.write(aggregated_graph_dot(doc, args.ctol))
    print(f"wrote {full} and {agg}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------------

def _solver_flags(p):
    p.add_argument("--rho1", type=float, default=0.01, help="initial ADMM penalty (default 0.01)")
    p.add_argument("--stages", type=int, default=10, help="number of rho-doubling stages (default 10)")
    p.add_argument("--maxit", type=int, default=100, help="iterations per stage (default 100)")
    p.add_argument("--jobs", type=int, default=default_jobs(),
                   help=f"worker processes (default from ${JOBS_ENV}, else 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taglasso",
                                     description="Tree-aggregated graphical lasso.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit on a data or covariance matrix")
    f.add_argument("--data", help="CSV of n rows by p variables (optional header)")
    f.add_argument("--cov", help="CSV of a p x p covariance matrix")
    f.add_argument("--n", type=int, help="sample count behind --cov")
    f.add_argument("--tree", help="tree CSV node_id,parent_id,label (default: star tree)")
    f.add_argument("--lambda1", type=float, help="aggregation penalty (default 0)")
    f.add_argument("--lambda2", type=float, help="edge sparsity penalty")
    f.add_argument("--cv", action="store_true", help="choose penalties by cross-validation")
    f.add_argument("--kmax", type=int, help="with --cv, only cells with at most this many blocks")
    f.add_argument("--folds", type=int, default=5)
    f.add_argument("--grid-size", type=int, default=10)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--refit", action=argparse.BooleanOptionalAction, default=True,
                   help="refit without penalties under the fitted pattern (default on)")
    f.add_argument("--out", required=True, help="output fit document (JSON)")
    _solver_flags(f)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a simulation study")
    s.add_argument("--design", choices=DESIGNS, default="chain")
    s.add_argument("--p", type=int, default=15)
    s.add_argument("--n", type=int, default=120)
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--estimators", default=",".join(ESTIMATORS),
                   help=f"comma-separated subset of {','.join(ESTIMATORS)}")
    s.add_argument("--sizes", help="comma-separated block sizes")
    s.add_argument("--k", type=int, default=3, help="number of blocks when --sizes is omitted")
    s.add_argument("--n-edges", type=int, default=10, help="edges of the unstructured design")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="metrics CSV")
    _solver_flags(s)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("export-dot", help="write full and aggregated graphs in DOT format")
    e.add_argument("fit", help="fit document written by 'taglasso fit'")
    e.add_argument("--out-prefix", help="output path prefix (default: the fit path without extension)")
    e.add_argument("--ctol", type=float, default=1e-6,
                   help="aggregated edges need |c_kl| above this (default 1e-6)")
    e.set_defaults(func=cmd_export_dot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, SchemaError, TreeError, UsageError, FoldError, DesignError,
            NotPositiveDefiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except SelectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ValueError as exc:
        # remaining value errors come from invalid numeric inputs or flags
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
