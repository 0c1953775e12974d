"""Command-line interface.

Exit codes: 0 success, 1 validation or input error, 2 target not inducible,
3 effect not identifiable.  ``PMDAG_SEED`` supplies the default seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from pmdag import bench as bench_mod
from pmdag import experiment as experiment_mod
from pmdag.gauss import GaussError, load_cov_csv, save_cov_csv
from pmdag.generate import GenSpec, canonical, canonical_names, ground_truth, random_pmdag
from pmdag.graph import GraphError, load_graph, save_graph, validate
from pmdag.identify import (
    NOT_IDENTIFIABLE,
    NOT_INDUCIBLE,
    FitBudgetExhausted,
    InterventionQuery,
    identify,
)
from pmdag.solver import FitConfig, SolverError, fit, fit_result_dict, save_trace_csv
from pmdag.sync import build_masks, synchronize

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NOT_INDUCIBLE = 2
EXIT_NOT_IDENTIFIABLE = 3

METHOD_ALIASES = {"cov": "covariance", "acc": "accumulation", "reduced": "reduced"}


def _default_seed() -> int:
    return int(os.environ.get("PMDAG_SEED", "0"))


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", choices=["kl", "bha"], default="kl")
    p.add_argument("--method", choices=sorted(METHOD_ALIASES), default="cov")
    p.add_argument("--optimizer", choices=["sgd", "adamax"], default="adamax")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=12000, help="maximum iterations")
    p.add_argument("--eps", type=float, default=1e-12, help="minimum loss improvement")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--kl-tol", type=float, default=1e-5)


def _fit_config(args) -> FitConfig:
    seed = args.seed if args.seed is not None else _default_seed()
    return FitConfig(
        loss=args.loss,
        method=METHOD_ALIASES[args.method],
        optimizer=args.optimizer,
        lr=args.lr,
        max_iters=args.epochs,
        min_improvement=args.eps,
        seed=seed,
        restarts=args.restarts,
        kl_tol=args.kl_tol,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmdag", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a graph JSON file")
    p.add_argument("graph")
    p.add_argument("--strict", action="store_true", help="require every latent to be a root")

    p = sub.add_parser("sync", help="print the layered form of a graph")
    p.add_argument("graph")
    p.add_argument("--dot", help="also write the layered drawing as DOT")
    p.add_argument("--masks", action="store_true", help="print the per-layer masks")

    p = sub.add_parser("gen", help="generate a random graph")
    p.add_argument("--v", type=int, required=True)
    p.add_argument("--lstar", type=float, default=0.0)
    p.add_argument("--estar", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", help="write graph JSON here (default stdout)")

    p = sub.add_parser("canon", help="emit one of the canonical benchmark graphs")
    p.add_argument("name", help="one of: " + ", ".join(canonical_names()))
    p.add_argument("-o", "--output")
    p.add_argument("--ground-truth-seed", type=int, default=None,
                   help="also write <output>.cov.csv with an exact ground-truth covariance")

    p = sub.add_parser("fit", help="fit a graph to a covariance CSV")
    p.add_argument("graph")
    p.add_argument("cov")
    _add_fit_flags(p)
    p.add_argument("-o", "--output", help="write the fit result JSON here (default stdout)")
    p.add_argument("--trace", help="write the loss trace CSV here")

    p = sub.add_parser("identify", help="probe effect identifiability by repeated fits")
    p.add_argument("graph")
    p.add_argument("cov")
    p.add_argument("--do", action="append", required=True, metavar="NODE=VALUE",
                   help="intervention assignment; repeatable")
    p.add_argument("--effect", action="append", required=True, help="effect node; repeatable")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--tol-id", type=float, default=1e-2)
    p.add_argument("--tol-fit", type=float, default=1e-5)
    p.add_argument("--retry-cap", type=int, default=5)
    _add_fit_flags(p)
    p.add_argument("-o", "--output", help="write the verdict JSON here (default stdout)")

    p = sub.add_parser("bench", help="time forward/backward phases on random graphs")
    p.add_argument("--v", default="16,32", help="comma-separated visible counts")
    p.add_argument("--lstar", default="0,0.5")
    p.add_argument("--estar", default="0,0.5,1.0")
    p.add_argument("--methods", default="covariance,accumulation")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", required=True, help="CSV output path")

    p = sub.add_parser("experiment", help="run a serialized experiment JSON")
    p.add_argument("spec", help="experiment JSON file")
    p.add_argument("-o", "--outdir", required=True)

    return parser


def _emit(data: dict, path: str | None) -> None:
    text = json.dumps(data, indent=2)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _cmd_validate(args) -> int:
    g = load_graph(args.graph)
    validate(g.nodes, g.edges, strict=args.strict)
    print(f"ok: {len(g.nodes)} nodes, {len(g.edges)} edges, "
          f"{len(g.visible_names)} visible, strict={g.is_strict}")
    return EXIT_OK


def _cmd_sync(args) -> int:
    g = load_graph(args.graph)
    sync = synchronize(g)
    print(sync.describe())
    if args.masks:
        masks = build_masks(sync)
        for l, (mask, const) in enumerate(zip(masks.trainable, masks.constants), start=1):
            print(f"layer {l} trainable ({mask.shape[0]}x{mask.shape[1]}):")
            for row in mask.astype(int):
                print("  " + " ".join(str(x) for x in row))
            print(f"layer {l} constants:")
            for row in const.astype(int):
                print("  " + " ".join(str(x) for x in row))
        print(f"trainable entries: {masks.n_trainable}")
    if args.dot:
        with open(args.dot, "w", encoding="utf-8") as fh:
            fh.write(sync.to_dot() + "\n")
    return EXIT_OK


def _cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    g = random_pmdag(GenSpec(v=args.v, l_star=args.lstar, e_star=args.estar, seed=seed))
    if args.output:
        save_graph(g, args.output)
        print(f"wrote {args.output}: {len(g.nodes)} nodes, {len(g.edges)} edges")
    else:
        print(g.to_json(indent=2))
    return EXIT_OK


def _cmd_canon(args) -> int:
    g = canonical(args.name)
    if args.output:
        save_graph(g, args.output)
        print(f"wrote {args.output}")
        if args.ground_truth_seed is not None:
            _params, cov = ground_truth(g, args.ground_truth_seed)
            save_cov_csv(cov, args.output + ".cov.csv")
            print(f"wrote {args.output}.cov.csv")
    else:
        print(g.to_json(indent=2))
    return EXIT_OK


def _cmd_fit(args) -> int:
    g = load_graph(args.graph)
    target = load_cov_csv(args.cov)
    config = _fit_config(args)
    params, report = fit(g, target, config)
    if args.trace:
        save_trace_csv(report, args.trace)
    _emit(fit_result_dict(g, params, report), args.output)
    return EXIT_OK


def _parse_do(items) -> tuple[tuple[str, ...], tuple[float, ...]]:
    targets, values = [], []
    for item in items:
        if "=" not in item:
            raise GraphError(f"--do expects NODE=VALUE, got {item!r}")
        name, _, value = item.partition("=")
        targets.append(name.strip())
        values.append(float(value))
    return tuple(targets), tuple(values)


def _cmd_identify(args) -> int:
    g = load_graph(args.graph)
    target = load_cov_csv(args.cov)
    config = _fit_config(args)
    targets, values = _parse_do(args.do)
    query = InterventionQuery(targets, values, tuple(args.effect))
    verdict = identify(g, target, query, config, iters=args.iters,
                       tol_fit=args.tol_fit, tol_id=args.tol_id,
                       retry_cap=args.retry_cap)
    _emit(verdict.to_dict(), args.output)
    if verdict.outcome == NOT_INDUCIBLE:
        return EXIT_NOT_INDUCIBLE
    if verdict.outcome == NOT_IDENTIFIABLE:
        return EXIT_NOT_IDENTIFIABLE
    return EXIT_OK


def _cmd_bench(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    rows = bench_mod.bench(
        v_values=[int(x) for x in args.v.split(",")],
        l_stars=[float(x) for x in args.lstar.split(",")],
        e_stars=[float(x) for x in args.estar.split(",")],
        methods=[METHOD_ALIASES.get(m.strip(), m.strip()) for m in args.methods.split(",")],
        repetitions=args.reps,
        seed=seed,
    )
    bench_mod.write_bench_csv(rows, args.output)
    print(f"wrote {args.output}: {len(rows)} rows")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        exp = experiment_mod.Experiment.from_dict(json.load(fh))
    summary = experiment_mod.run_experiment(exp, args.outdir)
    print(f"wrote {args.outdir}: {summary['converged_count']}/{len(summary['repetitions'])} "
          f"repetitions converged")
    return EXIT_OK


COMMANDS = {
    "validate": _cmd_validate,
    "sync": _cmd_sync,
    "gen": _cmd_gen,
    "canon": _cmd_canon,
    "fit": _cmd_fit,
    "identify": _cmd_identify,
    "bench": _cmd_bench,
    "experiment": _cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (GraphError, GaussError, SolverError, FitBudgetExhausted, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
