"""Command-line entry point: simulate, fit, bench, summarize, export-graph.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (
    BASELINE_KS,
    METHODS,
    BenchConfig,
    SimScenario,
    generate,
    mask_holdout,
    reference_grid,
    run_benchmark,
)
from .gibbs import ChainError, run_chain
from .io import (
    InputError,
    atomic_directory,
    dump_json,
    parse_hp_value,
    read_config,
    read_mask,
    read_matrix,
    write_config,
    write_mask,
    write_matrix,
)
from .model import CountMatrix, Covariates, HyperParams, ValidationError
from .postprocess import (
    GRAPH_THRESHOLD,
    align_contributions,
    beta_table_csv,
    covariance_graph,
    representative_draw,
    summarize_beta,
)
from .rng import NumericalError, RngStream
from .store import load_store, save_store

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
log = logging.getLogger("cosin")


class UsageError(ValueError):
    pass


def _hyperparams(args) -> HyperParams:
    base = HyperParams.fast() if args.fast else HyperParams()
    overrides = read_config(args.config) if getattr(args, "config", None) else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            overrides[key.strip()] = parse_hp_value(key.strip(), value)
        except KeyError:
            raise UsageError(f"unknown hyperparameter {key.strip()!r}") from None
        except ValueError:
            raise UsageError(f"bad value {value!r} for {key.strip()}") from None
    if args.seed is not None:
        overrides["seed"] = args.seed
    hp = replace(base, **overrides)
    hp.check()
    return hp


def _manifest(args, argv, **extra) -> dict:
    return {"command": args.command, "argv": list(argv), "version": __version__, **extra}


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args, argv) -> int:
    scen = SimScenario(args.n, args.p, args.sigma, args.seed, args.holdout)
    truth = generate(scen)
    y = mask_holdout(truth, scen.holdout_fraction, RngStream(scen.replicate_seed, 1))
    with atomic_directory(args.out) as out:
        write_matrix(out / "y.csv", truth.y.values, integer=True)
        write_matrix(out / "x.csv", np.ones((scen.n, 1), dtype=np.int64), integer=True)
        write_matrix(out / "wB.csv", truth.w_B.astype(np.int64), integer=True)
        write_mask(out / "mask.csv", y.mask)
        tdir = out / "truth"
        tdir.mkdir()
        write_matrix(tdir / "z.csv", truth.z_true)
        write_matrix(tdir / "eta.csv", truth.eta)
        write_matrix(tdir / "lambda.csv", truth.lam)
        for h, c in enumerate(truth.contributions, start=1):
            write_matrix(tdir / f"C{h}.csv", c)
        (out / "manifest.json").write_text(dump_json(_manifest(args, argv, scenario=scen.__dict__)))
    return EXIT_OK


def _load_fit_inputs(args) -> tuple[CountMatrix, Covariates]:
    y = read_matrix(args.y, integer=True)
    n, p = y.shape
    x = read_matrix(args.x) if args.x else np.ones((n, 1))
    wT = read_matrix(args.wT) if args.wT else np.ones((p, 1))
    if args.no_meta:
        if args.wB:
            raise UsageError("--wB and --no-meta are mutually exclusive")
        wB = np.ones((p, 1))
    elif args.wB:
        wB = read_matrix(args.wB)
    else:
        raise UsageError("meta-covariates are enabled but --wB was not given (pass --wB FILE or --no-meta)")
    mask = read_mask(args.mask, (n, p)) if args.mask else None
    return CountMatrix(y, mask), Covariates(x, wT, wB)


def cmd_fit(args, argv) -> int:
    y, cov = _load_fit_inputs(args)
    hp = _hyperparams(args)
    started = time.perf_counter()
    store = run_chain(y, cov, hp, progress_every=args.progress)
    with atomic_directory(args.out) as out:
        save_store(store, out / "draws", fmt=args.format)
        write_config(out / "hyperparams.txt", hp)
        manifest = _manifest(
            args,
            argv,
            seed=hp.seed,
            hyperparams=store.meta["hyperparams"],
            n_draws=len(store),
            adaptation_events=store.meta["events"],
            wall_time_seconds=time.perf_counter() - started,
        )
        (out / "manifest.json").write_text(dump_json(manifest))
    log.info("%d draws written to %s", len(store), args.out)
    return EXIT_OK


def _scenarios(args) -> tuple[SimScenario, ...]:
    if args.grid == "reference":
        return tuple(reference_grid())
    if not (args.n and args.p and args.sigma):
        raise UsageError("a custom grid needs --n, --p and --sigma")
    return tuple(SimScenario(n, p, s) for n in args.n for p in args.p for s in args.sigma)


def cmd_bench(args, argv) -> int:
    methods = tuple(args.methods) if args.methods else METHODS
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise UsageError(f"unknown method(s): {', '.join(sorted(unknown))}")
    hp = _hyperparams(args)
    config = BenchConfig(
        scenarios=_scenarios(args),
        replicates=args.replicates,
        methods=methods,
        hp=hp,
        base_seed=hp.seed,
        baseline_ks=tuple(args.ks) if args.ks else BASELINE_KS,
        nometa_variant=args.nometa_variant,
        workers=args.workers,
    )
    started = time.perf_counter()
    report = run_benchmark(config)
    with atomic_directory(args.out) as out:
        (out / "summary.csv").write_text(report.summary_csv())
        (out / "replicates.csv").write_text(report.replicates_csv())
        (out / "report.txt").write_text(report.text_tables())
        manifest = _manifest(
            args,
            argv,
            seed=hp.seed,
            hyperparams={k: getattr(hp, k) for k in HyperParams.field_names()},
            n_failed=len(report.failures),
            wall_time_seconds=time.perf_counter() - started,
        )
        (out / "manifest.json").write_text(dump_json(manifest))
    sys.stdout.write(report.text_tables())
    return EXIT_OK


def cmd_summarize(args, argv) -> int:
    store = load_store(args.draws)
    aligned = align_contributions(store)
    t, eta, lam = representative_draw(store, aligned)
    names = args.covariate_names.split(",") if args.covariate_names else None
    with atomic_directory(args.out) as out:
        (out / "beta_summary.csv").write_text(beta_table_csv(summarize_beta(store, args.level, names)))
        write_matrix(out / "factor_scores.csv", eta)
        write_matrix(out / "loadings.csv", lam)
        for h, c in enumerate(aligned.mean_contributions, start=1):
            write_matrix(out / f"contribution_{h}.csv", c)
        write_matrix(out / "residual_contribution.csv", aligned.residual_contribution)
        info = {
            "representative_draw": t,
            "representative_iteration": int(store[t].iteration),
            "representative_rule": "minimal summed Frobenius distance of aligned contributions to their posterior means",
            "reference_order": aligned.reference_order.tolist(),
            "frobenius_norms": aligned.frobenius_norms.tolist(),
            "draws_with_surplus": int(np.sum(aligned.n_surplus > 0)),
            "level": args.level,
        }
        (out / "manifest.json").write_text(dump_json(_manifest(args, argv, **info)))
    return EXIT_OK


def cmd_export_graph(args, argv) -> int:
    store = load_store(args.draws)
    graph = covariance_graph(store, args.threshold, form=args.form)
    if graph.flagged_draws:
        log.warning("%d draw(s) needed jitter: %s", len(graph.flagged_draws), graph.flagged_draws[:20])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".{out.name}.tmp")
    tmp.write_text(graph.to_csv())
    tmp.replace(out)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cosin", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def sampler_opts(p):
        p.add_argument("--fast", action="store_true", help="4000/1000/2 profile instead of 20000/5000/2")
        p.add_argument("--config", help="key=value file of hyperparameters")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one hyperparameter")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="write one synthetic data set")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", type=float, default=0.25)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="run the Gibbs sampler")
    p.add_argument("--y", required=True)
    p.add_argument("--x")
    p.add_argument("--wT")
    p.add_argument("--wB")
    p.add_argument("--no-meta", action="store_true", help="intercept-only wB")
    p.add_argument("--mask")
    p.add_argument("--format", choices=("binary", "csv"), default="binary")
    p.add_argument("--progress", type=int, default=0, metavar="N", help="log every N iterations")
    p.add_argument("--out", required=True)
    sampler_opts(p)

    p = sub.add_parser("bench", help="replicate benchmark against the Pearson-residual PCA baseline")
    p.add_argument("--grid", choices=("reference", "custom"), default="custom")
    p.add_argument("--n", type=int, nargs="+")
    p.add_argument("--p", type=int, nargs="+")
    p.add_argument("--sigma", type=float, nargs="+")
    p.add_argument("--replicates", type=int, default=50)
    p.add_argument("--methods", nargs="+")
    p.add_argument("--ks", type=int, nargs="+", help="baseline ranks to try")
    p.add_argument("--nometa-variant", choices=("intercept", "none"), default="intercept")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    sampler_opts(p)

    p = sub.add_parser("summarize", help="beta table, representative scores, aligned contributions")
    p.add_argument("--draws", required=True)
    p.add_argument("--level", type=float, default=0.9)
    p.add_argument("--covariate-names")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-graph", help="partial-correlation edge list")
    p.add_argument("--draws", required=True)
    p.add_argument("--threshold", type=float, default=GRAPH_THRESHOLD)
    p.add_argument("--form", choices=("correlation", "covariance"), default="correlation")
    p.add_argument("--out", required=True)
    return ap


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "bench": cmd_bench,
    "summarize": cmd_summarize,
    "export-graph": cmd_export_graph,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except (ChainError, NumericalError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, InputError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
