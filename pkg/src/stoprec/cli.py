"""``stoprec`` command-line interface.

Logs go to stderr; data goes to the files named on the command line.
Exit codes: 0 success, 1 runtime error, 2 usage error, 3 invalid config.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .acquisition import AcquisitionConfig, propose_batch
from .config import ConfigError, load_config, repro_config
from .featurize import MatrixContext
from .krylov import Solver, SolverConfig, solve
from .matgen import Family, GeneratorSpec, generate
from .mcmc import McmcFixedSettings, McmcParams, build_preconditioner
from .report import (
    calibration_gap,
    compare_strategies,
    coverage_table,
    inclusion_heatmap,
    pointwise_ci_inclusion,
    write_csv,
    write_json,
)
from .sparse import MatrixMarketError, read_matrix_market, spmv, write_matrix_market
from .surrogate import SurrogateConfig, SurrogateNet, examples_from_samples, train
from .tuner import GridSpec, TuningRun, best_median, grid_search, load_dataset, save_dataset

__all__ = ["main"]

log = logging.getLogger("stoprec")


class CliError(Exception):
    pass


def _matrix_args(values) -> dict:
    """Parse repeated ``id=path.mtx`` arguments."""
    out = {}
    for v in values or []:
        mid, sep, path = v.partition("=")
        if not sep or not mid or not path:
            raise CliError(f"--matrix expects id=path, got {v!r}")
        out[mid] = read_matrix_market(path)
    return out


def _contexts(matrices: dict) -> dict:
    return {mid: MatrixContext.from_matrix(mid, A) for mid, A in matrices.items()}


def _fixed(args) -> McmcFixedSettings:
    return McmcFixedSettings(fill_factor_multiplier=None if args.no_fill_limit else args.fill_factor,
                             seed=args.seed)


# -- subcommands ---------------------------------------------------------------

def cmd_gen(args):
    spec = GeneratorSpec(Family(args.family), args.g if args.g is not None else args.n,
                         args.peclet, args.seed, args.density)
    A = generate(spec)
    write_matrix_market(A, args.out, comment=spec.name)
    log.info("wrote %s (%dx%d, nnz=%d)", args.out, A.nrows, A.ncols, A.nnz)


def cmd_precond(args):
    A = read_matrix_market(args.matrix)
    params = McmcParams(args.alpha, args.epsilon, args.delta)
    rep = build_preconditioner(A, params, _fixed(args), threads=args.threads)
    write_matrix_market(rep.P, args.out)
    if args.report:
        d = rep.to_dict()
        d.pop("build_wall_time")
        write_json(args.report, d)
    log.info("P: nnz=%d chains=%d walk=%d degenerate=%s (%.2fs)", rep.P.nnz, rep.chains_per_row,
             rep.max_walk_len, rep.degenerate, rep.build_wall_time)


def cmd_solve(args):
    A = read_matrix_market(args.matrix)
    P = read_matrix_market(args.precond) if args.precond else None
    b = spmv(A, np.ones(A.ncols))
    res = solve(A, b, P, SolverConfig(Solver.parse(args.solver), args.tol, args.max_iters))
    d = res.to_dict()
    if args.out:
        write_json(args.out, d)
    else:
        print(json.dumps(d, sort_keys=True))
    log.info("%s: %s after %d iterations (rel. residual %.3e)", args.solver, res.status, res.iterations,
             res.final_rel_residual)


def cmd_grid(args):
    A = read_matrix_market(args.matrix)
    grid = GridSpec(solvers=tuple(Solver.parse(s) for s in args.solvers))
    samples = grid_search(A, grid, args.replicates, _fixed(args), SolverConfig(rel_tol=args.tol),
                          args.id or Path(args.matrix).stem, args.max_iter_ratio, args.threads)
    save_dataset(samples, args.out)
    log.info("wrote %d samples to %s", len(samples), args.out)


def cmd_train(args):
    samples = [s for path in args.data for s in load_dataset(path) if not s.invalid]
    contexts = _contexts(_matrix_args(args.matrix))
    missing = sorted({s.matrix_id for s in samples} - set(contexts))
    if missing:
        raise CliError(f"no --matrix given for ids {missing}")
    cfg = SurrogateConfig(max_epochs=args.epochs, seed=args.seed)
    net, hist = train(examples_from_samples(samples), contexts, cfg)
    net.save(args.out)
    log.info("trained on %d samples; best epoch %d, val loss %.4g", len(samples), hist.best_epoch,
             hist.val_loss[hist.best_epoch])


def cmd_propose(args):
    net = SurrogateNet.load(args.model)
    matrices = _matrix_args([args.matrix])
    (mid, A), = matrices.items()
    ctx = MatrixContext.from_matrix(mid, A)
    y_min = args.y_min
    if y_min is None:
        y_min = best_median([s for p in args.data or [] for s in load_dataset(p)], mid)
    props = propose_batch(net, ctx, y_min, args.k, AcquisitionConfig(xi=args.xi, seed=args.seed), args.solver)
    if args.out:
        write_json(args.out, {"matrix_id": mid, "y_min": y_min, "xi": args.xi,
                              "proposals": [p.to_dict() for p in props]})
    else:
        for p in props:
            print(json.dumps(p.to_dict(), sort_keys=True))
    log.info("proposed %d points for %s (y_min %.4g)", len(props), mid, y_min)


def _run_config(args, cfg):
    from .pipeline import run_pipeline

    res = run_pipeline(cfg, args.out, threads=args.threads)
    log.info("wrote %d files to %s", len(res.files), res.out_dir)
    return res


def cmd_tune(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    _run_config(args, cfg)


def cmd_repro(args):
    cfg = load_config(args.config).with_seed(args.seed) if args.config else repro_config(args.seed)
    res = _run_config(args, cfg)
    for mid, entry in res.summary["targets"].items():
        log.info("%s best medians: %s", mid, entry["best_median"])
        log.info("%s calibration gaps: %s", mid, entry["coverage_gap"])


def cmd_report(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "compare":
        runs = []
        for path in args.data:
            samples = load_dataset(path)
            label = Path(path).stem
            runs.append(TuningRun(label, len(samples), len(samples), samples=samples, label=label))
        boxes, table = compare_strategies(runs)
        write_csv(out / "compare.csv", table)
        write_json(out / "boxes.json", [b.to_dict() for b in boxes])
        return
    if not args.model:
        raise CliError(f"report {args.kind} needs --model")
    net = SurrogateNet.load(args.model)
    samples = [s for p in args.data for s in load_dataset(p)]
    contexts = _contexts(_matrix_args(args.matrix))
    if args.kind == "coverage":
        rows = coverage_table(samples, net, contexts)
        write_csv(out / "coverage.csv", rows)
        write_json(out / "coverage.json", {"rows": rows, "calibration_gap": calibration_gap(rows)})
    else:
        rows = pointwise_ci_inclusion(samples, net, contexts)
        write_csv(out / "inclusion.csv", rows)
        for alpha in sorted({r.alpha for r in rows}):
            write_csv(out / f"heatmap_alpha{alpha:g}.csv", inclusion_heatmap(rows, alpha))


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="worker threads for chain building")
    common.add_argument("-v", "--verbose", action="count", default=0)

    mc = argparse.ArgumentParser(add_help=False)
    mc.add_argument("--seed", type=int, default=0)
    mc.add_argument("--fill-factor", type=float, default=2.0)
    mc.add_argument("--no-fill-limit", action="store_true", help="keep every entry of P")

    p = argparse.ArgumentParser(prog="stoprec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate a test matrix")
    s.add_argument("--family", required=True, choices=[f.value for f in Family])
    size = s.add_mutually_exclusive_group(required=True)
    size.add_argument("--g", type=int, help="grid parameter (n = (g-1)^2)")
    size.add_argument("--n", type=int, help="dimension of a random matrix")
    s.add_argument("--peclet", type=float, default=0.0)
    s.add_argument("--density", type=float, default=0.25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("precond", parents=[common, mc], help="build an MCMC-MI preconditioner")
    s.add_argument("--matrix", required=True)
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--epsilon", "--eps", type=float, required=True)
    s.add_argument("--delta", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report", help="write build statistics as JSON")
    s.set_defaults(func=cmd_precond)

    s = sub.add_parser("solve", parents=[common], help="solve A x = A 1")
    s.add_argument("--matrix", required=True)
    s.add_argument("--precond")
    s.add_argument("--solver", default="gmres", choices=[v.value for v in Solver])
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iters", type=int)
    s.add_argument("--out", help="JSON result file (default: one line on stdout)")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("grid", parents=[common, mc], help="4x4x4 grid search on one matrix")
    s.add_argument("--matrix", required=True)
    s.add_argument("--id")
    s.add_argument("--solvers", nargs="+", default=["gmres"])
    s.add_argument("--replicates", type=int, default=10)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter-ratio", type=float, default=5.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("train", parents=[common], help="train the surrogate")
    s.add_argument("--data", nargs="+", required=True)
    s.add_argument("--matrix", action="append", required=True, metavar="ID=PATH")
    s.add_argument("--epochs", type=int, default=150)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("propose", parents=[common], help="propose a batch by expected improvement")
    s.add_argument("--model", required=True)
    s.add_argument("--matrix", required=True, metavar="ID=PATH")
    s.add_argument("--data", nargs="*", help="datasets used to find y_min")
    s.add_argument("--y-min", type=float)
    s.add_argument("--k", type=int, default=32)
    s.add_argument("--xi", type=float, default=0.05)
    s.add_argument("--solver", default="gmres", choices=[v.value for v in Solver])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="JSON file (default: JSON lines on stdout)")
    s.set_defaults(func=cmd_propose)

    s = sub.add_parser("tune", parents=[common], help="run the tuning pipeline from a TOML config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_tune)

    s = sub.add_parser("report", parents=[common], help="coverage, inclusion or strategy tables")
    s.add_argument("kind", choices=["coverage", "inclusion", "compare"])
    s.add_argument("--data", nargs="+", required=True)
    s.add_argument("--model")
    s.add_argument("--matrix", action="append", metavar="ID=PATH")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("repro", parents=[common], help="desk-scale end-to-end pipeline")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--config", help="override the built-in pipeline config")
    s.add_argument("--out", default="repro-out")
    s.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except ConfigError as exc:
        _fail("config", str(exc).splitlines()[0], exc.problems)
        return 3
    except (CliError, MatrixMarketError, ValueError, OSError) as exc:
        _fail(type(exc).__name__, str(exc))
        return 1
    return 0


def _fail(kind: str, message: str, details=None) -> None:
    err = {"error": kind, "message": message}
    if details:
        err["details"] = details
    print(json.dumps(err), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
