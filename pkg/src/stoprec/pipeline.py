"""End-to-end tuning pipeline driven by a RunConfig.

seed grid on the training matrices -> pre-BO surrogate -> grid and random
baselines on the target matrices -> one BO run per xi -> reports.  Every
output file is a pure function of the config; no timings are written.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import RunConfig
from .featurize import MatrixContext
from .krylov import Solver
from .matgen import generate
from .report import (
    TAUS,
    calibration_gap,
    compare_strategies,
    coverage_table,
    inclusion_heatmap,
    pointwise_ci_inclusion,
    write_csv,
    write_json,
)
from .sparse import write_matrix_market
from .surrogate import examples_from_samples, train
from .tuner import (
    Strategy,
    TuningRun,
    bo_loop,
    divergence_probe_points,
    evaluate_points,
    grid_search,
    random_points,
    save_dataset,
)

__all__ = ["PipelineResult", "run_pipeline", "xi_tag"]

log = logging.getLogger(__name__)


def xi_tag(xi: float) -> str:
    return f"xi{xi:g}"


@dataclass
class PipelineResult:
    out_dir: Path
    summary: dict
    files: list[str] = field(default_factory=list)


def run_pipeline(cfg: RunConfig, out_dir=None, threads: int | None = None) -> PipelineResult:
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "matrices").mkdir(exist_ok=True)
    threads = threads or cfg.threads
    scfg = cfg.solver.solver_config()
    ratio = cfg.solver.max_iter_ratio
    reps = cfg.tuner.replicates
    tuned_solver = Solver.parse(cfg.tuner.solver)
    written: list[str] = []

    def emit(name):
        written.append(name)
        return out / name

    matrices = {}
    for m in cfg.matrices:
        A = generate(m.generator())
        matrices[m.id] = A
        write_matrix_market(A, emit(f"matrices/{m.id}.mtx"), comment=f"{m.family} grid_param={m.grid_param} "
                            f"peclet={m.peclet!r} seed={m.seed}")
    contexts = {mid: MatrixContext.from_matrix(mid, A) for mid, A in matrices.items()}
    targets = [m.id for m in (cfg.heldout_matrices or cfg.train_matrices)]

    # seed dataset
    seed_data = []
    probes = divergence_probe_points(cfg.grid.probe_alphas, solvers=cfg.grid.spec().solvers)
    for m in cfg.train_matrices:
        log.info("seed grid on %s", m.id)
        seed_data += grid_search(matrices[m.id], cfg.grid.spec(), reps, cfg.mcmc, scfg, m.id, ratio, threads)
        if probes:
            seed_data += evaluate_points(matrices[m.id], probes, reps, cfg.mcmc, scfg, m.id, ratio, threads,
                                         Strategy.PROBE.value)
    save_dataset(seed_data, emit("seed_dataset.jsonl"))

    # baselines on the tuned matrices
    target_grid = replace(cfg.grid.spec(), solvers=(tuned_solver,))
    baselines: dict[str, dict[str, TuningRun]] = {}
    for mid in targets:
        log.info("baseline grid on %s", mid)
        g = grid_search(matrices[mid], target_grid, reps, cfg.mcmc, scfg, mid, ratio, threads)
        save_dataset(g, emit(f"{mid}_grid.jsonl"))
        runs = {"grid": TuningRun(Strategy.GRID.value, len(g), len(g), None, cfg.seed, g, [len(g)], label="grid")}
        if cfg.tuner.random_points:
            pts = random_points(cfg.tuner.random_points, cfg.acquisition.acquisition_config(0.0, 0).bounds,
                                cfg.seed, tuned_solver)
            r = evaluate_points(matrices[mid], pts, reps, cfg.mcmc, scfg, mid, ratio, threads,
                                Strategy.RANDOM.value)
            save_dataset(r, emit(f"{mid}_random.jsonl"))
            runs["random"] = TuningRun(Strategy.RANDOM.value, len(r), len(r), None, cfg.seed, r, [len(r)],
                                       label="random")
        baselines[mid] = runs

    valid = [s for s in seed_data if not s.invalid]
    log.info("training pre-BO surrogate on %d samples", len(valid))
    pre_net, pre_hist = train(examples_from_samples(valid), contexts, cfg.surrogate)
    pre_net.save(emit("model_pre.json"))
    write_json(emit("train_history_pre.json"), pre_hist)

    summary = {"seed": cfg.seed, "seed_dataset_size": len(seed_data),
               "invalid_seed_samples": len(seed_data) - len(valid), "taus": list(TAUS), "targets": {}}
    models = {"pre": pre_net}
    bo_runs = {}
    target_mats = {mid: matrices[mid] for mid in targets}
    for xi in cfg.tuner.xis:
        tag = xi_tag(xi)
        log.info("BO run %s", tag)

        def snapshot(round_index, new, net, tag=tag):
            save_dataset(new, emit(f"bo_{tag}_round{round_index}.jsonl"))

        run, net, _ = bo_loop(target_mats, contexts, pre_net, valid, cfg.tuner.budget, cfg.tuner.batch_size, xi,
                              seed=cfg.seed, replicates=reps, fixed=cfg.mcmc, solver_cfg=scfg,
                              acq=cfg.acquisition.acquisition_config(xi, cfg.seed), surrogate_cfg=cfg.surrogate,
                              max_iter_ratio=ratio, solver=tuned_solver, threads=threads, on_round=snapshot)
        run.label = f"bo_{tag}"
        save_dataset(run.samples, emit(f"bo_{tag}.jsonl"))
        net.save(emit(f"model_post_{tag}.json"))
        models[f"post_{tag}"] = net
        bo_runs[tag] = run

    for mid in targets:
        grid_samples = baselines[mid]["grid"].samples
        entry = {"coverage_gap": {}, "best_median": {}}
        for name, net in models.items():
            rows = coverage_table(grid_samples, net, contexts)
            write_csv(emit(f"coverage_{mid}_{name}.csv"), rows)
            entry["coverage_gap"][name] = calibration_gap(rows)
            inc = pointwise_ci_inclusion(grid_samples, net, contexts)
            write_csv(emit(f"inclusion_{mid}_{name}.csv"), inc)
            entry.setdefault("inclusion_rate", {})[name] = sum(r.included for r in inc) / max(len(inc), 1)
            for alpha in sorted({r.alpha for r in inc}):
                write_csv(emit(f"heatmap_{mid}_{name}_alpha{alpha:g}.csv"), inclusion_heatmap(inc, alpha))
        runs = list(baselines[mid].values())
        for tag, run in bo_runs.items():
            sub = TuningRun(run.strategy, run.budget, run.batch_size, run.xi, run.seed,
                            [s for s in run.samples if s.matrix_id == mid], run.round_sizes, run.best_history,
                            label=run.label)
            if sub.samples:
                runs.append(sub)
        boxes, table = compare_strategies(runs)
        write_csv(emit(f"compare_{mid}.csv"), table)
        write_json(emit(f"boxes_{mid}.json"), [b.to_dict() for b in boxes])
        entry["best_median"] = {b.label: b.min for b in boxes}
        entry["evaluations"] = {b.label: b.n for b in boxes}
        summary["targets"][mid] = entry
    summary["bo_runs"] = {tag: run.to_dict() for tag, run in bo_runs.items()}
    write_json(emit("summary.json"), summary)
    write_json(out / "manifest.json", sorted(written))
    return PipelineResult(out, summary, sorted(written))
