"""Evaluation of parameter vectors, grid/random baselines and the BO loop."""

from __future__ import annotations

import enum
import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .acquisition import DEFAULT_BOUNDS, AcquisitionConfig, propose_batch
from .featurize import decode_params
from .krylov import Solver, SolverConfig, performance_metric, solve
from .mcmc import McmcFixedSettings, McmcParams, build_preconditioner
from .sparse import SparseMatrix, spmv
from .surrogate import SurrogateConfig, SurrogateNet, examples_from_samples, train

__all__ = [
    "GridSpec",
    "LabeledSample",
    "Strategy",
    "TuningRun",
    "baseline_steps",
    "bo_loop",
    "divergence_probe_points",
    "evaluate",
    "evaluate_points",
    "grid_search",
    "load_dataset",
    "random_points",
    "random_search",
    "save_dataset",
]

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    GRID = "grid"
    RANDOM = "random"
    BO = "bo"
    PROBE = "probe"


@dataclass
class LabeledSample:
    matrix_id: str
    xm: McmcParams
    y_mean: float | None
    y_std: float | None
    replicate_ys: list[float]
    nonconverged: bool = False
    degenerate: bool = False
    invalid: bool = False
    error: str | None = None
    baseline_steps: int = 0
    replicate_steps: list[int] = field(default_factory=list)
    strategy: str = Strategy.GRID.value
    round_index: int = 0
    seed: int = 0

    @property
    def median(self) -> float:
        return float(np.median(self.replicate_ys))

    def to_dict(self) -> dict:
        return {
            "matrix_id": self.matrix_id,
            "xm": self.xm.to_dict(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "replicate_ys": list(self.replicate_ys),
            "nonconverged": self.nonconverged,
            "degenerate": self.degenerate,
            "invalid": self.invalid,
            "error": self.error,
            "baseline_steps": self.baseline_steps,
            "replicate_steps": list(self.replicate_steps),
            "strategy": self.strategy,
            "round_index": self.round_index,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "LabeledSample":
        d = dict(d)
        d["xm"] = McmcParams.from_dict(d["xm"])
        return cls(**d)


def save_dataset(samples, path) -> None:
    """Write one JSON object per line (stable key order)."""
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict()) + "\n")


def load_dataset(path) -> list[LabeledSample]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.strip():
            try:
                out.append(LabeledSample.from_dict(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad dataset record ({exc})") from None
    return out


def canonical_rhs(A: SparseMatrix) -> np.ndarray:
    """b = A * ones, so the exact solution is known."""
    return spmv(A, np.ones(A.ncols))


def baseline_steps(A: SparseMatrix, solver: Solver, solver_cfg: SolverConfig, b=None) -> int:
    cfg = replace(solver_cfg, solver=solver)
    res = solve(A, canonical_rhs(A) if b is None else b, None, cfg)
    return res.iterations if res.converged else cfg.iteration_cap(A.nrows)


def evaluate(A: SparseMatrix, xm: McmcParams, replicates: int = 10, fixed: McmcFixedSettings | None = None,
             solver_cfg: SolverConfig | None = None, matrix_id: str = "A", steps_nopre: int | None = None,
             max_iter_ratio: float | None = None, threads: int | None = None,
             strategy: str = Strategy.GRID.value, round_index: int = 0) -> LabeledSample:
    """Measure y = steps(P A) / steps(A) over ``replicates`` preconditioner seeds.

    Replicate r builds P with seed ``fixed.seed + r``.  Non-converged solves
    count as the iteration cap.  ``max_iter_ratio`` caps iterations at that
    multiple of the unpreconditioned count instead of the solver default.
    """
    if replicates < 2:
        raise ValueError("replicates must be >= 2")
    fixed = fixed or McmcFixedSettings()
    solver_cfg = replace(solver_cfg or SolverConfig(), solver=xm.solver)
    b = canonical_rhs(A)
    if steps_nopre is None:
        steps_nopre = baseline_steps(A, xm.solver, solver_cfg, b)
    if max_iter_ratio is not None:
        solver_cfg = replace(solver_cfg, max_iters=max(1, math.ceil(max_iter_ratio * steps_nopre)))
    cap = solver_cfg.iteration_cap(A.nrows)
    sample = LabeledSample(matrix_id, xm, None, None, [], baseline_steps=steps_nopre,
                           strategy=strategy, round_index=round_index, seed=fixed.seed)
    ys, steps = [], []
    try:
        for r in range(replicates):
            rep = build_preconditioner(A, xm, fixed.with_seed(fixed.seed + r), threads=threads)
            sample.degenerate |= rep.degenerate
            res = solve(A, b, rep.P, solver_cfg)
            if not res.converged:
                sample.nonconverged = True
            n_steps = res.iterations if res.converged else cap
            steps.append(n_steps)
            ys.append(performance_metric(n_steps, steps_nopre))
    except (ValueError, FloatingPointError, ArithmeticError, MemoryError) as exc:
        sample.invalid = True
        sample.error = f"{type(exc).__name__}: {exc}"
        return sample
    sample.replicate_ys = ys
    sample.replicate_steps = steps
    sample.y_mean = float(np.mean(ys))
    sample.y_std = float(np.std(ys, ddof=1))
    return sample


@dataclass(frozen=True)
class GridSpec:
    alphas: tuple = (1.0, 2.0, 4.0, 5.0)
    epsilons: tuple = (1 / 2, 1 / 4, 1 / 8, 1 / 16)
    deltas: tuple = (1 / 2, 1 / 4, 1 / 8, 1 / 16)
    solvers: tuple = (Solver.GMRES,)

    def points(self) -> list[McmcParams]:
        pts = []
        for s, a, e, d in itertools.product(self.solvers, self.alphas, self.epsilons, self.deltas):
            pts.append(McmcParams(a, e, d, s))
        if not pts:
            raise ValueError("empty grid")
        return pts


def evaluate_points(A: SparseMatrix, points, replicates: int = 10, fixed: McmcFixedSettings | None = None,
                    solver_cfg: SolverConfig | None = None, matrix_id: str = "A",
                    max_iter_ratio: float | None = None, threads: int | None = None,
                    strategy: str = Strategy.GRID.value, round_index: int = 0) -> list[LabeledSample]:
    """Evaluate each McmcParams in ``points``; baselines are computed once per solver."""
    solver_cfg = solver_cfg or SolverConfig()
    b = canonical_rhs(A)
    base = {}
    out = []
    for p in points:
        if p.solver not in base:
            base[p.solver] = baseline_steps(A, p.solver, solver_cfg, b)
        s = evaluate(A, p, replicates, fixed, solver_cfg, matrix_id, base[p.solver], max_iter_ratio, threads,
                     strategy, round_index)
        if s.invalid:
            log.warning("%s %s invalid: %s", matrix_id, p, s.error)
        out.append(s)
    return out


def grid_search(A: SparseMatrix, grid: GridSpec | None = None, replicates: int = 10,
                fixed: McmcFixedSettings | None = None, solver_cfg: SolverConfig | None = None,
                matrix_id: str = "A", max_iter_ratio: float | None = None, threads: int | None = None):
    """Evaluate every grid point; one sample per (solver, alpha, eps, delta)."""
    grid = grid or GridSpec()
    return evaluate_points(A, grid.points(), replicates, fixed, solver_cfg, matrix_id, max_iter_ratio, threads,
                       Strategy.GRID.value)


def divergence_probe_points(alphas=(0.01, 0.05), eps=0.25, delta=0.25, solvers=(Solver.GMRES,)):
    """Near-zero alpha points that show the surrogate failing preconditioners."""
    return [McmcParams(a, eps, delta, s) for s in solvers for a in alphas]


def random_search(A: SparseMatrix, n_points: int, bounds=DEFAULT_BOUNDS, replicates: int = 10, seed: int = 0,
                  fixed: McmcFixedSettings | None = None, solver_cfg: SolverConfig | None = None,
                  matrix_id: str = "A", solver=Solver.GMRES, max_iter_ratio: float | None = None,
                  threads: int | None = None):
    """Uniform sampling in (alpha, ln eps, ln delta)."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    return evaluate_points(A, random_points(n_points, bounds, seed, solver), replicates, fixed, solver_cfg,
                       matrix_id, max_iter_ratio, threads, Strategy.RANDOM.value)


def random_points(n_points: int, bounds=DEFAULT_BOUNDS, seed: int = 0, solver=Solver.GMRES) -> list[McmcParams]:
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    onehot = [1.0 if s is Solver.parse(solver) else 0.0 for s in (Solver.GMRES, Solver.BICGSTAB, Solver.CG)]
    return [decode_params(np.concatenate([rng.uniform(lo, hi), onehot])) for _ in range(n_points)]


@dataclass
class TuningRun:
    strategy: str
    budget: int
    batch_size: int
    xi: float | None = None
    seed: int = 0
    samples: list[LabeledSample] = field(default_factory=list)
    round_sizes: list[int] = field(default_factory=list)
    best_history: list[float] = field(default_factory=list)
    label: str | None = None

    @property
    def evaluations(self) -> int:
        return len(self.samples)

    @property
    def best_so_far(self) -> tuple[McmcParams, float] | None:
        valid = [s for s in self.samples if not s.invalid]
        if not valid:
            return None
        best = min(valid, key=lambda s: s.median)
        return best.xm, best.median

    def to_dict(self) -> dict:
        best = self.best_so_far
        return {
            "label": self.label or self.strategy,
            "strategy": self.strategy,
            "budget": self.budget,
            "batch_size": self.batch_size,
            "xi": self.xi,
            "seed": self.seed,
            "evaluations": self.evaluations,
            "round_sizes": self.round_sizes,
            "best_history": self.best_history,
            "best_xm": best[0].to_dict() if best else None,
            "best_median": best[1] if best else None,
        }


def best_median(samples, matrix_id: str, default: float = 1.0) -> float:
    meds = [s.median for s in samples if s.matrix_id == matrix_id and not s.invalid]
    return min(meds) if meds else default


def bo_loop(matrices: dict, contexts: dict, model: SurrogateNet, dataset: list, budget: int, k: int = 32,
            xi: float = 0.05, seed: int = 0, replicates: int = 10, fixed: McmcFixedSettings | None = None,
            solver_cfg: SolverConfig | None = None, acq: AcquisitionConfig | None = None,
            surrogate_cfg: SurrogateConfig | None = None, max_iter_ratio: float | None = None,
            solver=Solver.GMRES, threads: int | None = None, on_round=None):
    """Propose, evaluate, append and retrain until ``budget`` samples are added.

    ``matrices`` maps matrix id to SparseMatrix (the matrices being tuned);
    ``dataset`` holds the samples the model was trained on and is not
    modified.  Returns ``(run, model, dataset)`` where ``dataset`` is the
    extended copy.  ``on_round(round_index, new_samples, net)`` is called
    after each retrain, e.g. to write snapshots.
    """
    fixed = fixed or McmcFixedSettings()
    acq = acq or AcquisitionConfig(xi=xi, seed=seed)
    acq = replace(acq, xi=xi)
    surrogate_cfg = surrogate_cfg or model.config
    data = list(dataset)
    run = TuningRun(Strategy.BO.value, budget, k, xi, seed)
    if budget <= 0:
        return run, model, data
    added = 0
    round_index = 0
    net = model
    ids = list(matrices)
    while added < budget:
        new = []
        for mid in ids:
            if added + len(new) >= budget:
                break
            take = min(k, budget - added - len(new))
            y_min = best_median(data + new, mid)
            acq_r = replace(acq, seed=acq.seed + 7919 * round_index + ids.index(mid))
            proposals = propose_batch(net, contexts[mid], y_min, take, acq_r, solver)
            fixed_r = fixed.with_seed(fixed.seed + 1000 * (round_index + 1))
            new.extend(evaluate_points(matrices[mid], proposals, replicates, fixed_r, solver_cfg, mid,
                                   max_iter_ratio, threads, Strategy.BO.value, round_index))
        added += len(new)
        data.extend(new)
        run.samples.extend(new)
        run.round_sizes.append(len(new))
        best = run.best_so_far
        run.best_history.append(best[1] if best else math.nan)
        valid = [s for s in data if not s.invalid]
        if not any(not s.invalid for s in new):
            log.warning("BO round %d produced no valid samples", round_index)
        else:
            net, _ = train(examples_from_samples(valid), contexts, surrogate_cfg)
        if on_round is not None:
            on_round(round_index, new, net)
        round_index += 1
    return run, net, data
