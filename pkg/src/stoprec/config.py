"""Run configuration: a TOML file mirroring every module's settings.

Example::

    seed = 42

    [output]
    dir = "out"

    [[matrices]]
    id = "lap32"
    family = "laplacian2d"
    grid_param = 32
    role = "train"            # or "heldout"

    [grid]
    alphas = [1.0, 2.0, 4.0, 5.0]
    solvers = ["gmres", "bicgstab"]

    [tuner]
    budget = 32
    xis = [0.05, 1.0]

Every key is optional except at least one matrix; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .acquisition import DEFAULT_BOUNDS, AcquisitionConfig
from .krylov import Solver, SolverConfig
from .matgen import Family, GeneratorSpec
from .mcmc import McmcFixedSettings
from .surrogate import SurrogateConfig
from .tuner import GridSpec

__all__ = ["ConfigError", "MatrixEntry", "RunConfig", "load_config", "parse_config", "repro_config"]


class ConfigError(ValueError):
    """Raised with every validation problem found, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class MatrixEntry:
    id: str
    family: str
    grid_param: int
    peclet: float = 0.0
    seed: int = 0
    density: float = 0.25
    role: str = "train"

    def __post_init__(self):
        if self.role not in ("train", "heldout"):
            raise ValueError(f"role must be 'train' or 'heldout', got {self.role!r}")
        if not self.id or any(c in self.id for c in "/\\ "):
            raise ValueError(f"matrix id {self.id!r} must be non-empty without spaces or slashes")
        Family(self.family)

    def generator(self) -> GeneratorSpec:
        return GeneratorSpec(Family(self.family), self.grid_param, self.peclet, self.seed, self.density)


@dataclass(frozen=True)
class SolverSection:
    rel_tol: float = 1e-8
    gmres_restart: int = 50
    max_iters: int | None = None
    # cap preconditioned runs at this multiple of the unpreconditioned count
    max_iter_ratio: float | None = 5.0

    def __post_init__(self):
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.max_iter_ratio is not None and self.max_iter_ratio < 1:
            raise ValueError("max_iter_ratio must be >= 1")

    def solver_config(self, solver=Solver.GMRES) -> SolverConfig:
        return SolverConfig(Solver.parse(solver), self.rel_tol, self.max_iters, self.gmres_restart)


@dataclass(frozen=True)
class GridSection:
    alphas: tuple = (1.0, 2.0, 4.0, 5.0)
    epsilons: tuple = (1 / 2, 1 / 4, 1 / 8, 1 / 16)
    deltas: tuple = (1 / 2, 1 / 4, 1 / 8, 1 / 16)
    solvers: tuple = ("gmres",)
    # near-zero alphas added to the seed dataset of each training matrix
    probe_alphas: tuple = (0.01, 0.05)

    def __post_init__(self):
        for name in ("alphas", "epsilons", "deltas", "solvers", "probe_alphas"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not (self.alphas and self.epsilons and self.deltas and self.solvers):
            raise ValueError("grid axes must be non-empty")
        for s in self.solvers:
            Solver.parse(s)

    def spec(self) -> GridSpec:
        return GridSpec(self.alphas, self.epsilons, self.deltas, tuple(Solver.parse(s) for s in self.solvers))


@dataclass(frozen=True)
class AcquisitionSection:
    restarts: int = 16
    raw_samples: int = 512
    dedup_tol: float = 1e-2
    max_opt_iters: int = 200
    alpha_bounds: tuple = DEFAULT_BOUNDS[0]
    log_epsilon_bounds: tuple = DEFAULT_BOUNDS[1]
    log_delta_bounds: tuple = DEFAULT_BOUNDS[2]

    def acquisition_config(self, xi: float, seed: int) -> AcquisitionConfig:
        return AcquisitionConfig(xi=xi, bounds=(tuple(self.alpha_bounds), tuple(self.log_epsilon_bounds),
                                                tuple(self.log_delta_bounds)),
                                 restarts=self.restarts, raw_samples=self.raw_samples, dedup_tol=self.dedup_tol,
                                 max_opt_iters=self.max_opt_iters, seed=seed)


@dataclass(frozen=True)
class TunerSection:
    replicates: int = 10
    budget: int = 32
    batch_size: int = 32
    xis: tuple = (0.05, 1.0)
    random_points: int = 32
    solver: str = "gmres"

    def __post_init__(self):
        object.__setattr__(self, "xis", tuple(float(x) for x in self.xis))
        if self.replicates < 2:
            raise ValueError("replicates must be >= 2")
        if self.budget < 0 or self.batch_size < 1 or self.random_points < 0:
            raise ValueError("budget and random_points must be >= 0, batch_size >= 1")
        if not self.xis or any(x < 0 for x in self.xis):
            raise ValueError("xis must be a non-empty list of non-negative values")
        Solver.parse(self.solver)


@dataclass(frozen=True)
class OutputSection:
    dir: str = "out"


@dataclass(frozen=True)
class RunConfig:
    matrices: tuple
    seed: int = 0
    threads: int | None = None
    solver: SolverSection = field(default_factory=SolverSection)
    mcmc: McmcFixedSettings = field(default_factory=McmcFixedSettings)
    grid: GridSection = field(default_factory=GridSection)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    acquisition: AcquisitionSection = field(default_factory=AcquisitionSection)
    tuner: TunerSection = field(default_factory=TunerSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def train_matrices(self):
        return [m for m in self.matrices if m.role == "train"]

    @property
    def heldout_matrices(self):
        return [m for m in self.matrices if m.role == "heldout"]

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed, mcmc=self.mcmc.with_seed(seed),
                                   surrogate=dataclasses.replace(self.surrogate, seed=seed))


_SECTIONS = {
    "solver": SolverSection,
    "mcmc": McmcFixedSettings,
    "grid": GridSection,
    "surrogate": SurrogateConfig,
    "acquisition": AcquisitionSection,
    "tuner": TunerSection,
    "output": OutputSection,
}


def _type_ok(value, annotation: str) -> bool:
    """Loose check of TOML values against a field annotation string."""
    ann = annotation.replace(" ", "")
    allowed = set(ann.split("|"))
    if value is None:
        return "None" in allowed
    if isinstance(value, bool):
        return "bool" in allowed
    if isinstance(value, int):
        return bool(allowed & {"int", "float"})
    if isinstance(value, float):
        return "float" in allowed
    if isinstance(value, str):
        return "str" in allowed
    if isinstance(value, list):
        return "tuple" in allowed
    return False


def _build(cls, raw, where: str, problems: list[str]):
    if not isinstance(raw, dict):
        problems.append(f"{where}: expected a table")
        return None
    hints = {f.name: f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
             for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    ok = True
    good = {}
    for key, value in raw.items():
        if key not in hints:
            problems.append(f"{where}.{key}: unknown key")
            ok = False
        elif not _type_ok(value, str(hints[key])):
            problems.append(f"{where}.{key}: bad type {type(value).__name__} (expected {hints[key]})")
            ok = False
        else:
            good[key] = value
    try:
        # build from the well-typed keys anyway so value errors are reported too
        built = cls(**good)
    except (ValueError, TypeError) as exc:
        problems.append(f"{where}: {exc}")
        return None
    return built if ok else None


def parse_config(data: dict) -> RunConfig:
    """Validate a parsed TOML document; raises ConfigError listing every problem."""
    problems: list[str] = []
    known = {"matrices", "seed", "threads", *_SECTIONS}
    for key in data:
        if key not in known:
            problems.append(f"{key}: unknown key")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append("seed: must be a non-negative integer")
    threads = data.get("threads")
    if threads is not None and (not isinstance(threads, int) or isinstance(threads, bool) or threads < 1):
        problems.append("threads: must be a positive integer")

    raw_mats = data.get("matrices", [])
    mats = []
    if not isinstance(raw_mats, list) or not raw_mats:
        problems.append("matrices: need at least one [[matrices]] entry")
    else:
        for i, m in enumerate(raw_mats):
            entry = _build(MatrixEntry, m, f"matrices[{i}]", problems)
            if entry is not None:
                mats.append(entry)
        ids = [m.id for m in mats]
        dups = sorted({i for i in ids if ids.count(i) > 1})
        if dups:
            problems.append(f"matrices: duplicate ids {dups}")
        if mats and not any(m.role == "train" for m in mats):
            problems.append("matrices: need at least one matrix with role 'train'")

    sections = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            built = _build(cls, data[name], name, problems)
            if built is not None:
                sections[name] = built
    if problems:
        raise ConfigError(problems)
    return RunConfig(matrices=tuple(mats), seed=seed, threads=threads, **sections)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    return parse_config(data)


def repro_config(seed: int = 42, out: str = "out") -> RunConfig:
    """Desk-scale pipeline: three training matrices and one held-out matrix."""
    mats = (
        MatrixEntry("lap32", "laplacian2d", 32),
        MatrixEntry("advdiff24_pe10", "advdiff2d", 24, peclet=10.0),
        MatrixEntry("advdiff32_pe20", "advdiff2d", 32, peclet=20.0),
        MatrixEntry("advdiff32_pe10", "advdiff2d", 32, peclet=10.0, role="heldout"),
    )
    cfg = RunConfig(matrices=mats, grid=GridSection(solvers=("gmres", "bicgstab")),
                    output=OutputSection(out))
    return cfg.with_seed(seed)

