"""Expected Improvement over the surrogate and its box-constrained maximisation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import erfc

from .featurize import SOLVER_ORDER, MatrixContext, decode_params
from .krylov import Solver
from .mcmc import McmcParams
from .surrogate import SurrogateNet

__all__ = [
    "AcquisitionConfig",
    "expected_improvement",
    "expected_improvement_grad",
    "norm_cdf",
    "norm_pdf",
    "propose_batch",
    "propose_encoded",
]

log = logging.getLogger(__name__)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
DEFAULT_BOUNDS = ((0.05, 8.0), (math.log(1.0 / 64.0), 0.0), (math.log(1.0 / 64.0), 0.0))


def norm_cdf(z):
    return 0.5 * erfc(-np.asarray(z, dtype=np.float64) / _SQRT2)


def norm_pdf(z):
    z = np.asarray(z, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def expected_improvement(mu, sigma, y_min, xi):
    """Closed-form EI for minimisation; sigma == 0 gives max(y_min - mu - xi, 0)."""
    ei, _, _ = expected_improvement_grad(mu, sigma, y_min, xi)
    return ei if np.ndim(ei) else float(ei)


def expected_improvement_grad(mu, sigma, y_min, xi):
    """Return (EI, dEI/dmu, dEI/dsigma), elementwise."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be >= 0")
    d = y_min - mu - xi
    pos = sigma > 0
    safe = np.where(pos, sigma, 1.0)
    with np.errstate(over="ignore"):
        # |z| overflowing to inf gives the right limits (pdf 0, cdf 0 or 1)
        z = d / safe
        cdf = norm_cdf(z)
        pdf = norm_pdf(z)
    ei = np.where(pos, d * cdf + sigma * pdf, np.maximum(d, 0.0))
    dmu = np.where(pos, -cdf, -(d > 0).astype(np.float64))
    dsigma = np.where(pos, pdf, 0.0)
    return np.maximum(ei, 0.0), dmu, dsigma


@dataclass(frozen=True)
class AcquisitionConfig:
    xi: float = 0.05
    bounds: tuple = DEFAULT_BOUNDS  # (alpha, ln eps, ln delta)
    restarts: int = 16
    # uniform candidates scored per slot; the best `restarts` seed L-BFGS-B
    raw_samples: int = 512
    max_opt_iters: int = 200
    grad_tol: float = 1e-8
    # L-BFGS-B leaves ~1e-4 scatter around a shared maximiser; closer points count as one
    dedup_tol: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        b = tuple(tuple(float(v) for v in pair) for pair in self.bounds)
        object.__setattr__(self, "bounds", b)
        if self.xi < 0:
            raise ValueError("xi must be >= 0")
        if len(b) != 3 or any(lo >= hi for lo, hi in b):
            raise ValueError("bounds need three (lo, hi) pairs with lo < hi")
        if b[0][0] < 0 or b[1][1] > 0 or b[2][1] > 0:
            raise ValueError("bounds must keep alpha >= 0 and ln eps, ln delta <= 0")
        if self.restarts < 1 or self.max_opt_iters < 1:
            raise ValueError("restarts and max_opt_iters must be >= 1")
        if self.raw_samples < 0:
            raise ValueError("raw_samples must be >= 0")
        if self.dedup_tol <= 0:
            raise ValueError("dedup_tol must be > 0")


class _Objective:
    """-EI and its gradient in the continuous encoded coordinates."""

    def __init__(self, net: SurrogateNet, ctx: MatrixContext, y_min: float, xi: float, solver: Solver):
        self.net = net
        self.ctx = ctx
        self.y_min = y_min
        self.xi = xi
        self.onehot = _solver_onehot(solver)
        self.graph_cache = {ctx.matrix_id: net.graph_embedding(ctx)}

    def ei(self, x3):
        x3 = np.atleast_2d(x3)
        xm = np.hstack([x3, np.tile(self.onehot, (len(x3), 1))])
        mu, sigma, _ = self.net.forward([self.ctx] * len(x3), xm, graph_cache=self.graph_cache)
        return expected_improvement_grad(mu, sigma, self.y_min, self.xi)[0]

    def __call__(self, x3):
        xm = np.concatenate([x3, self.onehot])[None, :]
        mu, sigma, cache = self.net.forward([self.ctx], xm, graph_cache=self.graph_cache)
        ei, dmu, dsigma = expected_improvement_grad(mu, sigma, self.y_min, self.xi)
        _, dxm = self.net.backward(cache, dmu, dsigma, need_params=False)
        return -float(ei[0]), -dxm[0, :3]


def _solver_onehot(solver: Solver) -> np.ndarray:
    return np.array([1.0 if s is Solver.parse(solver) else 0.0 for s in SOLVER_ORDER])


def _maximize_from(obj: _Objective, x0, bounds, cfg: AcquisitionConfig):
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    try:
        res = minimize(obj, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": cfg.max_opt_iters, "gtol": cfg.grad_tol})
        x = np.clip(res.x, lo, hi)
    except (ValueError, FloatingPointError):
        return None, -math.inf
    val = float(obj.ei(x)[0])
    if not math.isfinite(val):
        return None, -math.inf
    return x, val


def _starts(obj: _Objective, rng, lo, hi, cfg: AcquisitionConfig) -> np.ndarray:
    """Starting points: the highest-EI raw uniform candidates (EI is flat far from its peak)."""
    if cfg.raw_samples <= cfg.restarts:
        return rng.uniform(lo, hi, size=(cfg.restarts, len(lo)))
    raw = rng.uniform(lo, hi, size=(cfg.raw_samples, len(lo)))
    with np.errstate(all="ignore"):
        ei = np.nan_to_num(obj.ei(raw), nan=-np.inf)
    return raw[np.argsort(-ei, kind="stable")[:cfg.restarts]]


def propose_batch(net: SurrogateNet, ctx: MatrixContext, y_min: float, k: int,
                  cfg: AcquisitionConfig | None = None, solver=Solver.GMRES) -> list[McmcParams]:
    """Propose ``k`` mutually distinct parameter vectors maximising EI."""
    chosen = propose_encoded(net, ctx, y_min, k, cfg, solver)
    onehot = _solver_onehot(solver)
    return [decode_params(np.concatenate([x, onehot])) for x in chosen]


def propose_encoded(net: SurrogateNet, ctx: MatrixContext, y_min: float, k: int,
                    cfg: AcquisitionConfig | None = None, solver=Solver.GMRES) -> np.ndarray:
    """Like :func:`propose_batch` but returns (k, 3) points in (alpha, ln eps, ln delta).

    Each slot runs ``cfg.restarts`` bounded L-BFGS-B maximisations from
    uniform starting points and keeps the best one that is not a duplicate
    of an earlier proposal.
    """
    cfg = cfg or AcquisitionConfig()
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    bounds = cfg.bounds
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    obj = _Objective(net, ctx, y_min, cfg.xi, solver)
    chosen: list[np.ndarray] = []

    def is_dup(x):
        return any(np.linalg.norm(x - c) < cfg.dedup_tol for c in chosen)

    for slot in range(k):
        pick = None
        for attempt in range(4):
            best_val, best_x = -math.inf, None
            for x0 in _starts(obj, rng, lo, hi, cfg):
                x, val = _maximize_from(obj, x0, bounds, cfg)
                if x is None:
                    # non-finite EI: retry once from a fresh start
                    x, val = _maximize_from(obj, rng.uniform(lo, hi), bounds, cfg)
                    if x is None:
                        continue
                if val > best_val and not is_dup(x):
                    best_val, best_x = val, x
            if best_x is not None:
                pick = best_x
                break
        if pick is None:
            # every local maximiser is taken; fall back to a fresh uniform draw
            pick = rng.uniform(lo, hi)
            while is_dup(pick):
                pick = rng.uniform(lo, hi)
            log.debug("slot %d: no distinct maximiser, using a uniform draw", slot)
        chosen.append(pick)
    return np.array(chosen)
