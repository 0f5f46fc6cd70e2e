"""Calibration and strategy-comparison tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import t as student_t

from .featurize import MatrixContext, encode_params

__all__ = [
    "TAUS",
    "BoxSummary",
    "CoverageRow",
    "InclusionRow",
    "calibration_gap",
    "compare_strategies",
    "coverage_table",
    "empirical_coverage",
    "inclusion_heatmap",
    "norm_ppf",
    "pointwise_ci_inclusion",
    "prediction_interval",
    "wilson_interval",
    "write_csv",
    "write_json",
]

TAUS = (0.50, 0.68, 0.80, 0.90, 0.95, 0.99)
Z95 = 1.959963984540054

# Acklam's rational approximation to the normal quantile
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00, 3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def norm_ppf(p: float) -> float:
    """Inverse standard normal CDF, |error| < 1e-10 on (0, 1).

    Acklam's approximation (relative error ~1e-9) polished by one Halley step.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if p > 0.5:
        # 1 - p is exact here; solving in the lower tail avoids cancellation
        return -norm_ppf(1.0 - p)
    x = _acklam(p)
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def prediction_interval(mu, sigma, tau: float):
    """Symmetric interval mu +- z_{(1+tau)/2} sigma."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    z = norm_ppf(0.5 * (1.0 + tau))
    mu = np.asarray(mu, dtype=np.float64)
    lo, hi = mu - z * sigma, mu + z * sigma
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi


def wilson_interval(p_hat: float, n: int, z: float = Z95) -> tuple[float, float]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= p_hat <= 1.0:
        raise ValueError(f"p_hat must lie in [0, 1], got {p_hat}")
    z2n = z * z / n
    centre = (p_hat + 0.5 * z2n) / (1.0 + z2n)
    half = z / (1.0 + z2n) * math.sqrt(p_hat * (1.0 - p_hat) / n + z * z / (4.0 * n * n))
    lo, hi = max(0.0, centre - half), min(1.0, centre + half)
    # keep the bracket exact under rounding at p_hat = 0 or 1
    return min(lo, p_hat), max(hi, p_hat)


@dataclass(frozen=True)
class CoverageRow:
    tau: float
    expected: float
    observed: float
    wilson_lo: float
    wilson_hi: float
    n: int


def empirical_coverage(predictions, observations, tau: float, z: float = Z95) -> CoverageRow:
    """Fraction of observations inside each prediction's tau-interval.

    ``predictions`` is a sequence of (mu, sigma) pairs or an (n, 2) array;
    ``observations`` a sequence of n values.
    """
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    obs = np.asarray(observations, dtype=np.float64).ravel()
    if len(obs) == 0:
        raise ValueError("empirical coverage needs at least one observation")
    if len(pred) != len(obs):
        raise ValueError(f"{len(pred)} predictions for {len(obs)} observations")
    lo, hi = prediction_interval(pred[:, 0], pred[:, 1], tau)
    p_hat = float(np.mean((obs >= lo) & (obs <= hi)))
    wlo, whi = wilson_interval(p_hat, len(obs), z)
    return CoverageRow(tau, tau, p_hat, wlo, whi, len(obs))


def _pooled(samples, net, contexts):
    """One (mu, sigma, y) triple per replicate; replicates count as separate trials."""
    ok = [s for s in samples if not s.invalid]
    if not ok:
        raise ValueError("no valid samples")
    xm = np.stack([encode_params(s.xm) for s in ok])
    mu, sigma = net.predict_batch([contexts[s.matrix_id] for s in ok], xm)
    reps = np.array([len(s.replicate_ys) for s in ok])
    pred = np.column_stack([np.repeat(mu, reps), np.repeat(sigma, reps)])
    obs = np.concatenate([s.replicate_ys for s in ok])
    return pred, obs


def coverage_table(samples, net, contexts: dict[str, MatrixContext], taus=TAUS) -> list[CoverageRow]:
    pred, obs = _pooled(samples, net, contexts)
    return [empirical_coverage(pred, obs, tau) for tau in taus]


def calibration_gap(rows) -> float:
    """Mean |observed - expected| over the coverage rows."""
    return float(np.mean([abs(r.observed - r.expected) for r in rows]))


@dataclass(frozen=True)
class InclusionRow:
    matrix_id: str
    solver: str
    alpha: float
    epsilon: float
    delta: float
    y_mean: float
    ci_lo: float
    ci_hi: float
    mu_hat: float
    included: bool


def pointwise_ci_inclusion(samples, net, contexts: dict[str, MatrixContext],
                           level: float = 0.99) -> list[InclusionRow]:
    """Does the predicted mean fall in each sample's Student-t CI of the mean?"""
    ok = [s for s in samples if not s.invalid]
    if not ok:
        return []
    xm = np.stack([encode_params(s.xm) for s in ok])
    mu, _ = net.predict_batch([contexts[s.matrix_id] for s in ok], xm)
    rows = []
    for s, m in zip(ok, mu):
        r = len(s.replicate_ys)
        if r < 2:
            raise ValueError(f"sample {s.matrix_id} {s.xm} has {r} replicate(s); need >= 2")
        half = student_t.ppf(0.5 * (1.0 + level), r - 1) * s.y_std / math.sqrt(r)
        lo, hi = s.y_mean - half, s.y_mean + half
        rows.append(InclusionRow(s.matrix_id, s.xm.solver.value, s.xm.alpha, s.xm.epsilon, s.xm.delta,
                                 s.y_mean, lo, hi, float(m), bool(lo <= m <= hi)))
    return rows


def inclusion_heatmap(rows, alpha: float) -> list[list]:
    """epsilon x delta table of inclusion flags at one alpha (header row first).

    Cells hold 1/0, or None where no sample exists; with several samples in a
    cell (e.g. two solvers) the cell holds the fraction included.
    """
    sel = [r for r in rows if r.alpha == alpha]
    eps = sorted({r.epsilon for r in sel}, reverse=True)
    dels = sorted({r.delta for r in sel}, reverse=True)
    table = [["epsilon\\delta", *dels]]
    for e in eps:
        line = [e]
        for d in dels:
            hits = [r.included for r in sel if r.epsilon == e and r.delta == d]
            line.append(float(np.mean(hits)) if hits else None)
        table.append(line)
    return table


@dataclass(frozen=True)
class BoxSummary:
    label: str
    n: int
    median: float
    q1: float
    q3: float
    min: float
    max: float
    best_xm: dict
    best_replicate_ys: list

    def to_dict(self) -> dict:
        return asdict(self)


def compare_strategies(runs, budget_labels=None) -> tuple[list[BoxSummary], list[dict]]:
    """Box summary of per-point sample medians for each run, plus a winner table.

    ``runs`` are TuningRun-like objects (``label``/``strategy`` and ``samples``).
    """
    if not runs:
        raise ValueError("need at least one run")
    boxes = []
    for run in runs:
        ok = [s for s in run.samples if not s.invalid]
        if not ok:
            raise ValueError(f"run {run.label or run.strategy} has no valid samples")
        meds = np.array([s.median for s in ok])
        q1, med, q3 = np.percentile(meds, [25, 50, 75])
        best = ok[int(np.argmin(meds))]
        boxes.append(BoxSummary(run.label or run.strategy, len(ok), float(med), float(q1), float(q3),
                                float(meds.min()), float(meds.max()), best.xm.to_dict(),
                                list(best.replicate_ys)))
    winner = min(boxes, key=lambda b: b.min)
    table = [{"label": b.label, "evaluations": b.n, "best_median": b.min, "best_xm": b.best_xm,
              "ratio_to_winner": b.min / winner.min if winner.min > 0 else math.nan,
              "winner": b is winner} for b in boxes]
    return boxes, table


def write_csv(path, rows, header=None) -> None:
    """Rows may be dataclasses, dicts, or plain sequences (then ``header`` is required)."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if rows and hasattr(rows[0], "__dataclass_fields__"):
            rows = [asdict(r) for r in rows]
        if rows and isinstance(rows[0], dict):
            header = header or list(rows[0])
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(r[k]) for k in header])
        else:
            if header:
                w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, dict):
        return json.dumps(v, sort_keys=True)
    return "" if v is None else v


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if hasattr(o, "to_dict"):
        return o.to_dict()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")
