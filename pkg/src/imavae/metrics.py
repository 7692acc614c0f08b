"""Mean correlation coefficient (MCC) and small regression helpers."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.optimize
import scipy.stats

from .errors import MetricError

MIN_STD = 1e-12


@dataclass(frozen=True)
class MccResult:
    mcc: float
    permutation: list[int]  # true dimension i is matched to estimate permutation[i]
    signs: list[int]
    corr: np.ndarray


def corr_matrix(a, b) -> np.ndarray:
    """Pearson correlations between columns of ``a`` (rows of the result) and
    columns of ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or len(a) != len(b):
        raise MetricError("inputs must be sample matrices with equal row counts")
    if len(a) < 3:
        raise MetricError("need at least 3 samples")
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    sa = np.sqrt(np.mean(ac * ac, axis=0))
    sb = np.sqrt(np.mean(bc * bc, axis=0))
    for name, s in (("a", sa), ("b", sb)):
        bad = np.flatnonzero(s <= MIN_STD)
        if len(bad):
            raise MetricError(f"column {int(bad[0])} of {name} is constant")
    c = (ac / sa).T @ (bc / sb) / len(a)
    return np.clip(c, -1.0, 1.0)


def best_assignment(score: np.ndarray):
    """Permutation maximising the summed score; rows are matched to columns."""
    rows, cols = scipy.optimize.linear_sum_assignment(score, maximize=True)
    perm = np.empty(score.shape[0], dtype=int)
    perm[rows] = cols
    return perm, float(score[rows, cols].sum())


def brute_force_assignment(score: np.ndarray):
    """Exhaustive search over all permutations; the oracle for small d."""
    d = score.shape[0]
    best_perm, best_val = None, -np.inf
    for perm in itertools.permutations(range(d)):
        val = float(sum(score[i, perm[i]] for i in range(d)))
        if val > best_val:
            best_perm, best_val = np.array(perm), val
    return best_perm, best_val


def mcc(z_true, z_hat) -> MccResult:
    c = corr_matrix(z_true, z_hat)
    perm, total = best_assignment(np.abs(c))
    d = c.shape[0]
    matched = c[np.arange(d), perm]
    signs = [1 if v >= 0 else -1 for v in matched]
    return MccResult(float(total / d), [int(p) for p in perm], signs, c)


def fit_loglog_slope(xs, ys):
    """Ordinary least squares of log(ys) on log(xs); returns
    ``(slope, intercept, r_squared)``."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise MetricError("xs and ys must be 1-D with equal length")
    if len(xs) < 3:
        raise MetricError("need at least 3 points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise MetricError("log-log fit needs positive values")
    lx, ly = np.log(xs), np.log(ys)
    A = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def spearman(a, b) -> float:
    return float(scipy.stats.spearmanr(a, b).statistic)
