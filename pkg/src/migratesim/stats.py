"""Small statistical helpers shared by the measurement and experiment layers."""

from __future__ import annotations

import math

import numpy as np
from scipy import stats as sps

# Replication counts below this produce no confidence interval: the normal
# approximation over replication means is not trusted for tiny samples.
MIN_REPS_FOR_CI = 20

SEED_STRIDE = 10 ** 6  # seed = base + cell_index * SEED_STRIDE + rep_index


def cell_seed(base_seed: int, cell_index: int, rep_index: int) -> int:
    if rep_index >= SEED_STRIDE:
        raise ValueError(f"rep index {rep_index} exceeds the seed stride {SEED_STRIDE}")
    return base_seed + cell_index * SEED_STRIDE + rep_index


def mean_sd(values) -> tuple:
    """Sample mean and (n-1)-normalized standard deviation."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values to summarize")
    mean = float(v.mean())
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return mean, sd


def normal_ci(values, level: float = 0.95):
    """Normal-approximation CI over replication values, or None if too few."""
    v = np.asarray(values, dtype=float)
    if v.size < MIN_REPS_FOR_CI:
        return None
    mean, sd = mean_sd(v)
    z = float(sps.norm.ppf(0.5 + level / 2))
    half = z * sd / math.sqrt(v.size)
    return (mean - half, mean + half)


def standard_error(values) -> float:
    v = np.asarray(values, dtype=float)
    _, sd = mean_sd(v)
    return sd / math.sqrt(v.size)


def ols_slope(t, y) -> float:
    """Least-squares slope of y against t."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.size < 2:
        raise ValueError("slope needs at least two points")
    tc = t - t.mean()
    denom = float(np.dot(tc, tc))
    if denom == 0.0:
        raise ValueError("degenerate time axis")
    return float(np.dot(tc, y - y.mean()) / denom)


def chi_square_gof(observed, expected, min_expected: float = 5.0) -> tuple:
    """Pearson goodness-of-fit with tail pooling.

    observed and expected are aligned count/expectation vectors over ordered
    bins. Adjacent bins are pooled from the right, then from the left, until
    every pooled expectation reaches min_expected. Returns (stat, df, p).
    Probabilities are taken as known, so df = bins - 1.
    """
    obs = [float(o) for o in observed]
    exp = [float(e) for e in expected]
    if len(obs) != len(exp):
        raise ValueError("observed and expected lengths differ")
    while len(exp) > 2 and exp[-1] < min_expected:
        exp[-2] += exp.pop()
        obs[-2] += obs.pop()
    while len(exp) > 2 and exp[0] < min_expected:
        exp[1] += exp.pop(0)
        obs[1] += obs.pop(0)
    if any(e <= 0 for e in exp):
        raise ValueError("pooled expected counts must be positive")
    stat = sum((o - e) ** 2 / e for o, e in zip(obs, exp))
    df = len(obs) - 1
    p = float(sps.chi2.sf(stat, df))
    return stat, df, p


def poisson_gof(samples, mean: float) -> tuple:
    """Chi-square fit of integer samples against a Poisson(mean) law.

    Bins run from 0 to the sample maximum, with everything beyond collected
    in one overflow bin. Returns (stat, df, p).
    """
    samples = np.asarray(samples, dtype=np.int64)
    if np.any(samples < 0):
        raise ValueError("Poisson samples must be non-negative")
    n = samples.size
    top = int(samples.max()) if n else 0
    observed = np.bincount(samples, minlength=top + 1).astype(float)
    probs = sps.poisson.pmf(np.arange(top + 1), mean)
    expected = probs * n
    # overflow bin keeps the expectations summing to n
    observed = np.append(observed, 0.0)
    expected = np.append(expected, n * float(sps.poisson.sf(top, mean)))
    return chi_square_gof(observed, expected)
