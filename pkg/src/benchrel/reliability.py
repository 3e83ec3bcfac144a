"""Single-seed error diagnostics and the statistics relating them to local variance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit
from scipy import stats
from scipy.special import ndtr

P_FLOOR = 1e-300
# at or below this many values, p-values come from the exact permutation
# distribution; the large-sample approximations are off by >0.01 there
EXACT_MAX = 16


@dataclass(frozen=True)
class ReliabilityRow:
    method: str
    dataset: str
    n: int
    local_variance: float
    rel_rmse: float
    p_within_10: float
    mean_metric: float
    valid_count: int = 0


@dataclass(frozen=True)
class CorrelationReport:
    rho: float
    p_value: float
    pair_count: int


@dataclass(frozen=True)
class QuartileReport:
    quartile_means: tuple
    high_var_mean: float
    rest_mean: float
    ratio: float
    mw_p: float

    @property
    def monotone(self) -> bool:
        q = self.quartile_means
        return all(b >= a for a, b in zip(q, q[1:]))


@dataclass(frozen=True)
class FixedEffectsFit:
    slope: float
    se: float
    ci_low: float
    ci_high: float
    coefficients: dict
    n_obs: int


def single_seed_summary(values, tolerance: float = 0.1):
    """Relative RMSE and P(|c - mean| / mean <= tolerance) of one run drawn
    uniformly from the repeated-run values.

    Exact over the empirical distribution, so it equals the limit of
    resampling one run with replacement infinitely often.
    """
    c = np.asarray(values, dtype=np.float64)
    if c.size < 2:
        raise ValueError("need at least two runs")
    mean = c.mean()
    if mean <= 0:
        raise ValueError(f"relative error undefined for non-positive mean {mean}")
    rel = (c - mean) / mean
    rel_rmse = float(np.sqrt(np.mean(rel * rel)))
    p_within = float(np.mean(np.abs(c - mean) <= tolerance * mean))
    return rel_rmse, p_within


def rankdata(x) -> np.ndarray:
    """Ranks starting at 1 with ties given their average rank."""
    return stats.rankdata(np.asarray(x, dtype=np.float64), method="average")


@njit(cache=True)
def _permutation_sum_counts(a, b):
    """Counts of sum_i a[i] * b[pi(i)] over all permutations pi.

    ``a`` and ``b`` are non-negative integer vectors of equal length k.  A
    DP over the set of b-entries already used, one popcount layer at a time.
    Returns (counts, offset) with counts[t - offset] for each total t.
    """
    k = a.shape[0]
    full = 1 << k
    pop = np.zeros(full, np.int64)
    for m in range(1, full):
        pop[m] = pop[m >> 1] + (m & 1)
    # position of each mask inside its popcount layer
    rank = np.zeros(full, np.int64)
    layer_size = np.zeros(k + 1, np.int64)
    for m in range(full):
        rank[m] = layer_size[pop[m]]
        layer_size[pop[m]] += 1
    # largest partial sum after p steps: a[:p] paired with the p largest b
    # in matching order (rearrangement inequality); bounds each layer's width
    b_sorted = np.sort(b)
    cap = np.zeros(k + 1, np.int64)
    for p in range(1, k + 1):
        a_top = np.sort(a[:p])
        cap[p] = np.sum(a_top * b_sorted[k - p:])
    prev = np.zeros((1, 1))
    prev[0, 0] = 1.0
    prev_lo, prev_hi = 0, 0
    for p in range(k):
        nxt = np.zeros((layer_size[p + 1], cap[p + 1] + 1))
        nxt_lo, nxt_hi = cap[p + 1], 0
        for m in range(full):
            if pop[m] != p:
                continue
            row = prev[rank[m]]
            for j in range(k):
                if m & (1 << j):
                    continue
                step = a[p] * b[j]
                dst = nxt[rank[m | (1 << j)]]
                for t in range(prev_lo, prev_hi + 1):
                    c = row[t]
                    if c != 0.0:
                        dst[t + step] += c
                if prev_lo + step < nxt_lo:
                    nxt_lo = prev_lo + step
                if prev_hi + step > nxt_hi:
                    nxt_hi = prev_hi + step
        prev, prev_lo, prev_hi = nxt, nxt_lo, min(nxt_hi, cap[p + 1])
    return prev[0, prev_lo:prev_hi + 1].copy(), prev_lo


@lru_cache(maxsize=64)
def _null_distribution(a: tuple, b: tuple):
    counts, offset = _permutation_sum_counts(np.array(a, np.int64), np.array(b, np.int64))
    return counts / counts.sum(), offset


def spearman_exact_p(x, y) -> float:
    """Two-sided p of Spearman's rho under the exact permutation null.

    Ties are handled exactly (average ranks doubled to stay integral).
    Cost grows as 2**k, so this is meant for k <= EXACT_MAX.
    """
    rx = np.rint(2 * rankdata(x)).astype(np.int64)
    ry = np.rint(2 * rankdata(y)).astype(np.int64)
    # without ties every doubled rank is even; halving keeps the DP narrow
    rx //= np.gcd.reduce(rx)
    ry //= np.gcd.reduce(ry)
    k = rx.size
    # sorting makes the cache key depend only on the rank multisets
    probs, offset = _null_distribution(tuple(sorted(rx)), tuple(sorted(ry)))
    center = rx.sum() * ry.sum() / k
    observed = abs(float(rx @ ry) - center)
    totals = offset + np.arange(probs.size)
    return float(min(1.0, probs[np.abs(totals - center) >= observed - 1e-9].sum()))


def spearman(x, y) -> CorrelationReport:
    """Rank correlation with average ranks for ties.

    The two-sided p-value is exact for at most EXACT_MAX pairs and uses the
    t approximation with k - 2 degrees of freedom beyond that.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    k = x.size
    if y.size != k:
        raise ValueError("spearman inputs must have equal length")
    if k < 3:
        raise ValueError("spearman needs at least three pairs")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("spearman correlation undefined for a constant input")
    rx = rankdata(x) - (k + 1) / 2.0
    ry = rankdata(y) - (k + 1) / 2.0
    rho = float(np.clip((rx @ ry) / math.sqrt((rx @ rx) * (ry @ ry)), -1.0, 1.0))
    if k <= EXACT_MAX:
        return CorrelationReport(rho, max(spearman_exact_p(x, y), P_FLOOR), k)
    if abs(rho) >= 1.0:
        return CorrelationReport(rho, 1e-16, k)
    t = rho * math.sqrt((k - 2) / (1.0 - rho * rho))
    p = float(2.0 * stats.t.sf(abs(t), k - 2))
    return CorrelationReport(rho, min(max(p, P_FLOOR), 1.0), k)


def mann_whitney_u(a, b) -> float:
    """U statistic of ``a`` (number of (a, b) pairs with a > b, ties count 1/2)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ranks = rankdata(np.concatenate([a, b]))
    return float(ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0)


def _rank_sum_upper_tail(ranks2, n1, observed2) -> float:
    """P(sum of n1 doubled ranks >= observed2) over all equally likely subsets."""
    total = int(ranks2.sum())
    ways = np.zeros((n1 + 1, total + 1))
    ways[0, 0] = 1.0
    for r in ranks2:
        r = int(r)
        # walk counts downwards so each value is used at most once
        for c in range(n1, 0, -1):
            ways[c, r:] += ways[c - 1, : total + 1 - r]
    dist = ways[n1]
    return float(dist[int(observed2):].sum() / dist.sum())


def mann_whitney_one_sided(a, b) -> float:
    """p-value for ``a`` stochastically greater than ``b``.

    Exact over all relabellings of the pooled sample (ties included) when it
    holds at most EXACT_MAX values; otherwise the normal approximation with
    tie-corrected variance and a 0.5 continuity correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = a.size, b.size
    if n1 < 1 or n2 < 1:
        raise ValueError("both samples need at least one value")
    N = n1 + n2
    if N <= EXACT_MAX:
        ranks2 = np.rint(2 * rankdata(np.concatenate([a, b]))).astype(np.int64)
        return _rank_sum_upper_tail(ranks2, n1, ranks2[:n1].sum())
    u = mann_whitney_u(a, b)
    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie_term = float(np.sum(counts**3 - counts))
    var = n1 * n2 / 12.0 * ((N + 1) - tie_term / (N * (N - 1)))
    mean = n1 * n2 / 2.0
    if var <= 0:
        return 0.5
    z = (u - mean - 0.5) / math.sqrt(var)
    return float(ndtr(-z))


def quartile_analysis(rows) -> QuartileReport:
    """Rank rows by local variance; compare the top quarter against the rest."""
    rows = list(rows)
    k = len(rows)
    if k < 8:
        raise ValueError(f"quartile analysis needs at least 8 rows, got {k}")
    lv = np.array([r.local_variance for r in rows])
    err = np.array([r.rel_rmse for r in rows])
    order = np.argsort(lv, kind="stable")
    err_sorted = err[order]
    top = math.ceil(k / 4)
    # quartile boundaries on rank positions, the top one sized ceil(k/4)
    bounds = [0, (k - top) // 3, 2 * (k - top) // 3, k - top, k]
    q_means = tuple(float(err_sorted[bounds[i]:bounds[i + 1]].mean()) for i in range(4))
    high = err_sorted[k - top:]
    rest = err_sorted[: k - top]
    high_mean, rest_mean = float(high.mean()), float(rest.mean())
    ratio = high_mean / rest_mean if rest_mean > 0 else (1.0 if high_mean == rest_mean else math.inf)
    return QuartileReport(q_means, high_mean, rest_mean, ratio, mann_whitney_one_sided(high, rest))


def _dummies(labels, prefix):
    levels = sorted(set(labels))
    cols, names = [], []
    for lev in levels[1:]:
        cols.append([1.0 if lab == lev else 0.0 for lab in labels])
        names.append(f"{prefix}[{lev}]")
    return cols, names


def fixed_effects_fit(rows, ci_z: float = 1.96) -> FixedEffectsFit:
    """OLS of log rel-RMSE on log local variance with dataset and method dummies."""
    rows = list(rows)
    lv = np.array([r.local_variance for r in rows], dtype=np.float64)
    err = np.array([r.rel_rmse for r in rows], dtype=np.float64)
    if np.any(lv <= 0) or np.any(err <= 0):
        raise ValueError("fixed-effects fit needs positive local variance and rel-RMSE")
    cols = [np.ones(len(rows)), np.log(lv)]
    names = ["intercept", "log_local_variance"]
    for attr in ("dataset", "method"):
        c, nm = _dummies([getattr(r, attr) for r in rows], attr)
        cols.extend(np.array(x) for x in c)
        names.extend(nm)
    X = np.column_stack(cols)
    y = np.log(err)
    k, p = X.shape
    rank = np.linalg.matrix_rank(X)
    if rank < p or k <= p:
        offending = []
        for j in range(p):
            if np.linalg.matrix_rank(np.delete(X, j, axis=1)) == rank:
                offending.append(names[j])
        raise ValueError(f"rank-deficient design ({k} rows, {p} columns); offending columns: {offending}")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    sigma2 = float(resid @ resid) / (k - p)
    cov = sigma2 * np.linalg.inv(X.T @ X)
    slope = float(beta[1])
    se = float(math.sqrt(cov[1, 1]))
    return FixedEffectsFit(
        slope, se, slope - ci_z * se, slope + ci_z * se,
        {nm: float(b) for nm, b in zip(names, beta)}, k,
    )
