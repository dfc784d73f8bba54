"""Convergence-rate analytics.

Non-limit pointer weights decay exponentially, with a rate equal to the
method-frequency-weighted Kullback-Leibler divergence between the
outcome law of the limit state and that of the decaying state. This
module computes those rates in closed form, fits them from simulated
trajectories, and summarises collapse statistics of trajectory
ensembles with exact binomial confidence intervals.

Entropies are in nats throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .core import ValidationError, as_distribution
from .measurement import MeasurementMethod


@dataclass(frozen=True)
class RateTable:
    """Per-method and mean divergence rates for every ordered state pair.

    ``per_method[o][b, a]`` is the divergence of the outcome law given
    pointer ``b`` from the law given pointer ``a`` under method ``o``;
    ``mean[b, a]`` is the weight-averaged rate governing how fast the
    weight of ``a`` dies when the chain settles on ``b``. ``inf``
    flags a certain discriminator (some outcome impossible from ``a``
    but not from ``b``).
    """

    labels: tuple
    per_method: Mapping[str, np.ndarray]
    mean: np.ndarray
    weights: Mapping[str, float]

    def rate(self, winner, loser) -> float:
        i = self.labels.index(winner)
        j = self.labels.index(loser)
        return float(self.mean[i, j])


def relative_entropy(method: MeasurementMethod, winner_index: int, loser_index: int) -> float:
    """KL divergence of the outcome laws: sum_i p(i|w) ln[p(i|w)/p(i|l)].

    Returns ``inf`` when some outcome is possible from the winner but
    impossible from the loser (the dynamics then kill the loser weight
    in finite time, faster than any exponential).
    """
    pw = method.probs[:, winner_index]
    pl = method.probs[:, loser_index]
    mask = pw > 0.0
    if np.any(pl[mask] == 0.0):
        return math.inf
    return float(np.sum(pw[mask] * (np.log(pw[mask]) - np.log(pl[mask]))))


def mean_relative_entropy(methods: Sequence[MeasurementMethod], weights: Mapping[str, float],
                          winner_index: int, loser_index: int) -> float:
    """Weight-averaged divergence rate sum_o w(o) S^o(winner|loser).

    ``weights`` is the long-run frequency of each method: the selection
    distribution itself for the random protocol, the stationary law of
    the reduced method chain for Markovian feedback.
    """
    w = as_distribution(np.array([weights.get(m.id, 0.0) for m in methods]), name="method weights")
    total = 0.0
    for wk, m in zip(w, methods):
        if wk == 0.0:
            continue
        s = relative_entropy(m, winner_index, loser_index)
        if math.isinf(s):
            return math.inf
        total += wk * s
    return total


def rate_table(methods: Sequence[MeasurementMethod], weights: Mapping[str, float],
               labels: Sequence) -> RateTable:
    d = methods[0].probs.shape[1]
    per = {}
    for m in methods:
        t = np.zeros((d, d))
        for i in range(d):
            for j in range(d):
                if i != j:
                    t[i, j] = relative_entropy(m, i, j)
        per[m.id] = t
    mean = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            if i != j:
                mean[i, j] = mean_relative_entropy(methods, weights, i, j)
    return RateTable(labels=tuple(labels), per_method=per, mean=mean, weights=dict(weights))


@dataclass(frozen=True)
class DecayFit:
    rate: float
    stderr: float
    n_points: int


def fit_decay_rate(steps, log_weights) -> DecayFit:
    """Least-squares slope of ``-log Q_n`` against ``n``.

    ``log_weights`` may be a single trajectory's log-weights over the
    fit window or an ensemble average; the caller is responsible for
    excluding entries below the log floor.
    """
    ns = np.asarray(steps, dtype=float)
    ys = np.asarray(log_weights, dtype=float)
    if ns.shape != ys.shape or ns.size < 3:
        raise ValidationError("need at least three aligned points to fit a decay rate")
    coef, cov = np.polyfit(ns, ys, 1, cov=True)
    return DecayFit(rate=float(-coef[0]), stderr=float(np.sqrt(cov[0, 0])), n_points=int(ns.size))


def ensemble_decay_rate(histories: Sequence[np.ndarray], alpha_index: int,
                        window: tuple[int, int]) -> DecayFit:
    """Fit the decay rate of one pointer weight on the ensemble-averaged log-trajectory."""
    lo, hi = window
    cols = []
    for h in histories:
        if h.shape[0] <= hi:
            raise ValidationError(f"history of length {h.shape[0]} shorter than window end {hi}")
        cols.append(h[lo:hi + 1, alpha_index])
    mean_log = np.mean(np.stack(cols, axis=0), axis=0)
    return fit_decay_rate(np.arange(lo, hi + 1), mean_log)


def confidence_steps(rates: Mapping, winner, level: float = 0.99) -> float:
    """Leading-order step count to reach ``level`` confidence in ``winner``.

    ``ceil(-ln(1 - level) / min_rate)`` with the minimum taken over the
    losers' mean rates; an estimate, not an exact quantile. Returns
    ``inf`` when some competitor is never distinguished.
    """
    if isinstance(rates, RateTable):
        i = rates.labels.index(winner)
        vals = [rates.mean[i, j] for j in range(len(rates.labels)) if j != i]
    else:
        vals = [v for k, v in rates.items() if k != winner]
    if not vals:
        raise ValidationError("no competing states")
    m = min(vals)
    if m <= 0.0:
        return math.inf
    return float(math.ceil(-math.log(1.0 - level) / m))


@dataclass(frozen=True)
class SectorStatistics:
    sector: int
    labels: tuple
    count: int
    frequency: float
    ci_low: float
    ci_high: float
    expected: float
    within_ci: bool


def exact_binomial_ci(k: int, n: int, level: float = 0.99) -> tuple[float, float]:
    """Two-sided Clopper-Pearson interval for a binomial proportion."""
    if not 0 <= k <= n:
        raise ValidationError("need 0 <= k <= n")
    a = (1.0 - level) / 2.0
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1.0 - a, k + 1, n - k))
    return lo, hi


def collapse_statistics(reports: Sequence, scenario, level: float = 0.99) -> list[SectorStatistics]:
    """Empirical limit-sector frequencies against the initial sector masses.

    A sector passes when the exact binomial CI around its observed
    frequency contains the predicted mass.
    """
    if not reports:
        raise ValidationError("need at least one report")
    n = len(reports)
    sectors = scenario.sectors
    expected = sectors.mass_matrix() @ scenario.pointer.q0
    counts = np.zeros(sectors.n_sectors, dtype=int)
    for r in reports:
        counts[r.sector] += 1
    out = []
    for s in range(sectors.n_sectors):
        lo, hi = exact_binomial_ci(int(counts[s]), n, level)
        out.append(SectorStatistics(
            sector=s,
            labels=sectors.sectors[s],
            count=int(counts[s]),
            frequency=counts[s] / n,
            ci_low=lo,
            ci_high=hi,
            expected=float(expected[s]),
            within_ci=bool(lo <= expected[s] <= hi),
        ))
    return out
