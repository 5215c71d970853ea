"""Evaluation metrics: normalized top-k regret, Kendall tau-b, the random
selection baseline and empirical soundness rates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mdp import Mdp, exact_policy_value, monte_carlo_value


@dataclass
class TrueValues:
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("true values must be finite")

    def __len__(self) -> int:
        return len(self.values)

    @classmethod
    def exact(cls, mdp: Mdp, policies) -> "TrueValues":
        return cls([exact_policy_value(mdp, p) for p in policies], {"method": "exact_dp"})

    @classmethod
    def monte_carlo(cls, env, policies, n: int = 10_000, seed: int = 0) -> "TrueValues":
        from .envs import monte_carlo_env_value
        est = [monte_carlo_value(env, p, n, seed) if isinstance(env, Mdp) else monte_carlo_env_value(env, p, n, seed)
               for p in policies]
        return cls([m for m, _ in est], {"method": "monte_carlo", "n": n, "stderr": [s for _, s in est]})


def _values(v) -> np.ndarray:
    return v.values if isinstance(v, TrueValues) else np.asarray(v, dtype=float)


def topk_regret(values, ranking: Sequence[int], k: int = 1) -> float:
    """``(J_best - max_{top k} J) / (J_best - J_worst)``; 0 when all values are equal."""
    v = _values(values)
    K = len(v)
    if sorted(int(i) for i in ranking) != list(range(K)):
        raise ValueError("ranking must be a permutation of candidate indices")
    if not 1 <= k <= K:
        raise ValueError(f"k must lie in [1, {K}]")
    spread = v.max() - v.min()
    if spread <= 0:
        return 0.0
    return float((v.max() - v[list(ranking[:k])].max()) / spread)


def kendall_tau(x, y) -> float:
    """Kendall tau-b; tied pairs count in neither the concordant nor discordant totals."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d sequences of equal length")
    if len(x) < 2:
        raise ValueError("need at least two observations")
    i, j = np.triu_indices(len(x), k=1)
    dx = np.sign(x[i] - x[j])
    dy = np.sign(y[i] - y[j])
    s = float(np.sum(dx * dy))
    n0 = len(i)
    tx = n0 - np.count_nonzero(dx)
    ty = n0 - np.count_nonzero(dy)
    denom = math.sqrt((n0 - tx) * (n0 - ty))
    if denom == 0:
        return float("nan")
    return s / denom


def random_baseline_regret(values, k: int = 1, repeats: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Mean and standard error of the regret of uniformly random k-subsets."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    v = _values(values)
    K = len(v)
    if not 1 <= k <= K:
        raise ValueError(f"k must lie in [1, {K}]")
    spread = v.max() - v.min()
    if spread <= 0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    picks = np.argsort(rng.random((repeats, K)), axis=1)[:, :k]
    reg = (v.max() - v[picks].max(axis=1)) / spread
    se = float(reg.std(ddof=1) / math.sqrt(repeats)) if repeats > 1 else 0.0
    return float(reg.mean()), se


def random_baseline_exact(values) -> float:
    """Closed-form k=1 random regret: the mean normalized gap."""
    v = _values(values)
    spread = v.max() - v.min()
    return 0.0 if spread <= 0 else float(np.mean((v.max() - v) / spread))


def empirical_soundness(select: Callable[[int], int], values, eps: float, seeds: Sequence[int]
                        ) -> tuple[float, float]:
    """Fraction of seeds where the chosen candidate is within ``eps`` of the best.

    ``select(seed) -> chosen index``. Returns ``(rate, binomial stderr)``.
    """
    v = _values(values)
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    hits = np.array([v[select(s)] >= v.max() - eps for s in seeds], dtype=float)
    rate = float(hits.mean())
    return rate, math.sqrt(rate * (1 - rate) / len(seeds))
