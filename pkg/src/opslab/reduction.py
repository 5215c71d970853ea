"""Policy evaluation by repeated two-candidate selection on reward-probe MDPs
(bisection on the value of the target policy).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

from .envs import make_reward_probe, probe_policies
from .mdp import Mdp, TabularPolicy, exact_policy_value, sample_trajectories

log = logging.getLogger(__name__)


class OracleError(ValueError):
    pass


class OpsOracle:
    """Wraps ``fn(mdp, data, policies) -> index`` and counts calls."""

    def __init__(self, fn: Callable, name: str = "ops"):
        self.fn = fn
        self.name = name
        self.calls = 0

    def __call__(self, mdp: Mdp, data, policies) -> int:
        self.calls += 1
        idx = self.fn(mdp, data, policies)
        if idx not in (0, 1):
            raise OracleError(f"oracle returned {idx!r}; expected 0 or 1")
        return int(idx)


def exact_oracle() -> OpsOracle:
    """Picks the policy with the higher exact value; ties go to index 0."""
    def choose(mdp, data, policies):
        v = [exact_policy_value(mdp, p) for p in policies]
        return 0 if v[0] >= v[1] else 1
    return OpsOracle(choose, "exact")


def estimator_oracle(estimator) -> OpsOracle:
    """Picks by an OPE estimator ``f(data, policy) -> value or OpeEstimate``; ties go to index 0."""
    def choose(mdp, data, policies):
        v = [getattr(estimator(data, p), "value", None) for p in policies]
        v = [x if x is not None else float(estimator(data, p)) for x, p in zip(v, policies)]
        return 0 if v[0] >= v[1] else 1
    return OpsOracle(choose, getattr(estimator, "__name__", "estimator"))


def fresh_data(n: int, behavior: Callable[[Mdp], TabularPolicy] | None = None) -> Callable:
    """Data provider: ``n`` new trajectories from each probe MDP (uniform behavior by default)."""
    def provide(probe: Mdp, call: int, seed: int):
        pb = behavior(probe) if behavior else TabularPolicy.uniform(probe)
        return sample_trajectories(probe, pb, n, seed + call)
    provide.n = n
    return provide


def no_data(probe: Mdp, call: int, seed: int):
    return None


@dataclass
class ReductionResult:
    estimate: float
    calls: int
    trace: list = field(default_factory=list)
    eps_prime: float = 0.0
    budget: int = 0


def call_budget(v_max: float, eps: float) -> int:
    """``ceil(log2(V_max / eps'))`` with ``eps' = 2 eps / 3``; at least one call."""
    return max(1, math.ceil(math.log2(v_max / (2 * eps / 3))))


def ope_via_ops(oracle: OpsOracle, mdp: Mdp, target: TabularPolicy, eps: float, data_provider=no_data,
                seed: int = 0, check=None) -> ReductionResult:
    """Bisection on the value of ``target``.

    Each call builds the probe MDP for ``r = (U + L) / 2`` and asks the oracle
    to choose between the fixed-reward policy (index 0) and the policy that
    enters the base MDP and then follows ``target`` (index 1). Choosing the
    former moves ``U`` down to ``r``, the latter moves ``L`` up.

    ``check(L, U, eps_prime)`` (optional) is invoked after every call.
    """
    v_max = mdp.v_max
    if eps <= 0:
        raise ValueError("eps must be positive")
    if eps >= v_max / 3:
        log.warning("eps=%g is not below V_max/3=%g; the estimate is still within eps", eps, v_max / 3)
    eps_p = 2 * eps / 3
    budget = call_budget(v_max, eps)
    L, U = 0.0, v_max
    trace = []
    while True:
        r = (U + L) / 2
        probe = make_reward_probe(mdp, r)
        pi1, pi2 = probe_policies(probe, target)
        data = data_provider(probe, len(trace), seed)
        chosen = oracle(probe, data, [pi1, pi2])
        if chosen == 0:
            U = r
        else:
            L = r
        row = {"call": len(trace) + 1, "r": r, "chosen": chosen, "L": L, "U": U}
        if data is not None:
            row["n"] = data.n_episodes
        trace.append(row)
        if check is not None:
            check(L, U, eps_p)
        if U - L <= eps_p or len(trace) >= budget:
            break
    return ReductionResult((U + L) / 2, len(trace), trace, eps_p, budget)
