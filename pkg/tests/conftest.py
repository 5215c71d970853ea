from __future__ import annotations

import itertools
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def enumerate_trajectories(mdp, pi):
    """Yield (probability, return, [(h, s, a, r, s')...]) over every trajectory with positive mass.

    Independent of the DP code: walks the explicit kernel and reward tables.
    """
    H = mdp.horizon

    def walk(h, s, prob, ret, steps):
        if prob == 0:
            return
        for a in range(mdp.num_actions):
            pa = pi.tables[h][s, a]
            if pa == 0:
                continue
            for rv, rp in zip(mdp.reward_values[h][s, a], mdp.reward_probs[h][s, a]):
                if rp == 0:
                    continue
                if h == H - 1:
                    yield prob * pa * rp, ret + rv, steps + [(h, s, a, rv, None)]
                else:
                    for sp in range(mdp.num_states[h + 1]):
                        pt = mdp.transition[h][s, a, sp]
                        if pt > 0:
                            yield from walk(h + 1, sp, prob * pa * rp * pt, ret + rv, steps + [(h, s, a, rv, sp)])

    yield from walk(0, mdp.initial_state, 1.0, 0.0, [])


def brute_force_value(mdp, pi) -> float:
    return sum(p * g for p, g, _ in enumerate_trajectories(mdp, pi))


def all_deterministic_policies(mdp):
    from opslab.mdp import TabularPolicy
    A = mdp.num_actions
    layers = [list(itertools.product(range(A), repeat=S)) for S in mdp.num_states]
    for choice in itertools.product(*layers):
        yield TabularPolicy([np.eye(A)[list(c)] for c in choice])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# Acceptance report lines, echoed in the terminal summary

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
