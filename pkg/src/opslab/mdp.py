"""Layered finite-horizon MDPs, tabular policies and value tables, exact
dynamic-programming oracles, and trajectory sampling.

States are identified by ``(layer, index)`` pairs; every array below is indexed
by layer first, so the set of states at each step is disjoint by construction.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_TOL = 1e-12
INFINITE_COVERAGE = math.inf


class PolicyUndefinedError(ValueError):
    """A policy has no action distribution for a state that is reached."""

    def __init__(self, h: int, s: int):
        super().__init__(f"policy undefined at reachable state (h={h}, s={s})")
        self.h = h
        self.s = s


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Mdp:
    """Explicit finite-horizon MDP with a single initial state.

    ``transition[h]`` has shape ``(S_h, A, S_{h+1})`` for ``h < H - 1``; the
    last layer has no successor. Rewards are finite-support distributions
    independent of the next state: ``reward_values[h]`` and ``reward_probs[h]``
    both have shape ``(S_h, A, K_h)``.
    """

    num_states: tuple[int, ...]
    num_actions: int
    transition: tuple[np.ndarray, ...]
    reward_values: tuple[np.ndarray, ...]
    reward_probs: tuple[np.ndarray, ...]
    initial_state: int = 0
    r_max: float = 1.0
    features: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        H = len(self.num_states)
        A = self.num_actions
        if H < 1 or A < 1:
            raise ValueError("need at least one layer and one action")
        object.__setattr__(self, "num_states", tuple(int(s) for s in self.num_states))
        object.__setattr__(self, "transition", tuple(_frozen(p) for p in self.transition))
        object.__setattr__(self, "reward_values", tuple(_frozen(v) for v in self.reward_values))
        object.__setattr__(self, "reward_probs", tuple(_frozen(p) for p in self.reward_probs))
        feats = {name: tuple(_frozen(f) for f in layers) for name, layers in self.features.items()}
        object.__setattr__(self, "features", feats)
        if len(self.transition) != H - 1:
            raise ValueError(f"expected {H - 1} transition layers, got {len(self.transition)}")
        if len(self.reward_values) != H or len(self.reward_probs) != H:
            raise ValueError("reward tables must have one entry per layer")
        for h, P in enumerate(self.transition):
            if P.shape != (self.num_states[h], A, self.num_states[h + 1]):
                raise ValueError(f"transition[{h}] has shape {P.shape}")
            if np.any(P < 0) or np.max(np.abs(P.sum(-1) - 1.0)) > PROB_TOL:
                raise ValueError(f"transition[{h}] rows must be distributions")
        for h in range(H):
            vals, probs = self.reward_values[h], self.reward_probs[h]
            if vals.shape != probs.shape or vals.shape[:2] != (self.num_states[h], A):
                raise ValueError(f"reward tables at layer {h} have bad shape")
            if np.any(probs < 0) or np.max(np.abs(probs.sum(-1) - 1.0)) > PROB_TOL:
                raise ValueError(f"reward distributions at layer {h} must sum to 1")
            support = vals[probs > 0]
            if support.size and (support.min() < 0 or support.max() > self.r_max + 1e-12):
                raise ValueError(f"reward support at layer {h} outside [0, r_max]")
        if not 0 <= self.initial_state < self.num_states[0]:
            raise ValueError("initial_state out of range")

    @property
    def horizon(self) -> int:
        return len(self.num_states)

    @property
    def v_max(self) -> float:
        return self.horizon * self.r_max

    def mean_reward(self, h: int) -> np.ndarray:
        return np.sum(self.reward_values[h] * self.reward_probs[h], axis=-1)

    def to_dict(self) -> dict:
        return {
            "num_states": list(self.num_states),
            "num_actions": self.num_actions,
            "initial_state": self.initial_state,
            "r_max": self.r_max,
            "transition": [p.tolist() for p in self.transition],
            "reward_values": [v.tolist() for v in self.reward_values],
            "reward_probs": [p.tolist() for p in self.reward_probs],
            "features": {k: [f.tolist() for f in v] for k, v in self.features.items()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mdp":
        return cls(
            num_states=tuple(d["num_states"]),
            num_actions=d["num_actions"],
            transition=tuple(np.array(p, dtype=float) for p in d["transition"]),
            reward_values=tuple(np.array(v, dtype=float) for v in d["reward_values"]),
            reward_probs=tuple(np.array(p, dtype=float) for p in d["reward_probs"]),
            initial_state=d.get("initial_state", 0),
            r_max=d.get("r_max", 1.0),
            features={k: [np.array(f, dtype=float) for f in v] for k, v in d.get("features", {}).items()},
            meta=d.get("meta", {}),
        )


class TabularPolicy:
    """Non-stationary stochastic policy: ``tables[h]`` has shape ``(S_h, A)``.

    Rows filled with NaN mark states where the policy is undefined.
    """

    def __init__(self, tables: Sequence[np.ndarray]):
        self.tables = tuple(_frozen(t) for t in tables)
        for h, t in enumerate(self.tables):
            ok = ~np.isnan(t).any(axis=1)
            if np.any(t[ok] < 0) or (ok.any() and np.max(np.abs(t[ok].sum(1) - 1.0)) > PROB_TOL):
                raise ValueError(f"policy rows at layer {h} must be distributions")

    @property
    def num_actions(self) -> int:
        return self.tables[0].shape[1]

    def probs(self, h: int, s) -> np.ndarray:
        return self.tables[h][s]

    def is_defined(self, h: int, s: int) -> bool:
        return not np.isnan(self.tables[h][s]).any()

    def __eq__(self, other):
        if not isinstance(other, TabularPolicy) or len(other.tables) != len(self.tables):
            return NotImplemented
        return all(np.array_equal(a, b, equal_nan=True) for a, b in zip(self.tables, other.tables))

    def to_list(self) -> list:
        return [np.where(np.isnan(t), None, t).tolist() for t in self.tables]

    @classmethod
    def from_list(cls, tables) -> "TabularPolicy":
        return cls([np.array(t, dtype=float) for t in tables])

    @classmethod
    def uniform(cls, mdp: Mdp) -> "TabularPolicy":
        A = mdp.num_actions
        return cls([np.full((S, A), 1.0 / A) for S in mdp.num_states])

    @classmethod
    def deterministic(cls, mdp: Mdp, actions: Sequence[np.ndarray]) -> "TabularPolicy":
        A = mdp.num_actions
        return cls([np.eye(A)[np.asarray(a, dtype=int)] for a in actions])


class TabularQ:
    """Action-value table per layer, ``tables[h]`` of shape ``(S_h, A)``."""

    kind = "tabular"

    def __init__(self, tables: Sequence[np.ndarray], meta: dict | None = None):
        self.tables = tuple(_frozen(t) for t in tables)
        self.meta = dict(meta or {})
        if not all(np.all(np.isfinite(t)) for t in self.tables):
            raise ValueError("q values must be finite")

    def values(self, h: int, s) -> np.ndarray:
        return self.tables[h][s]

    def __mul__(self, c: float) -> "TabularQ":
        return TabularQ([c * t for t in self.tables])

    __rmul__ = __mul__

    def __add__(self, other: "TabularQ") -> "TabularQ":
        return TabularQ([a + b for a, b in zip(self.tables, other.tables)])

    def to_list(self) -> list:
        return [t.tolist() for t in self.tables]

    @classmethod
    def from_list(cls, tables) -> "TabularQ":
        return cls([np.array(t, dtype=float) for t in tables])


def greedy(q: TabularQ) -> TabularPolicy:
    """Deterministic greedy policy; ties go to the lowest action index."""
    tables = []
    for t in q.tables:
        tables.append(np.eye(t.shape[1])[np.argmax(t, axis=1)])
    return TabularPolicy(tables)


# ---------------------------------------------------------------------------
# Exact oracles
# ---------------------------------------------------------------------------


def _state_occupancy(mdp: Mdp, pi: TabularPolicy, check: bool = True) -> list[np.ndarray]:
    rho = np.zeros(mdp.num_states[0])
    rho[mdp.initial_state] = 1.0
    out = []
    for h in range(mdp.horizon):
        if check:
            reached = np.nonzero(rho > 0)[0]
            bad = [s for s in reached if not pi.is_defined(h, s)]
            if bad:
                raise PolicyUndefinedError(h, int(bad[0]))
        out.append(rho)
        if h < mdp.horizon - 1:
            d = rho[:, None] * np.nan_to_num(pi.tables[h])
            rho = np.einsum("sa,sat->t", d, mdp.transition[h])
    return out


def occupancy(mdp: Mdp, pi: TabularPolicy) -> list[np.ndarray]:
    """Per-layer state-action occupancy ``d_h(s, a) = P(S_h=s, A_h=a)``."""
    rhos = _state_occupancy(mdp, pi)
    return [rho[:, None] * np.nan_to_num(pi.tables[h]) for h, rho in enumerate(rhos)]


def mixture_occupancy(mdp: Mdp, policies: Sequence[TabularPolicy], weights=None) -> list[np.ndarray]:
    """Occupancy of the trajectory-level mixture (one policy drawn per episode)."""
    K = len(policies)
    w = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, dtype=float)
    occs = [occupancy(mdp, p) for p in policies]
    return [sum(w[k] * occs[k][h] for k in range(K)) for h in range(mdp.horizon)]


def _expect_next(mdp: Mdp, h: int, v_next: np.ndarray) -> np.ndarray:
    return mdp.transition[h] @ v_next


def policy_q(mdp: Mdp, pi: TabularPolicy) -> TabularQ:
    """``q^pi`` by backward induction with the evaluation operator."""
    H = mdp.horizon
    tables = [None] * H
    v_next = None
    for h in reversed(range(H)):
        q = mdp.mean_reward(h)
        if h < H - 1:
            q = q + _expect_next(mdp, h, v_next)
        tables[h] = q
        v_next = np.sum(np.nan_to_num(pi.tables[h]) * q, axis=1)
    return TabularQ(tables)


def exact_policy_value(mdp: Mdp, pi: TabularPolicy) -> float:
    """Exact ``J(pi) = v_0^pi(s0)``."""
    _state_occupancy(mdp, pi, check=True)
    q0 = policy_q(mdp, pi).tables[0][mdp.initial_state]
    return float(np.dot(pi.tables[0][mdp.initial_state], q0))


def optimal_q(mdp: Mdp) -> TabularQ:
    H = mdp.horizon
    tables = [None] * H
    v_next = None
    for h in reversed(range(H)):
        q = mdp.mean_reward(h)
        if h < H - 1:
            q = q + _expect_next(mdp, h, v_next)
        tables[h] = q
        v_next = q.max(axis=1)
    return TabularQ(tables)


def optimal_value(mdp: Mdp) -> float:
    return float(optimal_q(mdp).tables[0][mdp.initial_state].max())


def bellman_backup(mdp: Mdp, q: TabularQ) -> list[np.ndarray]:
    """Optimality backup ``T q``; the last layer backs up to the mean reward."""
    H = mdp.horizon
    out = []
    for h in range(H):
        t = mdp.mean_reward(h)
        if h < H - 1:
            t = t + _expect_next(mdp, h, q.tables[h + 1].max(axis=1))
        out.append(t)
    return out


def exact_bellman_error(mdp: Mdp, q: TabularQ, mu: Sequence[np.ndarray]) -> float:
    """``(1/H) sum_h ||q_h - (T q)_h||^2_{2, mu_h}`` computed from the model."""
    H = mdp.horizon
    if len(mu) != H:
        raise ValueError("mu needs one distribution per layer")
    for h, m in enumerate(mu):
        if np.any(np.asarray(m) < 0) or abs(float(np.sum(m)) - 1.0) > 1e-9:
            raise ValueError(f"mu at layer {h} is not a normalized distribution")
    tq = bellman_backup(mdp, q)
    return float(sum(np.sum(mu[h] * (q.tables[h] - tq[h]) ** 2) for h in range(H)) / H)


def concentration_coefficient(mdp: Mdp, policies: Sequence[TabularPolicy], mu: Sequence[np.ndarray]) -> float:
    """``max_{pi, h, s, a} d^pi_h(s,a) / mu_h(s,a)``.

    Returns ``INFINITE_COVERAGE`` when some policy visits a pair the data never does.
    """
    C = 0.0
    for pi in policies:
        for h, d in enumerate(occupancy(mdp, pi)):
            m = np.asarray(mu[h])
            pos = d > 0
            if np.any(pos & (m <= 0)):
                return INFINITE_COVERAGE
            if pos.any():
                C = max(C, float(np.max(d[pos] / m[pos])))
    return C


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Transitions:
    """Flat view of logged transitions used by regression-based methods."""

    h: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    sp: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.h)

    def take(self, idx) -> "Transitions":
        return Transitions(self.h[idx], self.s[idx], self.a[idx], self.r[idx], self.sp[idx], self.terminal[idx])


@dataclass(frozen=True, eq=False)
class Dataset:
    """``n`` trajectories of length ``H`` with recorded behavior probabilities.

    ``states``/``next_states`` are integer layer indices for tabular data, or
    observation vectors with a trailing feature axis for simulated
    continuous-state data. ``terminal[i, h]`` marks steps whose successor has
    value zero (the last layer, or an ended continuous episode).
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    behavior_probs: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, H = self.actions.shape
        for name in ("rewards", "terminal", "behavior_probs"):
            if getattr(self, name).shape != (n, H):
                raise ValueError(f"{name} must have shape {(n, H)}")
        if np.any(self.behavior_probs <= 0):
            raise ValueError("recorded behavior probabilities must be positive")

    @property
    def n_episodes(self) -> int:
        return self.actions.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def is_tabular(self) -> bool:
        return self.states.ndim == 2

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def __len__(self) -> int:
        return self.n_episodes

    def episodes(self, idx) -> "Dataset":
        return Dataset(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx],
                       self.terminal[idx], self.behavior_probs[idx], dict(self.meta))

    def transitions(self) -> Transitions:
        n, H = self.actions.shape
        h = np.broadcast_to(np.arange(H), (n, H)).reshape(-1)
        tail = self.states.shape[2:]
        return Transitions(
            h=np.ascontiguousarray(h),
            s=self.states.reshape((n * H,) + tail),
            a=self.actions.reshape(-1),
            r=self.rewards.reshape(-1),
            sp=self.next_states.reshape((n * H,) + tail),
            terminal=self.terminal.reshape(-1),
        )

    def layer(self, h: int) -> Transitions:
        n = self.n_episodes
        return Transitions(np.full(n, h), self.states[:, h], self.actions[:, h], self.rewards[:, h],
                           self.next_states[:, h], self.terminal[:, h])

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        return Dataset(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                         ("states", "actions", "rewards", "next_states", "terminal", "behavior_probs")),
                       meta=dict(parts[0].meta))

    # JSON Lines: one trajectory per line.
    def to_jsonl(self, path) -> None:
        Path(path).write_text("".join(json.dumps(row) + "\n" for row in self._rows()))

    def _rows(self):
        H = self.horizon
        for i in range(self.n_episodes):
            steps = []
            for h in range(H):
                step = {"h": h, "a": int(self.actions[i, h]), "r": float(self.rewards[i, h])}
                if self.is_tabular:
                    step["s"] = [h, int(self.states[i, h])]
                    step["sp"] = [H, 0] if self.terminal[i, h] else [h + 1, int(self.next_states[i, h])]
                else:
                    step["s"] = {"obs": self.states[i, h].tolist()}
                    step["sp"] = {"obs": self.next_states[i, h].tolist(), "done": bool(self.terminal[i, h])}
                step["pb"] = float(self.behavior_probs[i, h])
                steps.append(step)
            yield {"episode": i, "steps": steps}

    @classmethod
    def from_jsonl(cls, path) -> "Dataset":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not rows:
            raise ValueError(f"{path}: no trajectories")
        rows.sort(key=lambda r: r["episode"])
        H = len(rows[0]["steps"])
        tabular = isinstance(rows[0]["steps"][0]["s"], list)
        S, SP, A, R, T, PB = [], [], [], [], [], []
        for row in rows:
            steps = row["steps"]
            if len(steps) != H or [st["h"] for st in steps] != list(range(H)):
                raise ValueError(f"episode {row['episode']}: steps must cover h = 0..{H - 1}")
            for st in steps:
                if tabular:
                    S.append(st["s"][1])
                    done = st["sp"][0] >= H
                    SP.append(0 if done else st["sp"][1])
                else:
                    S.append(st["s"]["obs"])
                    SP.append(st["sp"]["obs"])
                    done = st["sp"]["done"]
                T.append(done)
                A.append(st["a"])
                R.append(st["r"])
                PB.append(st["pb"])
        n = len(rows)
        shape = (n, H) if tabular else (n, H, -1)
        return cls(
            states=np.array(S, dtype=int if tabular else float).reshape(shape),
            actions=np.array(A, dtype=int).reshape(n, H),
            rewards=np.array(R, dtype=float).reshape(n, H),
            next_states=np.array(SP, dtype=int if tabular else float).reshape(shape),
            terminal=np.array(T, dtype=bool).reshape(n, H),
            behavior_probs=np.array(PB, dtype=float).reshape(n, H),
        )


def _sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` by inverse-CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_trajectories(mdp: Mdp, pi, n: int, seed: int, behavior_probs=None) -> Dataset:
    """Roll out ``n`` episodes of ``pi`` from the initial state.

    ``pi`` may be a TabularPolicy or an ``EpisodeMixture``; for a mixture one
    component is drawn per episode and the recorded behavior probability is the
    one-step ratio of mixture trajectory likelihoods, so products over a
    trajectory equal the exact mixture likelihood.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    H, A = mdp.horizon, mdp.num_actions
    states = np.zeros((n, H), dtype=int)
    actions = np.zeros((n, H), dtype=int)
    rewards = np.zeros((n, H))
    nxt = np.zeros((n, H), dtype=int)
    pb = np.zeros((n, H))
    rows = np.arange(n)
    mixture = isinstance(pi, EpisodeMixture)
    if mixture:
        comp = rng.choice(len(pi.policies), size=n, p=pi.weights)
        loglik = np.tile(np.log(pi.weights), (n, 1))
    s = np.full(n, mdp.initial_state)
    for h in range(H):
        states[:, h] = s
        if mixture:
            all_p = np.stack([p.tables[h][s] for p in pi.policies], axis=1)  # (n, K, A)
            if np.isnan(all_p[rows, comp]).any():
                bad = s[np.isnan(all_p[rows, comp]).any(axis=1)][0]
                raise PolicyUndefinedError(h, int(bad))
            a = _sample_categorical(rng, all_p[rows, comp])
            step_p = np.nan_to_num(all_p[rows, :, a])  # (n, K)
            new_ll = loglik + np.log(np.where(step_p > 0, step_p, 1e-300))
            new_ll[step_p <= 0] = -np.inf
            pb[:, h] = np.exp(_logsumexp(new_ll) - _logsumexp(loglik))
            loglik = new_ll
        else:
            p = pi.tables[h][s]
            if np.isnan(p).any():
                raise PolicyUndefinedError(h, int(s[np.isnan(p).any(axis=1)][0]))
            a = _sample_categorical(rng, p)
            pb[:, h] = p[rows, a]
        actions[:, h] = a
        k = _sample_categorical(rng, mdp.reward_probs[h][s, a])
        rewards[:, h] = mdp.reward_values[h][s, a, k]
        if h < H - 1:
            s = _sample_categorical(rng, mdp.transition[h][s, a])
            nxt[:, h] = s
    terminal = np.zeros((n, H), dtype=bool)
    terminal[:, H - 1] = True
    return Dataset(states, actions, rewards, nxt, terminal, pb, meta={"seed": seed})


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=1)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return m_safe + np.log(np.sum(np.exp(x - m_safe[:, None]), axis=1))


@dataclass(frozen=True, eq=False)
class EpisodeMixture:
    """Behavior that draws one component policy per episode."""

    policies: tuple
    weights: np.ndarray

    def __init__(self, policies: Sequence[TabularPolicy], weights=None):
        K = len(policies)
        if K == 0:
            raise ValueError("mixture needs at least one policy")
        w = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, dtype=float)
        if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
            raise ValueError("mixture weights must be a distribution")
        object.__setattr__(self, "policies", tuple(policies))
        object.__setattr__(self, "weights", w)


def monte_carlo_value(mdp: Mdp, pi, n: int, seed: int) -> tuple[float, float]:
    """Mean return over ``n`` simulated episodes and its standard error."""
    G = sample_trajectories(mdp, pi, n, seed).returns
    return float(G.mean()), float(G.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0


def save_mdp(mdp: Mdp, path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict()))


def load_mdp(path) -> Mdp:
    return Mdp.from_dict(json.loads(Path(path).read_text()))
