"""Environment constructors: seeded random MDPs, gridworlds, the tree-shaped
hard instance pair, the reward-probe wrapper, sticky actions, and two
simulation-only continuous-state tasks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .mdp import Dataset, Mdp, TabularPolicy

GRID_MOVES = np.array([(0, -1), (1, 0), (0, 1), (-1, 0)])  # up, right, down, left as (dx, dy)
ENV_KINDS = ("gridworld", "tree_hard", "reward_probe", "sticky_wrapped", "continuous_control", "random")


def _point_rewards(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return values[..., None].astype(float), np.ones(values.shape + (1,))


def make_random_mdp(states_per_layer: int | Sequence[int], num_actions: int, horizon: int, seed: int,
                    reward_support: Sequence[float] = (0.0, 0.5, 1.0), sparsity: float = 0.0) -> Mdp:
    """Seeded random layered MDP with full-support (unless ``sparsity > 0``) kernels."""
    rng = np.random.default_rng(seed)
    if np.isscalar(states_per_layer):
        sizes = [1] + [int(states_per_layer)] * (horizon - 1)
    else:
        sizes = list(states_per_layer)
    A = num_actions
    P = []
    for h in range(horizon - 1):
        p = rng.dirichlet(np.ones(sizes[h + 1]), size=(sizes[h], A))
        if sparsity > 0:
            p = p * (rng.random(p.shape) >= sparsity)
            empty = p.sum(-1) == 0
            p[empty, 0] = 1.0
            p = p / p.sum(-1, keepdims=True)
        P.append(p)
    support = np.asarray(reward_support, dtype=float)
    vals, probs = [], []
    for h in range(horizon):
        vals.append(np.broadcast_to(support, (sizes[h], A, len(support))).copy())
        probs.append(rng.dirichlet(np.ones(len(support)), size=(sizes[h], A)))
    return Mdp(tuple(sizes), A, tuple(P), tuple(vals), tuple(probs), 0, float(support.max()),
               meta={"kind": "random", "seed": seed})


def random_policy(mdp: Mdp, seed: int, deterministic: bool = False) -> TabularPolicy:
    rng = np.random.default_rng(seed)
    A = mdp.num_actions
    if deterministic:
        return TabularPolicy([np.eye(A)[rng.integers(A, size=S)] for S in mdp.num_states])
    return TabularPolicy([rng.dirichlet(np.ones(A), size=S) for S in mdp.num_states])


# ---------------------------------------------------------------------------
# Gridworld
# ---------------------------------------------------------------------------


def default_reward_layout(width: int, height: int) -> np.ndarray:
    """Goal worth 1 in the far corner and a 0.3 distractor next to the start."""
    layout = np.zeros((height, width))
    layout[height - 1, width - 1] = 1.0
    if width > 2:
        layout[0, 2] = 0.3
    return layout


def gridworld_features(width: int, height: int) -> dict[str, np.ndarray]:
    xs, ys = np.meshgrid(np.arange(width), np.arange(height))
    x = xs.reshape(-1) / max(width - 1, 1)
    y = ys.reshape(-1) / max(height - 1, 1)
    coarse = np.stack([np.ones_like(x), x, y], axis=1)
    centers = [(cx, cy) for cy in (0.0, 0.5, 1.0) for cx in (0.0, 0.5, 1.0)]
    rbf = np.stack([np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * 0.25 ** 2)) for cx, cy in centers], axis=1)
    return {"coarse": coarse, "fine": np.concatenate([coarse, rbf], axis=1)}


def make_gridworld(width: int, height: int, H: int, slip_prob: float = 0.0, reward_layout=None,
                   seed: int = 0, start=(0, 0), r_max: float = 1.0) -> Mdp:
    """Layered gridworld with four moves; off-grid moves leave the agent in place.

    With probability ``slip_prob`` the executed move is drawn uniformly from
    the four moves instead. The reward of a step is the layout value of the
    current cell (a point mass). ``seed`` is recorded for provenance; the
    construction itself is deterministic.
    """
    if not 0.0 <= slip_prob < 1.0:
        raise ValueError("slip_prob must lie in [0, 1)")
    layout = default_reward_layout(width, height) if reward_layout is None else np.asarray(reward_layout, float)
    if layout.shape != (height, width):
        raise ValueError(f"reward_layout must have shape {(height, width)}")
    if layout.min() < 0 or layout.max() > r_max:
        raise ValueError("reward_layout values must lie in [0, r_max]")
    S, A = width * height, 4
    move = np.zeros((S, A, S))
    for cell in range(S):
        cx, cy = cell % width, cell // width
        for a, (dx, dy) in enumerate(GRID_MOVES):
            nx, ny = cx + dx, cy + dy
            if not (0 <= nx < width and 0 <= ny < height):
                nx, ny = cx, cy
            move[cell, a, ny * width + nx] = 1.0
    P = (1 - slip_prob) * move + slip_prob * move.mean(axis=1, keepdims=True)
    r = np.broadcast_to(layout.reshape(-1)[:, None], (S, A))
    vals, probs = _point_rewards(r)
    s0 = start[1] * width + start[0]
    meta: dict[str, Any] = {"kind": "gridworld", "width": width, "height": height, "slip_prob": slip_prob,
                            "seed": seed}
    rewarding = np.argwhere(layout > 0)
    if rewarding.size:
        dist = np.abs(rewarding[:, 1] - start[0]) + np.abs(rewarding[:, 0] - start[1])
        goal = np.argmax(layout[rewarding[:, 0], rewarding[:, 1]])
        if dist[goal] > H - 1:
            meta["warning"] = "goal unreachable within horizon"
    feats = gridworld_features(width, height)
    return Mdp(tuple([S] * H), A, tuple([P] * (H - 1)), tuple([vals] * H), tuple([probs] * H), s0, r_max,
               features={k: [v] * H for k, v in feats.items()}, meta=meta)


# ---------------------------------------------------------------------------
# Tree-shaped hard instance
# ---------------------------------------------------------------------------


def make_tree_hard(A: int, H: int, eps: float, behavior: TabularPolicy | None = None) -> tuple[Mdp, Mdp]:
    """Pair of chain MDPs that agree everywhere except the final reward mean.

    Layer ``h`` holds the on-path state (index 0) and an absorbing zero-reward
    state (index 1). At the on-path state, the action the behavior policy is
    least likely to take continues along the path; every other action falls
    into the absorbing state. Only the last on-path state-action pair pays a
    Bernoulli reward, with mean 1/2 in the first MDP and 1/2 - 2*eps in the
    second.
    """
    if A < 2:
        raise ValueError("need at least two actions")
    # 1/2 - 2 eps must stay a valid Bernoulli mean, which is tighter than sqrt(1/8)
    if not 0 < eps <= min(math.sqrt(1 / 8), 0.25):
        raise ValueError("eps must lie in (0, 1/4]")
    path = []
    for h in range(H):
        probs = np.full(A, 1.0 / A) if behavior is None else np.asarray(behavior.tables[h][0])
        path.append(int(np.argmin(probs)))
    P = []
    for h in range(H - 1):
        p = np.zeros((2, A, 2))
        p[0, :, 1] = 1.0
        p[0, path[h], :] = [1.0, 0.0]
        p[1, :, 1] = 1.0
        P.append(p)
    out = []
    for mean in (0.5, 0.5 - 2 * eps):
        vals, probs = [], []
        for h in range(H):
            v = np.zeros((2, A, 2))
            v[..., 1] = 1.0
            pr = np.zeros((2, A, 2))
            pr[..., 0] = 1.0
            if h == H - 1:
                pr[0, path[h]] = [1 - mean, mean]
            vals.append(v)
            probs.append(pr)
        meta = {"kind": "tree_hard", "A": A, "H": H, "eps": eps, "path": path, "terminal_mean": mean}
        out.append(Mdp(tuple([2] * H), A, tuple(P), tuple(vals), tuple(probs), 0, 1.0, meta=meta))
    return out[0], out[1]


def on_path_policy(mdp: Mdp) -> TabularPolicy:
    """Target policy that follows the continuing action at every layer."""
    path = mdp.meta["path"]
    A = mdp.num_actions
    return TabularPolicy([np.eye(A)[[a, a]] for a in path])


def off_path_policy(mdp: Mdp, layer: int = 0) -> TabularPolicy:
    """Follows the path except at ``layer``, where it takes the next action id."""
    path = list(mdp.meta["path"])
    A = mdp.num_actions
    path[layer] = (path[layer] + 1) % A
    return TabularPolicy([np.eye(A)[[a, a]] for a in path])


# ---------------------------------------------------------------------------
# Reward probe
# ---------------------------------------------------------------------------


def make_reward_probe(mdp: Mdp, r: float) -> Mdp:
    """Prepend a start state offering a fixed reward ``r`` or entry into ``mdp``.

    Action 0 at the new start pays ``r`` and moves to a zero-reward absorbing
    state; every other action pays 0 and moves to the original initial state.
    Each original layer gains one absorbing state (the last index).
    """
    if not 0.0 <= r <= mdp.v_max:
        raise ValueError(f"probe reward must lie in [0, {mdp.v_max}]")
    H, A0 = mdp.horizon, mdp.num_actions
    A = max(A0, 2)
    pad_a = list(range(A0)) + [0] * (A - A0)
    sizes = (1,) + tuple(S + 1 for S in mdp.num_states)
    P = []
    p0 = np.zeros((1, A, sizes[1]))
    p0[0, 0, sizes[1] - 1] = 1.0
    p0[0, 1:, mdp.initial_state] = 1.0
    P.append(p0)
    for h in range(H - 1):
        S, Sn = mdp.num_states[h], mdp.num_states[h + 1]
        p = np.zeros((S + 1, A, Sn + 1))
        p[:S, :, :Sn] = mdp.transition[h][:, pad_a]
        p[S, :, Sn] = 1.0
        P.append(p)
    v0 = np.zeros((1, A, 1))
    v0[0, 0, 0] = r
    vals, probs = [v0], [np.ones((1, A, 1))]
    for h in range(H):
        S = mdp.num_states[h]
        K = mdp.reward_values[h].shape[-1]
        v = np.zeros((S + 1, A, K))
        pr = np.zeros((S + 1, A, K))
        v[:S] = mdp.reward_values[h][:, pad_a]
        pr[:S] = mdp.reward_probs[h][:, pad_a]
        pr[S, :, 0] = 1.0
        vals.append(v)
        probs.append(pr)
    feats = {}
    for name, layers in mdp.features.items():
        d = layers[0].shape[1]
        feats[name] = [np.zeros((1, d))] + [np.vstack([f, np.zeros((1, d))]) for f in layers]
    meta = {"kind": "reward_probe", "r": r, "base_v_max": mdp.v_max, "base_meta": mdp.meta}
    return Mdp(sizes, A, tuple(P), tuple(vals), tuple(probs), 0, max(mdp.r_max, r), features=feats, meta=meta)


def probe_policies(probe: Mdp, target: TabularPolicy) -> tuple[TabularPolicy, TabularPolicy]:
    """``(pi_1, pi_2)``: take the fixed reward, or enter and follow ``target``."""
    A = probe.num_actions
    A0 = target.tables[0].shape[1]
    first = [np.eye(A)[[0]]]
    second = [np.eye(A)[[1]]]
    for h, t in enumerate(target.tables):
        S = probe.num_states[h + 1]
        body = np.full((S, A), 1.0 / A)
        body[: S - 1] = 0.0
        body[: S - 1, :A0] = t
        first.append(np.full((S, A), 1.0 / A))
        second.append(body)
    return TabularPolicy(first), TabularPolicy(second)


def tree_hard_ops_pair(mdp: Mdp) -> list[TabularPolicy]:
    """Two-candidate selection problem on a tree-hard MDP: ``[off path, on path]``.

    In the first MDP the on-path policy is worth 1/2 and the other 0; ties
    in a selector therefore favour the wrong candidate.
    """
    return [off_path_policy(mdp, 0), on_path_policy(mdp)]


def lift_to_probe(probe: Mdp, pi: TabularPolicy, first=None) -> TabularPolicy:
    """Extend a base-MDP policy to the probe MDP (``first`` = start distribution)."""
    A = probe.num_actions
    start = np.full((1, A), 1.0 / A) if first is None else np.asarray(first, float).reshape(1, A)
    tables = [start]
    for h, t in enumerate(pi.tables):
        S = probe.num_states[h + 1]
        body = np.full((S, A), 1.0 / A)
        body[: S - 1] = 0.0
        body[: S - 1, : t.shape[1]] = t
        tables.append(body)
    return TabularPolicy(tables)


# ---------------------------------------------------------------------------
# Sticky actions
# ---------------------------------------------------------------------------


def sticky_wrap(mdp: Mdp, repeat_prob: float = 0.25, max_repeats: int = 4, prune: bool = True) -> Mdp:
    """Fold sticky actions into the state: ``(s, last_action, forced_repeat_count)``.

    Whenever a previous action exists and fewer than ``max_repeats`` forced
    repeats have happened in a row, the previous action is executed instead of
    the chosen one with probability ``repeat_prob``. Rewards are sampled
    independently of that draw, which is exact whenever rewards do not depend
    on the action (as in the gridworld).
    """
    if not 0.0 <= repeat_prob < 1.0:
        raise ValueError("repeat_prob must lie in [0, 1)")
    if max_repeats < 1:
        raise ValueError("max_repeats must be >= 1")
    H, A, m = mdp.horizon, mdp.num_actions, max_repeats
    L, C = A + 1, m + 1  # last action (A = none), count

    def aug_index(s, last, c):
        return (s * L + last) * C + c

    base_state = [np.repeat(np.arange(S), L * C) for S in mdp.num_states]
    last_of = np.tile(np.repeat(np.arange(L), C), 1)
    count_of = np.tile(np.arange(C), L)
    sizes = [S * L * C for S in mdp.num_states]
    P = []
    for h in range(H - 1):
        S, Sn = mdp.num_states[h], mdp.num_states[h + 1]
        p = np.zeros((sizes[h], A, sizes[h + 1]))
        for s in range(S):
            for last in range(L):
                for c in range(C):
                    i = aug_index(s, last, c)
                    forced = repeat_prob if (last < A and c < m) else 0.0
                    for a in range(A):
                        for sp in np.nonzero(mdp.transition[h][s, a])[0]:
                            p[i, a, aug_index(sp, a, 0)] += (1 - forced) * mdp.transition[h][s, a, sp]
                        if forced > 0:
                            for sp in np.nonzero(mdp.transition[h][s, last])[0]:
                                p[i, a, aug_index(sp, last, c + 1)] += forced * mdp.transition[h][s, last, sp]
        P.append(p)
    vals, probs = [], []
    for h in range(H):
        S = mdp.num_states[h]
        K = mdp.reward_values[h].shape[-1]
        v = np.zeros((sizes[h], A, 2 * K))
        pr = np.zeros((sizes[h], A, 2 * K))
        for i in range(sizes[h]):
            s, last, c = i // (L * C), (i // C) % L, i % C
            forced = repeat_prob if (last < A and c < m) else 0.0
            v[i, :, :K] = mdp.reward_values[h][s]
            pr[i, :, :K] = (1 - forced) * mdp.reward_probs[h][s]
            if last < A:
                v[i, :, K:] = mdp.reward_values[h][s, last]
                pr[i, :, K:] = forced * mdp.reward_probs[h][s, last]
            else:
                pr[i, :, K:] = 0.0
        vals.append(v)
        probs.append(pr)
    feats = {name: [f[base_state[h]] for h, f in enumerate(layers)] for name, layers in mdp.features.items()}
    meta = {"kind": "sticky_wrapped", "repeat_prob": repeat_prob, "max_repeats": max_repeats,
            "base_meta": mdp.meta, "base_state": [b.tolist() for b in base_state],
            "last_action": [np.tile(last_of, S).tolist() for S in mdp.num_states],
            "repeat_count": [np.tile(count_of, S).tolist() for S in mdp.num_states]}
    wrapped = Mdp(tuple(sizes), A, tuple(P), tuple(vals), tuple(probs),
                  aug_index(mdp.initial_state, A, 0), mdp.r_max, features=feats, meta=meta)
    return prune_unreachable(wrapped) if prune else wrapped


def prune_unreachable(mdp: Mdp) -> Mdp:
    """Drop states no action sequence can reach; per-state meta lists are reindexed."""
    H = mdp.horizon
    keep = [np.array([mdp.initial_state])]
    for h in range(H - 1):
        reach = mdp.transition[h][keep[h]].sum(axis=(0, 1)) > 0
        keep.append(np.nonzero(reach)[0])
    P = [mdp.transition[h][np.ix_(keep[h], np.arange(mdp.num_actions), keep[h + 1])] for h in range(H - 1)]
    vals = [mdp.reward_values[h][keep[h]] for h in range(H)]
    probs = [mdp.reward_probs[h][keep[h]] for h in range(H)]
    feats = {k: [f[keep[h]] for h, f in enumerate(v)] for k, v in mdp.features.items()}
    meta = dict(mdp.meta)
    for key in ("base_state", "last_action", "repeat_count"):
        if key in meta:
            meta[key] = [np.asarray(meta[key][h])[keep[h]].tolist() for h in range(H)]
    return Mdp(tuple(len(k) for k in keep), mdp.num_actions, tuple(P), tuple(vals), tuple(probs), 0,
               mdp.r_max, features=feats, meta=meta)


def lift_policy(wrapped: Mdp, base_pi: TabularPolicy) -> TabularPolicy:
    """Base-MDP policy acting on a sticky-wrapped MDP (ignores the augmentation)."""
    bs = wrapped.meta["base_state"]
    return TabularPolicy([base_pi.tables[h][np.asarray(bs[h], dtype=int)] for h in range(wrapped.horizon)])


# ---------------------------------------------------------------------------
# Continuous-state simulators
# ---------------------------------------------------------------------------


def _cartpole_step(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    gravity, masscart, masspole, length, force_mag, tau = 9.8, 1.0, 0.1, 0.5, 10.0, 0.02
    total = masscart + masspole
    pml = masspole * length
    pos, vel, th, thd = x.T
    force = np.where(a == 1, force_mag, -force_mag)
    cos, sin = np.cos(th), np.sin(th)
    temp = (force + pml * thd ** 2 * sin) / total
    thacc = (gravity * sin - cos * temp) / (length * (4.0 / 3.0 - masspole * cos ** 2 / total))
    xacc = temp - pml * thacc * cos / total
    return np.stack([pos + tau * vel, vel + tau * xacc, th + tau * thd, thd + tau * thacc], axis=1)


def _cartpole_alive(x: np.ndarray) -> np.ndarray:
    return (np.abs(x[:, 0]) <= 2.4) & (np.abs(x[:, 2]) <= 12 * math.pi / 180)


def _acrobot_deriv(s: np.ndarray, torque: np.ndarray) -> np.ndarray:
    m1 = m2 = l1 = 1.0
    lc1 = lc2 = 0.5
    I1 = I2 = 1.0
    g = 9.8
    t1, t2, d1, d2 = s.T
    dd1 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * np.cos(t2)) + I1 + I2
    dd2 = m2 * (lc2 ** 2 + l1 * lc2 * np.cos(t2)) + I2
    phi2 = m2 * lc2 * g * np.cos(t1 + t2 - math.pi / 2)
    phi1 = (-m2 * l1 * lc2 * d2 ** 2 * np.sin(t2) - 2 * m2 * l1 * lc2 * d2 * d1 * np.sin(t2)
            + (m1 * lc1 + m2 * l1) * g * np.cos(t1 - math.pi / 2) + phi2)
    ddt2 = (torque + dd2 / dd1 * phi1 - m2 * l1 * lc2 * d1 ** 2 * np.sin(t2) - phi2) / (
        m2 * lc2 ** 2 + I2 - dd2 ** 2 / dd1)
    ddt1 = -(dd2 * ddt2 + phi1) / dd1
    return np.stack([d1, d2, ddt1, ddt2], axis=1)


def _acrobot_step(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    torque = a.astype(float) - 1.0
    dt = 0.2
    k1 = _acrobot_deriv(x, torque)
    k2 = _acrobot_deriv(x + dt / 2 * k1, torque)
    k3 = _acrobot_deriv(x + dt / 2 * k2, torque)
    k4 = _acrobot_deriv(x + dt * k3, torque)
    y = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    y[:, 0] = (y[:, 0] + math.pi) % (2 * math.pi) - math.pi
    y[:, 1] = (y[:, 1] + math.pi) % (2 * math.pi) - math.pi
    y[:, 2] = np.clip(y[:, 2], -4 * math.pi, 4 * math.pi)
    y[:, 3] = np.clip(y[:, 3], -9 * math.pi, 9 * math.pi)
    return y


def _acrobot_obs(x: np.ndarray) -> np.ndarray:
    return np.stack([np.cos(x[:, 0]), np.sin(x[:, 0]), np.cos(x[:, 1]), np.sin(x[:, 1]), x[:, 2], x[:, 3]], axis=1)


@dataclass
class ContinuousTask:
    """Vectorised dynamics shared by SimOnlyEnv and the batch roll-out helper."""

    kind: str
    horizon: int
    num_actions: int
    obs_dim: int
    r_max: float = 1.0

    def initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(-0.05 if self.kind == "cartpole_like" else -0.1,
                           0.05 if self.kind == "cartpole_like" else 0.1, size=(n, 4))

    def observe(self, x: np.ndarray) -> np.ndarray:
        return x.copy() if self.kind == "cartpole_like" else _acrobot_obs(x)

    def step(self, x: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns ``(next_state, reward in {0, 1}, done)`` for a batch."""
        if self.kind == "cartpole_like":
            y = _cartpole_step(x, a)
            alive = _cartpole_alive(y)
            return y, alive.astype(float), ~alive
        y = _acrobot_step(x, a)
        height = -np.cos(y[:, 0]) - np.cos(y[:, 1] + y[:, 0])
        return y, (height > 1.0).astype(float), np.zeros(len(y), dtype=bool)


class SimOnlyEnv:
    """Single-episode simulator with reset/step; no transition model exposed."""

    def __init__(self, task: ContinuousTask, seed: int = 0, repeat_prob: float = 0.0, max_repeats: int = 4):
        self.task = task
        self.horizon = task.horizon
        self.num_actions = task.num_actions
        self.r_max = task.r_max
        self.repeat_prob = repeat_prob
        self.max_repeats = max_repeats
        self._rng = np.random.default_rng(seed)
        self._x = None
        self._t = 0
        self._last = None
        self._repeats = 0

    def reset(self) -> np.ndarray:
        self._x = self.task.initial(self._rng, 1)
        self._t = 0
        self._last = None
        self._repeats = 0
        return self.task.observe(self._x)[0]

    def step(self, action: int) -> tuple[float, np.ndarray, bool]:
        if self._x is None:
            raise RuntimeError("call reset() first")
        if self._t >= self.horizon:
            raise RuntimeError("episode already finished")
        executed = action
        if self._last is not None and self._repeats < self.max_repeats and self.repeat_prob > 0:
            if self._rng.random() < self.repeat_prob:
                executed = self._last
                self._repeats += 1
            else:
                self._repeats = 0
        self._last = executed
        self._x, r, done = self.task.step(self._x, np.array([executed]))
        self._t += 1
        done = bool(done[0]) or self._t >= self.horizon
        return float(r[0]), self.task.observe(self._x)[0], done


def make_continuous_control(kind: str, H: int, seed: int = 0, repeat_prob: float = 0.0,
                            max_repeats: int = 4) -> SimOnlyEnv:
    if H > 500:
        raise ValueError("H must be <= 500")
    if kind == "cartpole_like":
        task = ContinuousTask(kind, H, 2, 4)
    elif kind == "acrobot_like":
        task = ContinuousTask(kind, H, 3, 6)
    else:
        raise ValueError(f"unknown continuous task {kind!r}")
    return SimOnlyEnv(task, seed, repeat_prob, max_repeats)


class UniformPolicy:
    """Uniform action distribution over any observation batch."""

    def __init__(self, num_actions: int):
        self.num_actions = num_actions

    def probs(self, h: int, s) -> np.ndarray:
        return np.full((len(s), self.num_actions), 1.0 / self.num_actions)


def rollout(env: SimOnlyEnv, pi, n: int, seed: int) -> Dataset:
    """Batch roll-outs of ``pi`` (any object with ``probs(h, obs_batch)``).

    Episodes that end early are padded with zero-reward steps in the final
    observation, flagged terminal, so every trajectory has length ``H``.
    """
    task = env.task
    rng = np.random.default_rng(seed)
    H, A = task.horizon, task.num_actions
    x = task.initial(rng, n)
    obs = task.observe(x)
    d = obs.shape[1]
    S = np.zeros((n, H, d))
    SP = np.zeros((n, H, d))
    acts = np.zeros((n, H), dtype=int)
    R = np.zeros((n, H))
    T = np.zeros((n, H), dtype=bool)
    PB = np.zeros((n, H))
    done = np.zeros(n, dtype=bool)
    last = np.full(n, -1)
    repeats = np.zeros(n, dtype=int)
    rows = np.arange(n)
    for h in range(H):
        S[:, h] = obs
        p = np.asarray(pi.probs(h, obs))
        cdf = np.cumsum(p, axis=1)
        a = np.minimum((rng.random(n)[:, None] * cdf[:, -1:] >= cdf).sum(1), A - 1)
        PB[:, h] = p[rows, a]
        acts[:, h] = a
        executed = a.copy()
        if env.repeat_prob > 0:
            can = (last >= 0) & (repeats < env.max_repeats)
            forced = can & (rng.random(n) < env.repeat_prob)
            executed = np.where(forced, last, a)
            repeats = np.where(forced, repeats + 1, 0)
        last = executed
        y, r, ended = task.step(x, executed)
        r = np.where(done, 0.0, r)
        x = np.where(done[:, None], x, y)
        done = done | ended
        obs = task.observe(x)
        R[:, h] = r
        SP[:, h] = obs
        T[:, h] = done | (h == H - 1)
    return Dataset(S, acts, R, SP, T, PB, meta={"seed": seed, "env": task.kind})


def monte_carlo_env_value(env: SimOnlyEnv, pi, n: int, seed: int) -> tuple[float, float]:
    G = rollout(env, pi, n, seed).returns
    return float(G.mean()), float(G.std(ddof=1) / math.sqrt(n))


# ---------------------------------------------------------------------------
# EnvSpec
# ---------------------------------------------------------------------------

_PARAMS = {
    "gridworld": {"width", "height", "H", "slip_prob", "reward_layout", "start", "sticky", "repeat_prob",
                  "max_repeats"},
    "tree_hard": {"A", "H", "eps", "which"},
    "random": {"states_per_layer", "A", "H", "reward_support"},
    "sticky_wrapped": {"base", "repeat_prob", "max_repeats"},
    "reward_probe": {"base", "r"},
    "continuous_control": {"task", "H", "repeat_prob", "max_repeats"},
}


@dataclass
class EnvSpec:
    kind: str
    parameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _PARAMS:
            raise ValueError(f"unknown env kind {self.kind!r}; expected one of {sorted(_PARAMS)}")
        unknown = set(self.parameters) - _PARAMS[self.kind]
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")

    def build(self):
        """Construct the environment (an Mdp, or a SimOnlyEnv for continuous tasks)."""
        p = dict(self.parameters)
        if self.kind == "gridworld":
            mdp = make_gridworld(p.get("width", 4), p.get("height", 4), p.get("H", 8), p.get("slip_prob", 0.1),
                                 p.get("reward_layout"), self.seed, tuple(p.get("start", (0, 0))))
            if p.get("sticky"):
                mdp = sticky_wrap(mdp, p.get("repeat_prob", 0.25), p.get("max_repeats", 4))
            return mdp
        if self.kind == "tree_hard":
            pair = make_tree_hard(p.get("A", 2), p.get("H", 3), p.get("eps", 0.25))
            return pair[p.get("which", 0)]
        if self.kind == "random":
            return make_random_mdp(p.get("states_per_layer", 3), p.get("A", 2), p.get("H", 3), self.seed,
                                   p.get("reward_support", (0.0, 0.5, 1.0)))
        if self.kind == "sticky_wrapped":
            base = EnvSpec(**p["base"]).build()
            return sticky_wrap(base, p.get("repeat_prob", 0.25), p.get("max_repeats", 4))
        if self.kind == "reward_probe":
            base = EnvSpec(**p["base"]).build()
            return make_reward_probe(base, p.get("r", 0.0))
        return make_continuous_control(p.get("task", "cartpole_like"), p.get("H", 100), self.seed,
                                       p.get("repeat_prob", 0.0), p.get("max_repeats", 4))
