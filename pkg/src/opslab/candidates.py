"""Candidate (policy, Q) generation by conservative fitted Q-iteration over a
hyperparameter grid, behavior-policy constructors, and OPS dataset builders.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .funcs import FittedFunction, FunctionClass, MdpFeaturizer, fit_tabular, grouped_gram, mlp_backward, \
    mlp_forward, mlp_init
from .mdp import (Dataset, EpisodeMixture, Mdp, TabularPolicy, TabularQ, greedy, optimal_q,
                  sample_trajectories)

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
LR_SCALE = 1000.0
INNER_STEPS = 5
NEWTON_STEPS = 50
ANCHOR = 1.0

DEFAULT_GRID = {
    "learning_rate": [0.001, 0.0003, 0.0001],
    "class_size": [128, 256, 512],
    "alpha": [1.0, 0.1, 0.01, 0.001, 0.0],
    "iterations": [100, 200],
}
# Desk-scale stand-ins for the hidden-layer sizes of the grid.
TABULAR_SIZE_MAP = {128: FunctionClass("tabular"),
                    256: FunctionClass("linear", features="coarse"),
                    512: FunctionClass("linear", features="fine")}


def class_for_size(size: int, tabular_env: bool = True) -> FunctionClass:
    if tabular_env:
        return TABULAR_SIZE_MAP[size]
    return FunctionClass("mlp", hidden_width=size)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    fclass: FunctionClass = field(default_factory=FunctionClass)
    alpha: float = 0.0
    iterations: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    @property
    def mix_rate(self) -> float:
        """Fraction of each fitted iterate blended into the current table."""
        return min(1.0, self.learning_rate * LR_SCALE)


class GreedyPolicy:
    """Epsilon-greedy policy over any Q function with ``values(h, s)``."""

    def __init__(self, q, num_actions: int, eps: float = 0.0):
        self.q = q
        self.num_actions = num_actions
        self.eps = eps

    def probs(self, h: int, s) -> np.ndarray:
        v = np.asarray(self.q.values(h, s))
        out = np.eye(self.num_actions)[np.argmax(v, axis=1)]
        return (1 - self.eps) * out + self.eps / self.num_actions


class ParametricQ:
    """Q function backed by a fitted MLP over an observation featurizer."""

    kind = "mlp"

    def __init__(self, net: dict, featurizer, cls: FunctionClass, scale: float = 1.0):
        self.net = net
        self.featurizer = featurizer
        self.cls = cls
        self.scale = scale

    def values(self, h: int, s) -> np.ndarray:
        m = len(s)
        A = self.featurizer.num_actions
        out = np.empty((m, A))
        for a in range(A):
            X = self.featurizer.encode(self.cls, np.full(m, h), s, np.full(m, a))
            out[:, a] = mlp_forward(self.net, X) * self.scale
        return out

    def to_json(self) -> dict:
        return {"kind": "mlp", "class": asdict(self.cls), "scale": self.scale,
                "net": {k: np.asarray(v).tolist() for k, v in self.net.items()},
                "num_actions": self.featurizer.num_actions, "horizon": self.featurizer.horizon}


@dataclass
class CandidateEntry:
    policy: object
    q: object
    hyperparams: dict
    train_seed: int
    flags: dict = field(default_factory=dict)


@dataclass
class CandidateSet:
    entries: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.entries:
            raise ValueError("candidate set is empty")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def policies(self) -> list:
        return [e.policy for e in self.entries]

    @property
    def qs(self) -> list:
        return [e.q for e in self.entries]

    def subset(self, idx: Sequence[int]) -> "CandidateSet":
        return CandidateSet([self.entries[i] for i in idx], dict(self.provenance))

    def to_json(self) -> dict:
        rows = []
        for e in self.entries:
            q = {"kind": "tabular", "tables": e.q.to_list()} if isinstance(e.q, TabularQ) else e.q.to_json()
            pol = e.policy.to_list() if isinstance(e.policy, TabularPolicy) else None
            rows.append({"policy": pol, "q": q, "hyperparams": e.hyperparams, "train_seed": e.train_seed,
                         "flags": e.flags})
        return {"provenance": self.provenance, "entries": rows}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, d: dict) -> "CandidateSet":
        from .funcs import ObsFeaturizer
        entries = []
        for row in d["entries"]:
            qd = row["q"]
            if qd["kind"] == "tabular":
                q = TabularQ.from_list(qd["tables"])
                pol = TabularPolicy.from_list(row["policy"]) if row.get("policy") is not None else greedy(q)
            else:
                feat = ObsFeaturizer(qd["num_actions"], qd["horizon"])
                net = {k: np.asarray(v, dtype=float) for k, v in qd["net"].items()}
                q = ParametricQ(net, feat, FunctionClass(**qd["class"]), qd["scale"])
                pol = GreedyPolicy(q, qd["num_actions"])
            entries.append(CandidateEntry(pol, q, row["hyperparams"], row["train_seed"], row.get("flags", {})))
        return cls(entries, d.get("provenance", {}))

    @classmethod
    def load(cls, path) -> "CandidateSet":
        return cls.from_json(json.loads(Path(path).read_text()))


def from_q_functions(qs: Sequence[TabularQ], labels: Sequence[str] | None = None) -> CandidateSet:
    """Wrap tabular Q functions with their greedy policies."""
    labels = labels or [f"q{i}" for i in range(len(qs))]
    return CandidateSet([CandidateEntry(greedy(q), q, {"label": lab}, 0) for q, lab in zip(qs, labels)])


# ---------------------------------------------------------------------------
# Conservative fitted Q-iteration
# ---------------------------------------------------------------------------


def _lse_softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class DivergenceError(RuntimeError):
    pass


def _penalised_cells(y_bar, n_sa, n_s, alpha, anchor_w, newton_steps=NEWTON_STEPS):
    """Per-state minimiser of
    ``sum_a n_sa (q_a - y_a)^2 + alpha (n_s lse(q) - sum_a n_sa q_a) + sum_a w_a q_a^2``.

    ``w_a`` anchors actions without data at zero; damped Newton on each state.
    """
    m, A = y_bar.shape
    curv = 2 * n_sa + 2 * anchor_w

    def objective(q):
        z = q.max(axis=1, keepdims=True)
        lse = z[:, 0] + np.log(np.exp(q - z).sum(axis=1))
        return (np.sum(n_sa * (q - y_bar) ** 2 + anchor_w * q ** 2, axis=1)
                + alpha * (n_s[:, 0] * lse - np.sum(n_sa * q, axis=1)))

    q = np.where(n_sa > 0, y_bar, 0.0)
    f = objective(q)
    eye = np.eye(A)
    for _ in range(newton_steps):
        p = _lse_softmax(q)
        grad = curv * q - 2 * n_sa * y_bar + alpha * (n_s * p - n_sa)
        hess = curv[:, :, None] * eye + alpha * n_s[:, :, None] * (p[:, :, None] * eye - p[:, :, None] * p[:, None, :])
        step = np.linalg.solve(hess, grad[:, :, None])[:, :, 0]
        t = np.ones(m)
        for _ in range(30):
            cand = q - t[:, None] * step
            fc = objective(cand)
            worse = fc > f + 1e-12 * np.abs(f)
            if not worse.any():
                break
            t = np.where(worse, t / 2, t)
        q, f = cand, np.minimum(fc, f)
        if np.max(np.abs(t[:, None] * step)) < 1e-10:
            break
    return q


def _train_tabular(mdp: Mdp, data: Dataset, cfg: TrainConfig, v_max: float):
    feat = MdpFeaturizer(mdp)
    A = mdp.num_actions
    tr = data.transitions()
    cells = feat.encode(cfg.fclass, tr.h, tr.s, tr.a)
    state_base = feat.cell_offset[tr.h] + tr.s * A  # first cell of each logged state
    h_next = np.minimum(tr.h + 1, mdp.horizon - 1)
    next_base = feat.cell_offset[h_next] + tr.sp * A
    live = ~tr.terminal
    counts = np.bincount(cells, minlength=feat.num_cells).astype(float)
    seen = counts > 0
    uniq_states, state_idx = np.unique(state_base, return_inverse=True)
    cols = np.arange(A)
    state_cells = uniq_states[:, None] + cols
    n_sa = counts[state_cells]
    n_s = np.bincount(state_idx).astype(float)[:, None]
    anchor_w = np.where(n_sa > 0, 0.0, ANCHOR * n_s / A)
    q = np.zeros(feat.num_cells)
    eta = cfg.mix_rate
    for it in range(cfg.iterations):
        y = tr.r.astype(float).copy()
        y[live] += q[next_base[live, None] + cols].max(axis=1)
        fit = q.copy()
        fit[seen] = fit_tabular(cells, y, feat.num_cells)[seen]
        if cfg.alpha > 0:
            fit[state_cells] = _penalised_cells(fit[state_cells] * (n_sa > 0), n_sa, n_s, cfg.alpha, anchor_w)
        q = q + eta * (fit - q)
        if np.max(np.abs(q)) > DIVERGENCE_FACTOR * v_max:
            raise DivergenceError(f"|q| exceeded {DIVERGENCE_FACTOR} * V_max at iteration {it}")
    tables = [q[feat.cell_offset[h]: feat.cell_offset[h] + S * A].reshape(S, A)
              for h, S in enumerate(mdp.num_states)]
    return TabularQ(tables)


def _train_linear(mdp: Mdp, data: Dataset, cfg: TrainConfig, v_max: float):
    feat = MdpFeaturizer(mdp)
    A, H = mdp.num_actions, mdp.horizon
    tr = data.transitions()
    N = len(tr)
    groups, X = feat.encode(cfg.fclass, tr.h, tr.s, tr.a)
    d = X.shape[1]
    n_groups = H * A
    live = ~tr.terminal
    h_next = np.minimum(tr.h + 1, H - 1)
    Xn = feat.state_features(cfg.fclass.features, h_next, tr.sp)
    G = grouped_gram(groups, X, n_groups)
    seen = np.bincount(groups, minlength=n_groups) > 0
    eye = np.eye(d)
    ridge = np.array([1e-8 * max(np.trace(G[g]) / d, 1e-12) for g in range(n_groups)])
    G_inv = np.stack([np.linalg.inv(G[g] + ridge[g] * eye) for g in range(n_groups)])
    F_layer = np.stack([G[h * A:(h + 1) * A].sum(axis=0) for h in range(H)])
    # groups without data are anchored at zero, as unseen cells are in the tabular solver
    anchor = np.where(seen, 0.0, ANCHOR / A)
    # pseudo-inverse keeps majorise-minimise steps inside the span of the logged features
    curv_inv = np.stack([np.linalg.pinv(2 * G[g] + (cfg.alpha / 2 + 2 * anchor[g]) * F_layer[g // A],
                                        rcond=1e-10, hermitian=True)
                         for g in range(n_groups)]) if cfg.alpha > 0 else None
    W = np.zeros((n_groups, d))
    eta = cfg.mix_rate
    all_groups = tr.h[:, None] * A + np.arange(A)  # (N, A)
    next_groups = h_next[:, None] * A + np.arange(A)
    for it in range(cfg.iterations):
        qn = np.einsum("nd,nad->na", Xn, W[next_groups])
        y = tr.r + np.where(live, qn.max(axis=1), 0.0)
        b = np.stack([np.bincount(groups, weights=X[:, i] * y, minlength=n_groups) for i in range(d)], axis=1)
        fit = W.copy()
        fit[seen] = np.einsum("gij,gj->gi", G_inv, b)[seen]
        if cfg.alpha > 0:
            onehot = np.eye(A)[tr.a]
            for _ in range(INNER_STEPS):
                pred_all = np.einsum("nd,nad->na", X, fit[all_groups])
                p = _lse_softmax(pred_all)
                resid = np.einsum("nd,nd->n", X, fit[groups]) - y
                coef = cfg.alpha * (p - onehot)  # (N, A) penalty derivative per action
                grad = 2 * anchor[:, None] * np.einsum("gij,gj->gi", F_layer[np.arange(n_groups) // A], fit)
                for j in range(d):
                    grad[:, j] = np.bincount(groups, weights=2 * resid * X[:, j], minlength=n_groups)
                    grad[:, j] += np.bincount(all_groups.reshape(-1), weights=(coef * X[:, j:j + 1]).reshape(-1),
                                              minlength=n_groups)
                fit = fit - np.einsum("gij,gj->gi", curv_inv, grad)
        W = W + eta * (fit - W)
        if not np.all(np.isfinite(W)):
            raise DivergenceError(f"non-finite weights at iteration {it}")
        tables = _linear_tables(feat, cfg.fclass.features, W, mdp)
        if max(np.max(np.abs(t)) for t in tables) > DIVERGENCE_FACTOR * v_max:
            raise DivergenceError(f"|q| exceeded {DIVERGENCE_FACTOR} * V_max at iteration {it}")
    return TabularQ(tables, meta={"weights": W.tolist()})


def _linear_tables(feat: MdpFeaturizer, name: str, W: np.ndarray, mdp: Mdp) -> list[np.ndarray]:
    A = mdp.num_actions
    out = []
    for h, S in enumerate(mdp.num_states):
        phi = feat.state_features(name, h, np.arange(S))
        out.append(phi @ W[h * A:(h + 1) * A].T)
    return out


def _train_mlp(env, data: Dataset, cfg: TrainConfig, v_max: float):
    from .funcs import featurizer_for
    feat = featurizer_for(env)
    A, H = feat.num_actions, feat.horizon
    tr = data.transitions()
    N = len(tr)
    rng = np.random.default_rng(cfg.seed)
    X_all = [feat.encode(cfg.fclass, tr.h, tr.s, np.full(N, a)) for a in range(A)]
    h_next = np.minimum(tr.h + 1, H - 1)
    Xn_all = [feat.encode(cfg.fclass, h_next, tr.sp, np.full(N, a)) for a in range(A)]
    X_all = np.stack(X_all, axis=1)  # (N, A, d)
    Xn_all = np.stack(Xn_all, axis=1)
    net = mlp_init(X_all.shape[2], cfg.fclass.hidden_width, rng, cfg.fclass.init_scale)
    scale = max(v_max, 1e-12)
    live = ~tr.terminal
    bs = min(cfg.fclass.batch_size, N)
    step = cfg.learning_rate * 100.0
    for it in range(cfg.iterations):
        qn = mlp_forward(net, Xn_all.reshape(N * A, -1)).reshape(N, A)
        y = tr.r / scale + np.where(live, qn.max(axis=1), 0.0)
        for _ in range(INNER_STEPS):
            idx = rng.integers(N, size=bs)
            Xb = X_all[idx]  # (bs, A, d)
            out = mlp_forward(net, Xb.reshape(bs * A, -1)).reshape(bs, A)
            taken = tr.a[idx]
            g = np.zeros((bs, A))
            g[np.arange(bs), taken] = 2 * (out[np.arange(bs), taken] - y[idx])
            if cfg.alpha > 0:
                g += cfg.alpha * (_lse_softmax(out) - np.eye(A)[taken])
            grads = mlp_backward(net, Xb.reshape(bs * A, -1), g.reshape(-1) / bs)
            for k in net:
                net[k] = net[k] - step * grads[k]
        if not all(np.all(np.isfinite(v)) for v in net.values()):
            raise DivergenceError(f"non-finite network at iteration {it}")
        if np.max(np.abs(qn)) * scale > DIVERGENCE_FACTOR * v_max:
            raise DivergenceError(f"|q| exceeded {DIVERGENCE_FACTOR} * V_max at iteration {it}")
    return ParametricQ(net, feat, cfg.fclass, scale)


def train_conservative_fqi(env, data: Dataset, cfg: TrainConfig, v_max: float | None = None):
    """Fitted Q-iteration with a conservative penalty.

    Each iteration regresses onto ``r + max_a' q(s', a')`` with the extra
    term ``alpha * mean(logsumexp_a q(s, a) - q(s, a_data))`` in the loss.
    Tabular classes minimise it exactly per state (Newton), linear classes
    take a few majorise-minimise steps and MLPs take gradient steps. The
    fitted iterate is blended into the current one at rate
    ``min(1, learning_rate * 1000)``.

    Returns ``(policy, q)``; raises ``DivergenceError`` when any value exceeds
    ``10 * V_max``.
    """
    if data.n_episodes == 0:
        raise ValueError("training data is empty")
    v_max = v_max if v_max is not None else env.v_max if isinstance(env, Mdp) else env.horizon * env.r_max
    if isinstance(env, Mdp):
        counts = np.bincount(data.transitions().h, minlength=env.horizon)
        if np.any(counts == 0):
            log.warning("training data is missing layers %s", np.nonzero(counts == 0)[0].tolist())
        if cfg.fclass.kind == "tabular":
            q = _train_tabular(env, data, cfg, v_max)
        elif cfg.fclass.kind == "linear":
            q = _train_linear(env, data, cfg, v_max)
        else:
            raise ValueError("MLP candidates are only supported for simulation-only environments")
        return greedy(q), q
    if cfg.fclass.kind != "mlp":
        raise ValueError("simulation-only environments need an MLP class")
    q = _train_mlp(env, data, cfg, v_max)
    return GreedyPolicy(q, env.num_actions), q


def _zero_parametric(env, fclass: FunctionClass) -> ParametricQ:
    from .funcs import featurizer_for
    feat = featurizer_for(env)
    d = feat.encode(fclass, np.zeros(1, int), np.zeros((1, env.task.obs_dim)), np.zeros(1, int)).shape[1]
    net = {k: np.zeros_like(v) for k, v in mlp_init(d, fclass.hidden_width, np.random.default_rng(0)).items()}
    return ParametricQ(net, feat, fclass)


def entry_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def build_candidate_grid(env, data: Dataset, grid: dict | None = None, master_seed: int = 0,
                         v_max: float | None = None) -> CandidateSet:
    """Train one candidate per point of the grid (default: 3 x 3 x 5 x 2 = 90).

    Divergent entries are kept, flagged, with the last finite Q (zeros if none).
    """
    grid = dict(DEFAULT_GRID if grid is None else grid)
    axes = ["learning_rate", "class_size", "alpha", "iterations"]
    for ax in axes:
        if not grid.get(ax):
            raise ValueError(f"grid axis {ax!r} is empty")
    tabular_env = isinstance(env, Mdp)
    entries = []
    for idx, (lr, size, alpha, iters) in enumerate(itertools.product(*(grid[a] for a in axes))):
        seed = entry_seed(master_seed, idx)
        fclass = class_for_size(size, tabular_env).with_seed(seed)
        cfg = TrainConfig(lr, fclass, alpha, iters, seed)
        hp = {"learning_rate": lr, "class_size": size, "class": fclass.label, "alpha": alpha, "iterations": iters}
        flags = {}
        try:
            policy, q = train_conservative_fqi(env, data, cfg, v_max)
        except DivergenceError as exc:
            log.warning("candidate %d diverged: %s", idx, exc)
            flags = {"diverged": True, "reason": str(exc)}
            if tabular_env:
                q = TabularQ([np.zeros((S, env.num_actions)) for S in env.num_states])
                policy = greedy(q)
            else:
                q = _zero_parametric(env, fclass)
                policy = GreedyPolicy(q, env.num_actions)
        entries.append(CandidateEntry(policy, q, hp, seed, flags))
    prov = {"n_episodes": data.n_episodes, "master_seed": master_seed, "grid": grid}
    return CandidateSet(entries, prov)


# ---------------------------------------------------------------------------
# Behavior policies and OPS data
# ---------------------------------------------------------------------------


def epsilon_greedy(base: TabularPolicy, eps: float) -> TabularPolicy:
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    A = base.num_actions
    return TabularPolicy([(1 - eps) * t + eps / A for t in base.tables])


def mixture_policy(policies: Sequence[TabularPolicy], weights=None) -> TabularPolicy:
    """Per-state convex combination of action distributions."""
    K = len(policies)
    w = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise ValueError("weights must be a distribution")
    H = len(policies[0].tables)
    return TabularPolicy([sum(w[k] * policies[k].tables[h] for k in range(K)) for h in range(H)])


def behavior_for_regime(mdp: Mdp, candidates, regime: str, optimal_eps: float = 0.4, candidate_eps: float = 0.0,
                        mixing: str = "episode"):
    pols = [epsilon_greedy(p, candidate_eps) if candidate_eps > 0 else p for p in _as_policies(candidates)]
    if regime == "well_covered_plus_optimal":
        pols.append(epsilon_greedy(greedy(optimal_q(mdp)), optimal_eps))
    elif regime != "well_covered":
        raise ValueError(f"unknown regime {regime!r}")
    if mixing == "episode":
        return EpisodeMixture(pols)
    if mixing == "state":
        return mixture_policy(pols)
    raise ValueError(f"unknown mixing mode {mixing!r}")


def _as_policies(candidates) -> list:
    return candidates.policies if isinstance(candidates, CandidateSet) else list(candidates)


def make_ops_dataset(mdp: Mdp, candidates, regime: str, n: int, seed: int, optimal_eps: float = 0.4,
                     candidate_eps: float = 0.0, mixing: str = "episode") -> Dataset:
    """OPS data from the candidate mixture, optionally joined by an eps-greedy optimal policy."""
    behavior = behavior_for_regime(mdp, candidates, regime, optimal_eps, candidate_eps, mixing)
    data = sample_trajectories(mdp, behavior, n, seed)
    data.meta.update({"regime": regime, "mixing": mixing})
    return data


def training_data(mdp: Mdp, n: int = 300, eps: float = 0.4, seed: int = 0) -> Dataset:
    """Candidate-training data from an eps-greedy optimal policy (300 episodes by default)."""
    return sample_trajectories(mdp, epsilon_greedy(greedy(optimal_q(mdp)), eps), n, seed)
