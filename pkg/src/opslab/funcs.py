"""Regression function classes (tabular, grouped linear, one-hidden-layer MLP),
squared-loss fitting, and holdout selection among classes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .mdp import Mdp

DEFAULT_MLP_WIDTHS = (32, 64, 128, 256)
RIDGE_FALLBACK = 1e-8


@dataclass(frozen=True)
class FunctionClass:
    """A regression hypothesis class plus its (fixed-budget) training settings.

    ``features`` names the state feature set used by linear and MLP classes.
    """

    kind: str = "tabular"
    features: str = "coarse"
    hidden_width: int = 64
    steps: int = 1500
    step_size: float = 0.05
    batch_size: int = 256
    init_scale: float = 1.0
    ridge: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("tabular", "linear", "mlp"):
            raise ValueError(f"unknown function class kind {self.kind!r}")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")

    @property
    def label(self) -> str:
        if self.kind == "tabular":
            return "tabular"
        if self.kind == "linear":
            return f"linear-{self.features}"
        return f"mlp-{self.hidden_width}"

    def with_seed(self, seed: int) -> "FunctionClass":
        return replace(self, seed=seed)


def mlp_classes(widths: Sequence[int] = DEFAULT_MLP_WIDTHS, **kw) -> list[FunctionClass]:
    return [FunctionClass("mlp", hidden_width=w, **kw) for w in widths]


@dataclass(frozen=True, eq=False)
class SAInputs:
    """Raw (layer, state, action) regression inputs; encoded per class by a featurizer."""

    h: np.ndarray
    s: np.ndarray
    a: np.ndarray

    def __len__(self) -> int:
        return len(self.h)

    def take(self, idx) -> "SAInputs":
        return SAInputs(self.h[idx], self.s[idx], self.a[idx])


class MdpFeaturizer:
    """Encodes ``(h, s, a)`` of a layered tabular MDP for each class kind.

    * tabular: a global cell id per (h, s, a)
    * linear: ``(group = h * A + a, state features)``
    * mlp: dense ``[state features, one-hot action, one-hot layer]``

    Missing feature sets fall back to a constant (``coarse``) or a one-hot
    state code (``fine``).
    """

    def __init__(self, mdp: Mdp):
        self.num_actions = mdp.num_actions
        self.horizon = mdp.horizon
        sizes = np.array(mdp.num_states)
        self.cell_offset = np.concatenate([[0], np.cumsum(sizes * mdp.num_actions)])[:-1]
        self.num_cells = int(np.sum(sizes) * mdp.num_actions)
        self.num_groups = self.horizon * self.num_actions
        self._tables = {}
        for name in ("coarse", "fine"):
            if name in mdp.features:
                self._tables[name] = [np.asarray(f) for f in mdp.features[name]]
            elif name == "coarse":
                self._tables[name] = [np.ones((S, 1)) for S in sizes]
            else:
                width = int(sizes.max())
                self._tables[name] = [np.eye(S, width) for S in sizes]
        for name, layers in mdp.features.items():
            self._tables.setdefault(name, [np.asarray(f) for f in layers])

    def state_features(self, name: str, h, s) -> np.ndarray:
        layers = self._tables[name]
        h = np.asarray(h)
        s = np.asarray(s)
        if h.ndim == 0:
            return layers[int(h)][s]
        out = np.empty((len(h), layers[0].shape[1]))
        for hh in np.unique(h):
            m = h == hh
            out[m] = layers[hh][s[m]]
        return out

    def encode(self, cls: FunctionClass, h, s, a):
        h = np.broadcast_to(np.asarray(h), np.shape(a))
        s = np.asarray(s)
        a = np.asarray(a)
        if cls.kind == "tabular":
            return self.cell_offset[h] + s * self.num_actions + a
        X = self.state_features(cls.features, h, s)
        if cls.kind == "linear":
            return h * self.num_actions + a, X
        return np.concatenate([X, np.eye(self.num_actions)[a], np.eye(self.horizon)[h]], axis=1)

    def n_groups(self, cls: FunctionClass) -> int:
        return self.num_cells if cls.kind == "tabular" else self.num_groups


class ObsFeaturizer:
    """Encodes observation-vector inputs from simulation-only environments."""

    def __init__(self, num_actions: int, horizon: int):
        self.num_actions = num_actions
        self.horizon = horizon
        self.num_groups = num_actions

    def state_features(self, name: str, h, s) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        t = np.broadcast_to(np.asarray(h, dtype=float) / self.horizon, (len(s),))[:, None]
        base = [np.ones((len(s), 1)), s, t]
        if name == "fine":
            base.append(s ** 2)
            base.append(np.sin(np.pi * s))
        return np.concatenate(base, axis=1)

    def encode(self, cls: FunctionClass, h, s, a):
        a = np.asarray(a)
        if cls.kind == "tabular":
            raise ValueError("tabular classes need a finite state space")
        X = self.state_features(cls.features, h, s)
        if cls.kind == "linear":
            return a, X
        return np.concatenate([X[:, 1:], np.eye(self.num_actions)[a]], axis=1)

    def n_groups(self, cls: FunctionClass) -> int:
        return self.num_groups


def featurizer_for(env) -> MdpFeaturizer | ObsFeaturizer:
    if isinstance(env, Mdp):
        return MdpFeaturizer(env)
    return ObsFeaturizer(env.num_actions, env.horizon)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


def mlp_init(d: int, width: int, rng: np.random.Generator, scale: float = 1.0) -> dict:
    return {
        "W1": rng.normal(0.0, scale * np.sqrt(2.0 / d), size=(d, width)),
        "b1": np.zeros(width),
        "w2": rng.normal(0.0, scale / np.sqrt(width), size=width),
        "b2": np.zeros(()),
    }


def mlp_forward(params: dict, X: np.ndarray) -> np.ndarray:
    hidden = np.maximum(X @ params["W1"] + params["b1"], 0.0)
    return hidden @ params["w2"] + params["b2"]


def mlp_backward(params: dict, X: np.ndarray, g_out: np.ndarray) -> dict:
    """Parameter gradient of ``sum_i g_out[i] * f(X[i])``."""
    z = X @ params["W1"] + params["b1"]
    hidden = np.maximum(z, 0.0)
    g_hidden = np.outer(g_out, params["w2"]) * (z > 0)
    return {
        "W1": X.T @ g_hidden,
        "b1": g_hidden.sum(axis=0),
        "w2": hidden.T @ g_out,
        "b2": np.asarray(g_out.sum()),
    }


def mlp_loss_and_grad(params: dict, X: np.ndarray, y: np.ndarray) -> tuple[float, dict]:
    """Mean squared error and its analytic gradient."""
    err = mlp_forward(params, X) - y
    return float(np.mean(err ** 2)), mlp_backward(params, X, 2.0 * err / len(y))


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class FittedFunction:
    cls: FunctionClass
    params: dict
    loss_trace: list = field(default_factory=list)

    def predict(self, inputs) -> np.ndarray:
        kind = self.cls.kind
        if kind == "tabular":
            ids = np.asarray(inputs)
            table = self.params["table"]
            out = np.zeros(len(ids))
            known = ids < len(table)
            out[known] = table[ids[known]]
            return out
        if kind == "linear":
            groups, X = _as_grouped(inputs)
            W = self.params["W"]
            out = np.zeros(len(X))
            known = groups < len(W)
            out[known] = np.einsum("ij,ij->i", X[known], W[groups[known]])
            return out
        Xs = (np.asarray(inputs, float) - self.params["x_mean"]) / self.params["x_scale"]
        return mlp_forward(self.params["net"], Xs) * self.params["y_scale"] + self.params["y_mean"]

    def to_json(self) -> dict:
        def conv(v):
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            return np.asarray(v).tolist()
        return {"class": asdict(self.cls), "params": conv(self.params), "loss_trace": list(self.loss_trace)}

    @classmethod
    def from_json(cls, d: dict) -> "FittedFunction":
        def conv(v):
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            return np.asarray(v, dtype=float)
        params = conv(d["params"])
        return cls(FunctionClass(**d["class"]), params, list(d.get("loss_trace", [])))


def _as_grouped(inputs):
    if isinstance(inputs, tuple):
        groups, X = inputs
        return np.asarray(groups, dtype=int), np.asarray(X, dtype=float)
    X = np.asarray(inputs, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.zeros(len(X), dtype=int), X


def fit_tabular(ids: np.ndarray, y: np.ndarray, n_cells: int | None = None) -> np.ndarray:
    """Per-cell sample means; cells without data predict 0."""
    ids = np.asarray(ids)
    size = int(ids.max()) + 1 if n_cells is None else n_cells
    sums = np.bincount(ids, weights=y, minlength=size)
    counts = np.bincount(ids, minlength=size)
    return np.divide(sums, counts, out=np.zeros(size), where=counts > 0)


def grouped_gram(groups: np.ndarray, X: np.ndarray, n_groups: int, w=None) -> np.ndarray:
    d = X.shape[1]
    Xw = X if w is None else X * w[:, None]
    G = np.zeros((n_groups, d, d))
    for i in range(d):
        for j in range(i, d):
            col = np.bincount(groups, weights=Xw[:, i] * X[:, j], minlength=n_groups)
            G[:, i, j] = col
            G[:, j, i] = col
    return G


def solve_grouped(G: np.ndarray, b: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Solve ``(G_g + ridge I) w_g = b_g`` for every group.

    Singular systems get a ridge of ``1e-8 * trace(G_g) / d``; empty groups
    get zero weights.
    """
    n_groups, d, _ = G.shape
    W = np.zeros((n_groups, d))
    eye = np.eye(d)
    for g in range(n_groups):
        tr = np.trace(G[g])
        if tr <= 0 and ridge <= 0:
            continue
        M = G[g] + ridge * eye
        ev = np.linalg.eigvalsh(M)
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            M = M + RIDGE_FALLBACK * max(tr / d, 1e-300) * eye
        W[g] = np.linalg.solve(M, b[g])
    return W


def fit_linear(groups: np.ndarray, X: np.ndarray, y: np.ndarray, n_groups: int | None = None,
               ridge: float = 0.0) -> np.ndarray:
    size = int(groups.max()) + 1 if n_groups is None else n_groups
    G = grouped_gram(groups, X, size)
    b = np.stack([np.bincount(groups, weights=X[:, i] * y, minlength=size) for i in range(X.shape[1])], axis=1)
    return solve_grouped(G, b, ridge)


def fit_mlp(cls: FunctionClass, X: np.ndarray, y: np.ndarray, init: dict | None = None) -> FittedFunction:
    """Mini-batch gradient descent with constant step size and a fixed step budget."""
    rng = np.random.default_rng(cls.seed)
    X = np.asarray(X, dtype=float)
    x_mean = X.mean(axis=0)
    x_scale = X.std(axis=0)
    x_scale[x_scale < 1e-12] = 1.0
    y_mean = float(np.mean(y))
    y_scale = float(np.std(y)) or 1.0
    Xs = (X - x_mean) / x_scale
    ys = (y - y_mean) / y_scale
    net = init if init is not None else mlp_init(X.shape[1], cls.hidden_width, rng, cls.init_scale)
    net = {k: np.array(v, dtype=float) for k, v in net.items()}
    trace = []
    m = len(ys)
    bs = min(cls.batch_size, m)
    for step in range(cls.steps):
        idx = rng.integers(m, size=bs)
        loss, grads = mlp_loss_and_grad(net, Xs[idx], ys[idx])
        for k in net:
            net[k] -= cls.step_size * grads[k]
        if step % 100 == 0 or step == cls.steps - 1:
            trace.append(loss * y_scale ** 2)
    params = {"net": net, "x_mean": x_mean, "x_scale": x_scale, "y_mean": y_mean, "y_scale": y_scale}
    return FittedFunction(cls, params, trace)


def fit_regression(cls: FunctionClass, inputs, y, n_groups: int | None = None) -> FittedFunction:
    """Squared-loss empirical risk minimisation within ``cls``.

    ``inputs`` are already encoded for the class: cell ids (tabular), a
    ``(groups, X)`` pair or plain matrix (linear), or a dense matrix (mlp).
    """
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("training set is empty")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    if cls.kind == "tabular":
        table = fit_tabular(np.asarray(inputs), y, n_groups)
        fitted = FittedFunction(cls, {"table": table})
    elif cls.kind == "linear":
        groups, X = _as_grouped(inputs)
        W = fit_linear(groups, X, y, n_groups, cls.ridge)
        fitted = FittedFunction(cls, {"W": W})
    else:
        return fit_mlp(cls, inputs, y)
    fitted.loss_trace.append(float(np.mean((fitted.predict(inputs) - y) ** 2)))
    return fitted


def encode_inputs(cls: FunctionClass, x, featurizer=None):
    if isinstance(x, SAInputs):
        if featurizer is None:
            raise ValueError("SAInputs need a featurizer")
        return featurizer.encode(cls, x.h, x.s, x.a)
    return x


def holdout_validate(classes: Sequence[FunctionClass], train: tuple, val: tuple, featurizer=None
                     ) -> tuple[int, FittedFunction, list[float]]:
    """Fit every class on ``train = (x, y)`` and keep the one with the lowest
    validation loss on ``val``; ties go to the lowest class index.
    """
    if not classes:
        raise ValueError("no function classes given")
    (xt, yt), (xv, yv) = train, val
    if len(yt) == 0 or len(yv) == 0:
        raise ValueError("train and validation splits must be nonempty")
    losses, fits = [], []
    for cls in classes:
        n_groups = featurizer.n_groups(cls) if featurizer is not None else None
        fit = fit_regression(cls, encode_inputs(cls, xt, featurizer), yt, n_groups)
        pred = fit.predict(encode_inputs(cls, xv, featurizer))
        losses.append(float(np.mean((pred - np.asarray(yv)) ** 2)))
        fits.append(fit)
    best = int(np.argmin(losses))
    return best, fits[best], losses
