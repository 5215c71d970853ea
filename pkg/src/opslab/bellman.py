"""Bellman-error based scoring and selection: TDE, the minimax BE estimator
with an auxiliary regression (BE and TQ target modes), IBES with holdout
class selection, SBV and the two-stage FQE + IBES combiner.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .funcs import RIDGE_FALLBACK, FunctionClass, featurizer_for, fit_regression, grouped_gram
from .mdp import Dataset, Mdp, Transitions
from .selection import SelectionReport, make_report

TARGET_MODES = ("be", "tq")
DEFAULT_SPLIT = 0.8


@dataclass
class BeScore:
    candidate_index: int
    score: float
    selected_class_index: int
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"candidate": self.candidate_index, "score": self.score, "class": self.selected_class_index,
                "val_losses": self.val_losses}


def default_classes(env) -> list[FunctionClass]:
    if isinstance(env, Mdp):
        return [FunctionClass("tabular"), FunctionClass("linear", features="coarse"),
                FunctionClass("linear", features="fine")]
    return [FunctionClass("linear", features="coarse"), FunctionClass("linear", features="fine")]


def next_values(q, tr: Transitions) -> np.ndarray:
    """``v_q(s') = max_a q(s', a)``, zero for terminal successors."""
    out = np.zeros(len(tr))
    live = ~tr.terminal
    if not live.any():
        return out
    h_next = tr.h[live] + 1
    sp = tr.sp[live]
    vals = np.empty(live.sum())
    for hh in np.unique(h_next):
        m = h_next == hh
        vals[m] = np.asarray(q.values(int(hh), sp[m])).max(axis=1)
    out[live] = vals
    return out


def q_taken(q, tr: Transitions) -> np.ndarray:
    out = np.empty(len(tr))
    for hh in np.unique(tr.h):
        m = tr.h == hh
        v = np.asarray(q.values(int(hh), tr.s[m]))
        out[m] = v[np.arange(m.sum()), tr.a[m]]
    return out


def bellman_targets(q, tr: Transitions) -> tuple[np.ndarray, np.ndarray]:
    """``(q(s, a), r + v_q(s'))`` on every transition."""
    return q_taken(q, tr), tr.r + next_values(q, tr)


def tde_score(data: Dataset | Transitions, q) -> float:
    """Mean squared TD error of ``q`` on the data."""
    tr = data.transitions() if isinstance(data, Dataset) else data
    if len(tr) == 0:
        raise ValueError("data is empty")
    qv, t = bellman_targets(q, tr)
    return float(np.mean((qv - t) ** 2))


# ---------------------------------------------------------------------------
# Auxiliary regression with cached inputs
# ---------------------------------------------------------------------------


class _Prepared:
    """Encoded inputs of one class on fixed fit/score/validation sets.

    Linear and tabular fits only depend on the targets through ``X^T y``, so
    the normal equations are factorised once and reused across candidates.
    """

    def __init__(self, cls: FunctionClass, featurizer, sets: dict[str, Transitions]):
        self.cls = cls
        self.featurizer = featurizer
        self.n_groups = featurizer.n_groups(cls)
        self.inputs = {k: featurizer.encode(cls, t.h, t.s, t.a) for k, t in sets.items()}
        self._solver = None
        if cls.kind == "linear":
            groups, X = self.inputs["fit"]
            d = X.shape[1]
            G = grouped_gram(groups, X, self.n_groups)
            inv = np.zeros_like(G)
            eye = np.eye(d)
            for g in range(self.n_groups):
                tr = np.trace(G[g])
                if tr <= 0 and cls.ridge <= 0:
                    continue
                M = G[g] + cls.ridge * eye
                ev = np.linalg.eigvalsh(M)
                if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
                    M = M + RIDGE_FALLBACK * max(tr / d, 1e-300) * eye
                inv[g] = np.linalg.inv(M)
            self._solver = inv

    def fit_predict(self, y: np.ndarray, keys: Sequence[str]) -> dict[str, np.ndarray]:
        kind = self.cls.kind
        if kind == "tabular":
            ids = self.inputs["fit"]
            sums = np.bincount(ids, weights=y, minlength=self.n_groups)
            counts = np.bincount(ids, minlength=self.n_groups)
            table = np.divide(sums, counts, out=np.zeros(self.n_groups), where=counts > 0)
            return {k: table[self.inputs[k]] for k in keys}
        if kind == "linear":
            groups, X = self.inputs["fit"]
            d = X.shape[1]
            b = np.stack([np.bincount(groups, weights=X[:, i] * y, minlength=self.n_groups) for i in range(d)],
                         axis=1)
            W = np.einsum("gij,gj->gi", self._solver, b)
            out = {}
            for k in keys:
                gk, Xk = self.inputs[k]
                out[k] = np.einsum("ij,ij->i", Xk, W[gk])
            return out
        fit = fit_regression(self.cls, self.inputs["fit"], y)
        return {k: fit.predict(self.inputs[k]) for k in keys}


def _featurizer(env, data: Dataset):
    if env is not None:
        return featurizer_for(env)
    if not data.is_tabular:
        raise ValueError("an environment is needed to featurize continuous data")
    H = data.horizon
    width = int(max(data.states.max(), data.next_states.max())) + 1
    A = int(data.actions.max()) + 1
    return _HCells(A, H, width)


class _HCells:
    """Tabular encoder keyed on (h, s, a) for data without an environment."""

    def __init__(self, num_actions: int, horizon: int, width: int):
        self.num_actions, self.horizon, self.width = num_actions, horizon, width

    def encode(self, cls, h, s, a):
        if cls.kind != "tabular":
            raise ValueError("only tabular classes are available without an environment")
        return (np.asarray(h) * self.width + np.asarray(s)) * self.num_actions + np.asarray(a)

    def n_groups(self, cls):
        return self.horizon * self.width * self.num_actions


class BeScorer:
    """Scores many candidates on one dataset split with shared regression inputs.

    ``fit``: regression data (and BE scoring data by default); ``val``:
    validation data for class choice; ``score``: where the BE / SBV score is
    averaged (the fit split unless ``evaluate_on_validation``).
    """

    def __init__(self, fit: Transitions, val: Transitions | None, classes: Sequence[FunctionClass], featurizer,
                 evaluate_on_validation: bool = False, score: Transitions | None = None):
        if not classes:
            raise ValueError("no auxiliary function classes given")
        if len(fit) == 0:
            raise ValueError("fit split is empty")
        if len(classes) > 1 and (val is None or len(val) == 0):
            raise ValueError("class selection needs a nonempty validation split")
        self.classes = list(classes)
        self.sets = {"fit": fit}
        if val is not None and len(val):
            self.sets["val"] = val
        self.score_key = "val" if evaluate_on_validation else "fit"
        if score is not None:
            self.sets["score"] = score
            self.score_key = "score"
        if self.score_key not in self.sets:
            raise ValueError("evaluate_on_validation needs a validation split")
        self.prepared = [_Prepared(c, featurizer, self.sets) for c in self.classes]

    def _targets(self, q):
        return {k: bellman_targets(q, t) for k, t in self.sets.items()}

    def _select(self, y_of: dict, index: int) -> tuple[int, dict, list]:
        keys = list(self.sets)
        preds, losses = [], []
        for prep in self.prepared:
            p = prep.fit_predict(y_of["fit"], keys)
            preds.append(p)
            if "val" in p:
                losses.append(float(np.mean((p["val"] - y_of["val"]) ** 2)))
            else:
                losses.append(float(np.mean((p["fit"] - y_of["fit"]) ** 2)))
        best = int(np.argmin(losses))
        return best, preds[best], losses

    def minimax(self, q, target_mode: str = "be", index: int = 0) -> BeScore:
        mode = target_mode.lower()
        if mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}")
        tg = self._targets(q)
        sk = self.score_key
        if mode == "be":
            delta = {k: t - qv for k, (qv, t) in tg.items()}
            best, pred, losses = self._select(delta, index)
            h = pred[sk]
            score = float(np.mean(2 * h * delta[sk] - h ** 2))
        else:
            t_of = {k: t for k, (qv, t) in tg.items()}
            best, pred, losses = self._select(t_of, index)
            qv, t = tg[sk]
            score = float(np.mean((qv - t) ** 2) - np.mean((pred[sk] - t) ** 2))
        return BeScore(index, score, best, val_losses=losses)

    def sbv(self, q, index: int = 0) -> BeScore:
        tg = self._targets(q)
        t_of = {k: t for k, (qv, t) in tg.items()}
        best, pred, losses = self._select(t_of, index)
        qv = tg[self.score_key][0]
        return BeScore(index, float(np.mean((qv - pred[self.score_key]) ** 2)), best, val_losses=losses)


def split_episodes(data: Dataset, split_ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random train/validation split by whole episodes."""
    if not 0.0 < split_ratio < 1.0:
        raise ValueError("split_ratio must lie in (0, 1)")
    n = data.n_episodes
    n_fit = int(round(split_ratio * n))
    n_fit = min(max(n_fit, 1), n - 1)
    if n < 2:
        raise ValueError("need at least two episodes to split")
    perm = np.random.default_rng(seed).permutation(n)
    return data.episodes(np.sort(perm[:n_fit])), data.episodes(np.sort(perm[n_fit:]))


def _scorer(data: Dataset, classes, env, split_ratio, seed, evaluate_on_validation=False) -> BeScorer:
    fit, val = split_episodes(data, split_ratio, seed)
    return BeScorer(fit.transitions(), val.transitions(), classes, _featurizer(env, data), evaluate_on_validation)


def _transitions(d):
    return d.transitions() if isinstance(d, Dataset) else d


def _standalone(data_fit, data_score, classes, data_val, env) -> BeScorer:
    if env is not None:
        feat = featurizer_for(env)
    elif isinstance(data_fit, Dataset):
        feat = _featurizer(None, data_fit)
    else:
        raise ValueError("pass env when scoring on raw transitions")
    score = None if data_score is None or data_score is data_fit else _transitions(data_score)
    val = _transitions(data_val) if data_val is not None else None
    return BeScorer(_transitions(data_fit), val, classes, feat, score=score)


def minimax_be_score(data_fit, data_score, q, classes, target_mode: str = "be", data_val=None, env=None
                     ) -> BeScore:
    """Minimax BE estimate of ``q``.

    BE mode regresses ``h`` on ``delta = r + v_q(s') - q(s, a)`` and scores
    ``mean(2 h delta - h^2)``; TQ mode regresses ``g`` on ``r + v_q(s')`` and
    scores ``TDE - mean((g - target)^2)``. With several classes the class is
    picked by loss on ``data_val``. ``data_score=None`` scores on ``data_fit``.
    """
    return _standalone(data_fit, data_score, classes, data_val, env).minimax(q, target_mode)


def sbv_score(data_fit, data_score, q, classes, data_val=None, env=None) -> BeScore:
    """Fit ``g`` to ``r + v_q(s')`` and score ``mean((q - g)^2)``."""
    return _standalone(data_fit, data_score, classes, data_val, env).sbv(q)


def _qs(candidates) -> list:
    if hasattr(candidates, "entries"):
        return [e.q for e in candidates.entries]
    return list(candidates)


def ibes_select(candidates, data: Dataset, classes: Sequence[FunctionClass] | None = None, split_ratio: float =
                DEFAULT_SPLIT, target_mode: str = "be", seed: int = 0, k: int = 1, env=None,
                evaluate_on_validation: bool = False) -> SelectionReport:
    """Score every candidate Q by its minimax BE estimate and rank ascending."""
    classes = list(classes) if classes else default_classes(env) if env is not None else [FunctionClass()]
    scorer = _scorer(data, classes, env, split_ratio, seed, evaluate_on_validation)
    scores = [scorer.minimax(q, target_mode, i) for i, q in enumerate(_qs(candidates))]
    cfg = {"split_ratio": split_ratio, "target": target_mode, "classes": [c.label for c in classes],
           "evaluate_on_validation": evaluate_on_validation}
    return make_report(f"ibes(target={target_mode})", [s.score for s in scores], descending=False, k=k, config=cfg,
                       seed=seed, details=[s.to_json() for s in scores])


def sbv_select(candidates, data: Dataset, classes=None, split_ratio: float = DEFAULT_SPLIT, seed: int = 0,
               k: int = 1, env=None) -> SelectionReport:
    classes = list(classes) if classes else default_classes(env) if env is not None else [FunctionClass()]
    scorer = _scorer(data, classes, env, split_ratio, seed)
    scores = [scorer.sbv(q, i) for i, q in enumerate(_qs(candidates))]
    cfg = {"split_ratio": split_ratio, "classes": [c.label for c in classes]}
    return make_report("sbv", [s.score for s in scores], descending=False, k=k, config=cfg, seed=seed,
                       details=[s.to_json() for s in scores])


def tde_select(candidates, data: Dataset, k: int = 1) -> SelectionReport:
    tr = data.transitions()
    return make_report("tde", [tde_score(tr, q) for q in _qs(candidates)], descending=False, k=k)


def two_stage_select(candidates, data: Dataset, k1: int = 10, k2: int = 1, fqe_report: SelectionReport | None = None,
                     fqe_kwargs: dict | None = None, ibes_kwargs: dict | None = None) -> SelectionReport:
    """Keep the FQE top ``k1``, then re-rank those by IBES and choose its top ``k2``.

    The final ranking is the re-ranked prefix followed by the remaining
    candidates in FQE order.
    """
    K = len(candidates)
    if not 1 <= k2 <= k1 <= K:
        raise ValueError(f"need 1 <= k2 <= k1 <= {K}; got k1={k1}, k2={k2}")
    if fqe_report is None:
        from .ope import ops_by_estimate
        kw = dict(fqe_kwargs or {})
        fqe_report = ops_by_estimate(candidates, data, kw.pop("estimator", "fqe"), **kw)
    prefix = fqe_report.ranking[:k1]
    qs = _qs(candidates)
    sub = ibes_select([qs[i] for i in prefix], data, k=k2, **(ibes_kwargs or {}))
    reranked = [prefix[i] for i in sub.ranking]
    ranking = reranked + fqe_report.ranking[k1:]
    scores = [float("inf")] * K
    for j, i in enumerate(prefix):
        scores[i] = sub.scores[j]
    return SelectionReport(f"fqe+ibes(k1={k1})", scores, ranking, ranking[:k2], descending=False,
                           config={"k1": k1, "k2": k2, "fqe_ranking": fqe_report.ranking, **sub.config},
                           seed=sub.seed)
