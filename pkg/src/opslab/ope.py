"""Off-policy value estimators (IS, WIS, PDIS, FQE) and selection by the
highest estimated value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .funcs import FunctionClass, fit_regression
from .mdp import Dataset, PolicyUndefinedError, exact_policy_value
from .selection import MethodStringError, SelectionReport, make_report, parse_method

DIVERGED = -math.inf
FQE_MARGIN = 100.0


class SupportError(ValueError):
    """The target puts mass on a logged action whose behavior probability is zero."""

    def __init__(self, h, s, a):
        super().__init__(f"support violation at (h={h}, s={s}, a={a})")
        self.h, self.s, self.a = h, s, a


@dataclass
class OpeEstimate:
    value: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def diverged(self) -> bool:
        return bool(self.diagnostics.get("diverged", False))


def _target_probs_taken(data: Dataset, target) -> np.ndarray:
    n, H = data.actions.shape
    rows = np.arange(n)
    out = np.empty((n, H))
    for h in range(H):
        p = np.asarray(target.probs(h, data.states[:, h]))
        bad = np.isnan(p).any(axis=1)
        if bad.any():
            i = int(np.argmax(bad))
            raise PolicyUndefinedError(h, _state_label(data.states[i, h]))
        out[:, h] = p[rows, data.actions[:, h]]
    return out


def _state_label(s):
    return int(s) if np.ndim(s) == 0 else tuple(np.round(s, 4).tolist())


def step_ratios(data: Dataset, target) -> np.ndarray:
    """Per-step likelihood ratios ``pi(a|s) / pi_b(a|s)`` from the logged probabilities."""
    tp = _target_probs_taken(data, target)
    pb = data.behavior_probs
    bad = (pb <= 0) & (tp > 0)
    if bad.any():
        i, h = map(int, np.argwhere(bad)[0])
        raise SupportError(h, _state_label(data.states[i, h]), int(data.actions[i, h]))
    return np.divide(tp, pb, out=np.zeros_like(tp), where=pb > 0)


def _weight_diag(w: np.ndarray) -> dict:
    s2 = float(np.sum(w ** 2))
    return {"ess": float(w.sum() ** 2 / s2) if s2 > 0 else 0.0, "max_weight": float(w.max(initial=0.0)),
            "diverged": False}


def is_estimate(data: Dataset, target) -> OpeEstimate:
    """Trajectory-wise importance sampling: mean of ``prod_h rho_h * G``."""
    w = step_ratios(data, target).prod(axis=1)
    return OpeEstimate(float(np.mean(w * data.returns)), _weight_diag(w))


def wis_estimate(data: Dataset, target) -> OpeEstimate:
    w = step_ratios(data, target).prod(axis=1)
    diag = _weight_diag(w)
    total = w.sum()
    if total <= 0:
        diag["diverged"] = True
        return OpeEstimate(DIVERGED, diag)
    return OpeEstimate(float(np.dot(w, data.returns) / total), diag)


def pdis_estimate(data: Dataset, target) -> OpeEstimate:
    """Per-decision IS: each reward weighted by the ratio of its prefix."""
    prefix = np.cumprod(step_ratios(data, target), axis=1)
    value = float(np.mean(np.sum(prefix * data.rewards, axis=1)))
    return OpeEstimate(value, _weight_diag(prefix[:, -1]))


def _all_action_values(fit, featurizer, cls, h, s, A) -> np.ndarray:
    m = len(s)
    out = np.empty((m, A))
    for a in range(A):
        out[:, a] = fit.predict(featurizer.encode(cls, h, s, np.full(m, a)))
    return out


class _LayerCells:
    """Minimal tabular encoder for data without an environment featurizer."""

    def __init__(self, num_actions: int, num_states: int):
        self.num_actions = num_actions
        self.num_states = num_states

    def encode(self, cls, h, s, a):
        return np.asarray(s) * self.num_actions + np.asarray(a)

    def n_groups(self, cls):
        return self.num_states * self.num_actions


def fqe(data: Dataset, target, cls: FunctionClass | None = None, U: float | str | None = "auto",
        v_max: float | None = None, featurizer=None, num_actions: int | None = None) -> OpeEstimate:
    """Fitted Q evaluation by backward per-layer regression.

    The last layer regresses on the observed rewards; earlier layers on
    ``r + sum_a' pi(a'|s') q_{h+1}(s', a')``. Estimates above ``U`` (default
    ``v_max + 100``) or non-finite intermediate values are flagged as diverged
    and reported as ``-inf``.
    """
    cls = cls or FunctionClass("tabular")
    H = data.horizon
    if num_actions is None:
        num_actions = featurizer.num_actions if featurizer is not None else target.probs(0, data.states[:1, 0]).shape[1]
    A = num_actions
    if U == "auto" or U is None:
        if v_max is None:
            raise ValueError("U='auto' needs v_max")
        U = v_max + FQE_MARGIN
    if featurizer is None:
        if cls.kind != "tabular" or not data.is_tabular:
            raise ValueError("non-tabular FQE needs a featurizer")
        featurizer = _LayerCells(A, int(max(data.states.max(), data.next_states.max())) + 1)
    fits = [None] * H
    diverged = False
    for h in reversed(range(H)):
        layer = data.layer(h)
        if len(layer) == 0:
            raise ValueError(f"no transitions at layer {h}")
        y = layer.r.astype(float).copy()
        if h < H - 1:
            live = ~layer.terminal
            if live.any():
                sp = layer.sp[live]
                qn = _all_action_values(fits[h + 1], featurizer, cls, h + 1, sp, A)
                pn = np.asarray(target.probs(h + 1, sp))
                if np.isnan(pn).any():
                    i = int(np.argmax(np.isnan(pn).any(axis=1)))
                    raise PolicyUndefinedError(h + 1, _state_label(sp[i]))
                y[live] += np.sum(pn * qn, axis=1)
        if not np.all(np.isfinite(y)):
            diverged = True
            break
        n_groups = featurizer.n_groups(cls) if hasattr(featurizer, "n_groups") else None
        fits[h] = fit_regression(cls, featurizer.encode(cls, h, layer.s, layer.a), y, n_groups)
    diag = {"iterations": H, "diverged": diverged, "U": float(U)}
    if diverged:
        return OpeEstimate(DIVERGED, diag)
    s0 = data.states[:, 0]
    q0 = _all_action_values(fits[0], featurizer, cls, 0, s0, A)
    value = float(np.mean(np.sum(np.asarray(target.probs(0, s0)) * q0, axis=1)))
    diag["raw_value"] = value
    if not math.isfinite(value) or value > U:
        diag["diverged"] = True
        return OpeEstimate(DIVERGED, diag)
    return OpeEstimate(value, diag)


ESTIMATORS = {"is": is_estimate, "wis": wis_estimate, "pdis": pdis_estimate}


def make_estimator(spec, v_max: float | None = None, featurizer=None) -> Callable:
    """Turn an estimator string (``"is"``, ``"fqe(class=tabular,U=auto)"``) into
    ``estimator(policy, data) -> OpeEstimate``.
    """
    if callable(spec):
        return spec
    name, kw = parse_method(spec)
    if name in ESTIMATORS:
        if kw:
            raise MethodStringError(f"{name} takes no parameters")
        fn = ESTIMATORS[name]
        return lambda pi, data: fn(data, pi)
    if name == "fqe":
        cls = _class_from_kw(kw)
        U = kw.get("U", "auto")
        return lambda pi, data: fqe(data, pi, cls, U, v_max, featurizer)
    raise MethodStringError(f"unknown estimator {spec!r}; valid: is, wis, pdis, fqe(class=...,U=...)")


def _class_from_kw(kw: dict) -> FunctionClass:
    kind = kw.get("class", "tabular")
    if kind.startswith("linear"):
        return FunctionClass("linear", features=kw.get("features", kind.partition("-")[2] or "coarse"))
    if kind.startswith("mlp"):
        width = int(kw.get("width", kind.partition("-")[2] or 256))
        return FunctionClass("mlp", hidden_width=width)
    if kind != "tabular":
        raise MethodStringError(f"unknown function class {kind!r}")
    return FunctionClass("tabular")


def _policies(candidates) -> list:
    if hasattr(candidates, "entries"):
        return [e.policy for e in candidates.entries]
    return list(candidates)


def ops_by_estimate(candidates, data: Dataset, estimator, k: int = 1, v_max: float | None = None,
                    featurizer=None, name: str | None = None) -> SelectionReport:
    """Rank candidates by descending estimated value; diverged ones go last."""
    est = make_estimator(estimator, v_max, featurizer)
    scores, details = [], []
    for pi in _policies(candidates):
        out = est(pi, data)
        if isinstance(out, OpeEstimate):
            scores.append(out.value)
            details.append(out.diagnostics)
        else:
            scores.append(float(out))
            details.append({})
    label = name or (estimator if isinstance(estimator, str) else getattr(estimator, "__name__", "custom"))
    return make_report(label, scores, descending=True, k=k, details=details)


def exact_estimator(mdp):
    """Estimator that ignores the data and returns the exact DP value."""

    def estimate(pi, data=None):
        return OpeEstimate(exact_policy_value(mdp, pi), {"exact": True})
    estimate.__name__ = "exact"
    return estimate
