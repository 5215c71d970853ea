"""Method-string dispatch shared by the CLI and the sweep harness."""
from __future__ import annotations

from .bellman import DEFAULT_SPLIT, ibes_select, sbv_select, tde_select, two_stage_select
from .funcs import featurizer_for
from .mdp import Dataset, Mdp
from .ope import ESTIMATORS, _class_from_kw, make_estimator, ops_by_estimate
from .selection import MethodStringError, SelectionReport, parse_method

VALID_METHODS = ("tde", "ibes(target=be|tq,split=0.8)", "sbv(split=0.8)", "fqe(class=...,U=auto)", "is", "wis",
                 "pdis", "fqe+ibes(k1=10,k2=1)")
_KEYS = {
    "tde": set(),
    "ibes": {"target", "split", "eval"},
    "sbv": {"split"},
    "fqe": {"class", "U", "features", "width"},
    "is": set(), "wis": set(), "pdis": set(),
    "fqe+ibes": {"k1", "k2", "target", "split", "class", "U"},
}


def validate_method(text: str) -> tuple[str, dict]:
    """Parse and check a method string; raise with the list of valid methods otherwise."""
    try:
        name, kw = parse_method(text)
    except MethodStringError:
        raise MethodStringError(f"cannot parse method {text!r}; valid methods: {', '.join(VALID_METHODS)}")
    if name not in _KEYS:
        raise MethodStringError(f"unknown method {text!r}; valid methods: {', '.join(VALID_METHODS)}")
    extra = set(kw) - _KEYS[name]
    if extra:
        raise MethodStringError(f"unknown parameters {sorted(extra)} for {name}; valid methods: "
                                f"{', '.join(VALID_METHODS)}")
    if "target" in kw and str(kw["target"]).lower() not in ("be", "tq"):
        raise MethodStringError(f"target must be be or tq in {text!r}")
    if "class" in kw:
        _class_from_kw(kw)
    return name, kw


def env_v_max(env) -> float:
    return env.v_max if isinstance(env, Mdp) else env.horizon * env.r_max


def _fqe_string(kw: dict, env) -> str:
    cls = kw.get("class", "tabular" if isinstance(env, Mdp) else "linear-fine")
    return f"fqe(class={cls},U={kw.get('U', 'auto')})"


def run_method(method: str, candidates, data: Dataset, env, k: int = 1, seed: int = 0,
               cache: dict | None = None) -> SelectionReport:
    """Run one selection method; ``cache`` lets ``fqe+ibes`` reuse an FQE ranking."""
    name, kw = validate_method(method)
    cache = {} if cache is None else cache
    split = float(kw.get("split", DEFAULT_SPLIT))
    if name == "tde":
        report = tde_select(candidates, data, k=k)
    elif name == "ibes":
        report = ibes_select(candidates, data, split_ratio=split, target_mode=str(kw.get("target", "be")).lower(),
                             seed=seed, k=k, env=env, evaluate_on_validation=bool(kw.get("eval", 0)))
    elif name == "sbv":
        report = sbv_select(candidates, data, split_ratio=split, seed=seed, k=k, env=env)
    elif name in ESTIMATORS:
        report = ops_by_estimate(candidates, data, name, k=k, name=name)
    elif name == "fqe":
        report = _fqe_report(candidates, data, env, kw, k, cache)
    else:
        k1 = int(kw.get("k1", 10))
        k2 = int(kw.get("k2", k))
        k1 = min(k1, len(candidates))
        fqe_rep = _fqe_report(candidates, data, env, kw, 1, cache)
        ibes_kw = {"split_ratio": split, "target_mode": str(kw.get("target", "be")).lower(), "seed": seed,
                   "env": env}
        report = two_stage_select(candidates, data, k1, min(k2, k1), fqe_report=fqe_rep, ibes_kwargs=ibes_kw)
    report.method = method
    report.seed = seed
    return report


def _fqe_report(candidates, data, env, kw, k, cache) -> SelectionReport:
    spec = _fqe_string(kw, env)
    key = ("fqe", spec, id(data))
    if key not in cache:
        est = make_estimator(spec, env_v_max(env), featurizer_for(env))
        cache[key] = ops_by_estimate(candidates, data, est, k=1, name=spec)
    rep = cache[key]
    return SelectionReport(spec, rep.scores, rep.ranking, rep.ranking[:k], True, dict(rep.config), rep.seed,
                           rep.details)
