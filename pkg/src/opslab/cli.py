"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 input-data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from .candidates import DEFAULT_GRID, CandidateSet, build_candidate_grid, make_ops_dataset, training_data
from .config import load_config
from .envs import EnvSpec, UniformPolicy, rollout
from .mdp import Dataset, Mdp, TabularPolicy, exact_policy_value, greedy, optimal_q, save_mdp
from .methods import VALID_METHODS, run_method
from .reduction import estimator_oracle, exact_oracle, fresh_data, ope_via_ops
from .selection import MethodStringError

log = logging.getLogger("opslab")

EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class NumericFailure(ArithmeticError):
    pass


def _default_seed() -> int:
    raw = os.environ.get("OPSLAB_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"OPSLAB_SEED must be an integer, got {raw!r}", EXIT_CONFIG)


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True) + "\n")


def _read_json(path):
    p = Path(path)
    if not p.exists():
        raise CliError(f"input file not found: {p}", EXIT_INPUT)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: invalid JSON ({exc})", EXIT_INPUT)


def load_env(path):
    """An Mdp file, or a ``{"env_spec": ...}`` file for simulation-only tasks."""
    d = _read_json(path)
    try:
        if "env_spec" in d:
            return EnvSpec(**d["env_spec"]).build()
        return Mdp.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: not a valid environment file ({exc})", EXIT_INPUT)


def load_candidates(path) -> CandidateSet:
    d = _read_json(path)
    try:
        return CandidateSet.from_json(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: not a valid candidate file ({exc})", EXIT_INPUT)


def load_data(path) -> Dataset:
    if not Path(path).exists():
        raise CliError(f"input file not found: {path}", EXIT_INPUT)
    try:
        return Dataset.from_jsonl(path)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"{path}: not a valid dataset ({exc})", EXIT_INPUT)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _env_params(args) -> dict:
    keys = {"width": args.width, "height": args.height, "H": args.H, "slip_prob": args.slip, "A": args.A,
            "eps": args.eps, "states_per_layer": args.states, "task": args.task, "repeat_prob": args.repeat_prob}
    return {k: v for k, v in keys.items() if v is not None}


def cmd_gen_env(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    params = _env_params(args)
    allowed = {"gridworld": {"width", "height", "H", "slip_prob", "repeat_prob"},
               "tree_hard": {"A", "H", "eps"}, "random": {"states_per_layer", "A", "H"},
               "continuous_control": {"task", "H", "repeat_prob"}}[args.kind]
    extra = set(params) - allowed
    if extra:
        raise CliError(f"options {sorted(extra)} do not apply to --kind {args.kind}", EXIT_CONFIG)
    if args.kind == "gridworld" and "repeat_prob" in params:
        params["sticky"] = True
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        if args.kind == "tree_hard":
            for which in (0, 1):
                mdp = EnvSpec("tree_hard", {**params, "which": which}, seed).build()
                path = out / f"tree_hard_mdp{which + 1}.json"
                save_mdp(mdp, path)
                written.append(path)
        elif args.kind == "continuous_control":
            spec = EnvSpec("continuous_control", params, seed)
            spec.build()
            path = out / f"{params.get('task', 'cartpole_like')}.json"
            _write_json(path, {"env_spec": {"kind": spec.kind, "parameters": spec.parameters, "seed": seed}})
            written.append(path)
        else:
            mdp = EnvSpec(args.kind, params, seed).build()
            path = out / f"{args.kind}.json"
            save_mdp(mdp, path)
            written.append(path)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    print(f"wrote {len(written)} environment file(s): " + ", ".join(str(p) for p in written))
    return 0


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    env = load_env(args.env)
    if args.n < 1:
        raise CliError("--n must be >= 1", EXIT_CONFIG)
    if isinstance(env, Mdp):
        if args.candidates:
            cands = load_candidates(args.candidates)
            data = make_ops_dataset(env, cands, args.regime, args.n, seed, mixing=args.mixing)
        else:
            pols = [TabularPolicy.uniform(env)]
            data = make_ops_dataset(env, pols, args.regime, args.n, seed, mixing=args.mixing)
    else:
        data = rollout(env, UniformPolicy(env.num_actions), args.n, seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    data.to_jsonl(args.out)
    print(f"wrote {data.n_episodes} trajectories (H={data.horizon}) to {args.out}")
    return 0


def _load_grid(spec: str) -> dict:
    if spec == "default":
        return DEFAULT_GRID
    d = _read_json(spec)
    if not isinstance(d, dict):
        raise CliError(f"{spec}: grid must be a JSON object of axes", EXIT_CONFIG)
    return d


def cmd_train_candidates(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    env = load_env(args.env)
    grid = _load_grid(args.grid)
    if args.data:
        data = load_data(args.data)
    elif isinstance(env, Mdp):
        data = training_data(env, args.episodes, 0.4, seed)
    else:
        data = rollout(env, UniformPolicy(env.num_actions), args.episodes, seed)
    try:
        cands = build_candidate_grid(env, data, grid, seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    cands.save(args.out)
    flagged = sum(bool(e.flags.get("diverged")) for e in cands.entries)
    print(f"wrote {len(cands)} candidates to {args.out} ({flagged} flagged divergent)")
    return 0


def cmd_select(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    env = load_env(args.env)
    cands = load_candidates(args.candidates)
    data = load_data(args.data)
    k = min(args.k, len(cands))
    report = run_method(args.method, cands, data, env, k=k, seed=seed)
    chosen_scores = [report.scores[i] for i in report.chosen]
    if not all(math.isfinite(s) for s in chosen_scores) and args.method.split("(")[0] not in ("fqe", "wis"):
        raise NumericFailure(f"method {args.method} produced non-finite scores for the chosen candidates")
    _write_json(args.out, report.to_json())
    print(f"{args.method}: chose {report.chosen} -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    from .sweep import run_sweep
    cfg = load_config(args.config)
    path = run_sweep(cfg, args.out, args.jobs)
    print(f"results: {path}")
    return 0


def cmd_report(args) -> int:
    from .report import write_report
    if not Path(args.csv).exists():
        raise CliError(f"input file not found: {args.csv}", EXIT_INPUT)
    try:
        written = write_report(args.csv, args.out)
    except (KeyError, ValueError) as exc:
        raise CliError(f"{args.csv}: {exc}", EXIT_INPUT)
    print(f"wrote {len(written)} file(s) to {args.out}")
    return 0


def cmd_reduction_demo(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    mdp = load_env(args.env)
    if not isinstance(mdp, Mdp):
        raise CliError("reduction-demo needs a tabular environment file", EXIT_INPUT)
    if args.target in ("optimal", "uniform"):
        target = greedy(optimal_q(mdp)) if args.target == "optimal" else TabularPolicy.uniform(mdp)
    else:
        d = _read_json(args.target)
        try:
            target = TabularPolicy.from_list(d["tables"] if isinstance(d, dict) else d)
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{args.target}: not a valid policy file ({exc})", EXIT_INPUT)
    eps = args.eps if args.eps is not None else 0.05 * mdp.v_max
    if eps <= 0:
        raise CliError("--eps must be positive", EXIT_CONFIG)
    if args.oracle == "exact":
        oracle, provider = exact_oracle(), None
    else:
        from .ope import ESTIMATORS
        fn = ESTIMATORS[args.oracle]
        oracle, provider = estimator_oracle(lambda data, pi: fn(data, pi)), fresh_data(args.n)
    kw = {"data_provider": provider} if provider else {}
    res = ope_via_ops(oracle, mdp, target, eps, seed=seed, **kw)
    true_j = exact_policy_value(mdp, target)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["call", "r", "chosen", "L", "U"])
        for row in res.trace:
            w.writerow([row["call"], f"{row['r']:.12g}", row["chosen"], f"{row['L']:.12g}", f"{row['U']:.12g}"])
        w.writerow(["final", f"estimate={res.estimate:.12g}", f"true={true_j:.12g}",
                    f"error={res.estimate - true_j:.12g}", f"eps={eps:.12g}"])
    print(f"estimate {res.estimate:.6f}, true {true_j:.6f}, calls {res.calls} (budget {res.budget}) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opslab", description="Offline policy selection toolkit and harness.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-env", help="write environment file(s)")
    g.add_argument("--kind", required=True, choices=["gridworld", "tree_hard", "random", "continuous_control"])
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--H", type=int)
    g.add_argument("--slip", type=float)
    g.add_argument("--A", type=int)
    g.add_argument("--eps", type=float)
    g.add_argument("--states", type=int)
    g.add_argument("--task", choices=["cartpole_like", "acrobot_like"])
    g.add_argument("--repeat-prob", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", default=".")
    g.set_defaults(func=cmd_gen_env)

    d = sub.add_parser("gen-data", help="sample an OPS dataset (JSON Lines)")
    d.add_argument("--env", required=True)
    d.add_argument("--candidates", help="candidate file; uniform behavior when omitted")
    d.add_argument("--regime", default="well_covered", choices=["well_covered", "well_covered_plus_optimal"])
    d.add_argument("--mixing", default="episode", choices=["episode", "state"])
    d.add_argument("--n", type=int, default=1000)
    d.add_argument("--seed", type=int)
    d.add_argument("--out", default="data.jsonl")
    d.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-candidates", help="train the candidate grid")
    t.add_argument("--env", required=True)
    t.add_argument("--grid", default="default", help="'default' or a JSON file of axes")
    t.add_argument("--data", help="training data; eps-greedy optimal episodes when omitted")
    t.add_argument("--episodes", type=int, default=300)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="candidates.json")
    t.set_defaults(func=cmd_train_candidates)

    s = sub.add_parser("select", help="run one selection method")
    s.add_argument("--env", required=True)
    s.add_argument("--candidates", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--method", required=True, help="one of: " + ", ".join(VALID_METHODS))
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="selection.json")
    s.set_defaults(func=cmd_select)

    w = sub.add_parser("sweep", help="run a regret sweep from a config file")
    w.add_argument("--config", required=True)
    w.add_argument("--out", help="output directory (overrides the config)")
    w.add_argument("--jobs", type=int)
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("reduction-demo", help="estimate a policy value by bisection over selection calls")
    r.add_argument("--env", required=True)
    r.add_argument("--target", default="optimal", help="'optimal', 'uniform' or a policy JSON file")
    r.add_argument("--eps", type=float)
    r.add_argument("--oracle", default="exact", choices=["exact", "is", "wis", "pdis"])
    r.add_argument("--n", type=int, default=10_000, help="episodes per call for sampling oracles")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default="reduction_trace.csv")
    r.set_defaults(func=cmd_reduction_demo)

    o = sub.add_parser("report", help="SVG regret charts and summary from a sweep CSV")
    o.add_argument("--csv", required=True)
    o.add_argument("--out", default="report")
    o.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValidationError, MethodStringError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
