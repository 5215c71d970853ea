"""Sweep execution: fixed candidates per config, OPS data resampled per
(n, seed) cell, regret rows appended to a CSV with resume-by-skip.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .candidates import CandidateSet, build_candidate_grid, make_ops_dataset, training_data
from .config import RunConfig
from .envs import EnvSpec, rollout
from .mdp import Mdp
from .methods import run_method
from .metrics import TrueValues, random_baseline_regret, topk_regret

log = logging.getLogger(__name__)

COLUMNS = ["config_id", "env", "regime", "method", "n", "seed", "k", "regret", "chosen", "walltime_ms"]
RANDOM = "random"


class StateMixture:
    """Per-step average of candidate action distributions (continuous envs)."""

    def __init__(self, policies):
        self.policies = list(policies)

    def probs(self, h, s):
        return sum(np.asarray(p.probs(h, s)) for p in self.policies) / len(self.policies)


def cell_seed(config_id: str, n: int, seed: int) -> int:
    return int(np.random.SeedSequence([int(config_id, 16) % (2 ** 32), n, seed]).generate_state(1)[0])


@dataclass
class Prepared:
    env: object
    candidates: CandidateSet
    values: TrueValues


def prepare(cfg: RunConfig, out_dir: Path | None = None) -> Prepared:
    """Build the environment, candidate set and true values (cached in ``out_dir``)."""
    env = EnvSpec(cfg.env.kind, cfg.env.parameters, cfg.env.seed).build()
    cand_path = Path(cfg.candidates.path) if cfg.candidates.path else None
    cache = out_dir / "candidates.json" if out_dir is not None else None
    if cand_path is not None:
        candidates = CandidateSet.load(cand_path)
    elif cache is not None and cache.exists() and json.loads(cache.read_text()).get("provenance", {}).get(
            "key") == _candidate_key(cfg):
        candidates = CandidateSet.load(cache)
    else:
        cc = cfg.candidates
        if isinstance(env, Mdp):
            train = training_data(env, cc.train_episodes, cc.train_eps, cc.master_seed)
        else:
            from .envs import UniformPolicy
            train = rollout(env, UniformPolicy(env.num_actions), cc.train_episodes, cc.master_seed)
        candidates = build_candidate_grid(env, train, cc.grid, cc.master_seed)
        candidates.provenance["key"] = _candidate_key(cfg)
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            candidates.save(cache)
    if isinstance(env, Mdp):
        values = TrueValues.exact(env, candidates.policies)
    else:
        values = TrueValues.monte_carlo(env, candidates.policies, 10_000, cfg.env.seed)
    return Prepared(env, candidates, values)


def _candidate_key(cfg: RunConfig) -> str:
    d = {"env": cfg.env.model_dump(), "candidates": cfg.candidates.model_dump()}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def ops_data(cfg: RunConfig, prep: Prepared, n: int, seed: int):
    s = cell_seed(cfg.config_id(), n, seed)
    if isinstance(prep.env, Mdp):
        return make_ops_dataset(prep.env, prep.candidates, cfg.data.regime, n, s, cfg.data.optimal_eps,
                                mixing=cfg.data.mixing)
    if cfg.data.regime != "well_covered":
        raise ValueError("continuous environments only support the well_covered regime")
    return rollout(prep.env, StateMixture(prep.candidates.policies), n, s)


def run_cell(cfg: RunConfig, prep: Prepared, n: int, seed: int, methods=None) -> list[dict]:
    """All method rows for one (n, seed) cell."""
    methods = cfg.methods if methods is None else methods
    data = ops_data(cfg, prep, n, seed)
    rows = []
    cache = {}
    cid = cfg.config_id()
    kmax = max(cfg.sweep.k)
    for method in methods:
        t0 = time.perf_counter()
        report = run_method(method, prep.candidates, data, prep.env, k=min(kmax, len(prep.candidates)),
                            seed=cell_seed(cid, n, seed), cache=cache)
        ms = (time.perf_counter() - t0) * 1000 if cfg.sweep.record_time else 0.0
        for k in cfg.sweep.k:
            k = min(k, len(prep.candidates))
            rows.append(_row(cfg, method, n, seed, k, topk_regret(prep.values, report.ranking, k),
                             report.ranking[0], ms))
    for k in cfg.sweep.k:
        k = min(k, len(prep.candidates))
        reg, _ = random_baseline_regret(prep.values, k, cfg.sweep.random_repeats, cell_seed(cid, n, seed))
        rows.append(_row(cfg, RANDOM, n, seed, k, reg, -1, 0.0))
    return rows


def _row(cfg, method, n, seed, k, regret, chosen, ms) -> dict:
    return {"config_id": cfg.config_id(), "env": cfg.env.kind, "regime": cfg.data.regime, "method": method,
            "n": n, "seed": seed, "k": k, "regret": f"{regret:.10g}", "chosen": chosen,
            "walltime_ms": f"{ms:.1f}"}


def _present(path: Path) -> set:
    if not path.exists():
        return set()
    with path.open(newline="") as f:
        return {(r["config_id"], int(r["n"]), int(r["seed"])) for r in csv.DictReader(f)}


def _worker(args):
    cfg, prep, n, seed = args
    return run_cell(cfg, prep, n, seed)


def run_sweep(cfg: RunConfig, out_dir: str | Path | None = None, jobs: int | None = None) -> Path:
    """Run every (n, seed) cell not yet in ``results.csv`` and refresh ``summary.json``."""
    out = Path(out_dir or cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    prep = prepare(cfg, out)
    cid = cfg.config_id()
    done = _present(csv_path)
    todo = [(n, s) for n in cfg.sweep.n_grid for s in cfg.sweep.seeds if (cid, n, s) not in done]
    log.info("sweep %s: %d cells to run, %d already present", cid, len(todo), len(done))
    new_file = not csv_path.exists()
    with csv_path.open("a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=COLUMNS)
        if new_file:
            writer.writeheader()
        jobs = jobs or cfg.sweep.jobs
        if jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(jobs) as pool:
                results = pool.map(_worker, [(cfg, prep, n, s) for n, s in todo])
                for rows in results:
                    writer.writerows(rows)
                    f.flush()
        else:
            for n, s in todo:
                writer.writerows(run_cell(cfg, prep, n, s))
                f.flush()
    write_summary(csv_path, out / "summary.json")
    return csv_path


def summarize(csv_path) -> list[dict]:
    """Mean and standard error of regret per (env, regime, method, n, k)."""
    with Path(csv_path).open(newline="") as f:
        rows = list(csv.DictReader(f))
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r["env"], r["regime"], r["method"], int(r["n"]), int(r["k"]))
        groups.setdefault(key, []).append(float(r["regret"]))
    out = []
    for (env, regime, method, n, k), vals in sorted(groups.items()):
        v = np.asarray(vals)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        out.append({"env": env, "regime": regime, "method": method, "n": n, "k": k, "mean": float(v.mean()),
                    "stderr": se, "count": len(v)})
    return out


def write_summary(csv_path, path) -> None:
    Path(path).write_text(json.dumps(summarize(csv_path), indent=2) + "\n")
