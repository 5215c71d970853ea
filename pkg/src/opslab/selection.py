"""Selection reports and method-string parsing shared by all selectors."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

_METHOD_RE = re.compile(r"^\s*([a-z+_]+)\s*(?:\((.*)\))?\s*$")


class MethodStringError(ValueError):
    pass


def parse_method(text: str) -> tuple[str, dict]:
    """``"fqe(class=tabular,U=auto)"`` -> ``("fqe", {"class": "tabular", "U": "auto"})``."""
    m = _METHOD_RE.match(text)
    if not m:
        raise MethodStringError(f"cannot parse method string {text!r}")
    name, body = m.group(1), m.group(2)
    kwargs = {}
    if body:
        for part in body.split(","):
            if not part.strip():
                continue
            if "=" not in part:
                raise MethodStringError(f"expected key=value in {text!r}")
            k, v = part.split("=", 1)
            kwargs[k.strip()] = _coerce(v.strip())
    return name, kwargs


def _coerce(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def rank(scores, descending: bool) -> list[int]:
    """Stable ranking; non-finite scores go last, ties keep the lower index first."""
    s = np.asarray(scores, dtype=float)
    key = -s if descending else s.copy()
    key[~np.isfinite(s)] = np.inf
    if not descending:
        key[np.isnan(s)] = np.inf
    return [int(i) for i in np.lexsort((np.arange(len(s)), key))]


@dataclass
class SelectionReport:
    method: str
    scores: list
    ranking: list
    chosen: list
    descending: bool = True
    config: dict = field(default_factory=dict)
    seed: int | None = None
    details: list = field(default_factory=list)

    def __post_init__(self):
        if sorted(self.ranking) != list(range(len(self.scores))):
            raise ValueError("ranking must be a permutation of candidate indices")
        if self.chosen != self.ranking[: len(self.chosen)]:
            raise ValueError("chosen indices must be a prefix of the ranking")

    @property
    def best(self) -> int:
        return self.chosen[0]

    def top(self, k: int) -> list[int]:
        return self.ranking[:k]

    def to_json(self) -> dict:
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return str(x)
            return x
        return {
            "method": self.method,
            "scores": [clean(float(s)) for s in self.scores],
            "ranking": self.ranking,
            "chosen": self.chosen,
            "descending": self.descending,
            "config": self.config,
            "seed": self.seed,
            "details": self.details,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SelectionReport":
        return cls(d["method"], [float(s) for s in d["scores"]], list(d["ranking"]), list(d["chosen"]),
                   d.get("descending", True), d.get("config", {}), d.get("seed"), d.get("details", []))


def make_report(method: str, scores, descending: bool, k: int = 1, **kw) -> SelectionReport:
    order = rank(scores, descending)
    return SelectionReport(method, [float(s) for s in scores], order, order[:k], descending, **kw)
