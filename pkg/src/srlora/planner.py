"""Per-layer adapter rank allocation from pretrained stable ranks."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

from .adapter import trainable_params
from .bundle import WeightBundle
from .errors import MissingWeight
from .linalg import effective_rank, stable_rank

ADAPTED_ROLES = ("query", "value", "output")
ROUNDING_MODES = ("ceil", "floor", "nearest")
_ROLE_ORDER = {role: i for i, role in enumerate(ADAPTED_ROLES)}


class WeightKey(NamedTuple):
    layer: int
    role: str

    def sort_key(self) -> tuple[int, int]:
        return (self.layer, _ROLE_ORDER[self.role])

    def __str__(self) -> str:
        return f"layer {self.layer} {self.role}"


@dataclass
class PlanEntry:
    layer: int
    role: str
    d: int
    k: int
    stable_rank: float | None
    rank: int
    clamped: bool = False

    @property
    def key(self) -> WeightKey:
        return WeightKey(self.layer, self.role)

    @property
    def params(self) -> int:
        return trainable_params(self.d, self.k, self.rank)


@dataclass
class RankPlan:
    strategy: str
    rounding: str
    backbone_total: int
    entries: list[PlanEntry] = field(default_factory=list)
    head_params: int = 0

    @property
    def total_trainable(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def trainable_ratio(self) -> float:
        return self.total_trainable / self.backbone_total if self.backbone_total else 0.0

    @property
    def clamped(self) -> list[WeightKey]:
        return [e.key for e in self.entries if e.clamped]

    def rank_for(self, layer: int, role: str) -> int:
        for e in self.entries:
            if e.layer == layer and e.role == role:
                return e.rank
        raise MissingWeight(WeightKey(layer, role))

    def entry(self, layer: int, role: str) -> PlanEntry:
        for e in self.entries:
            if e.layer == layer and e.role == role:
                return e
        raise MissingWeight(WeightKey(layer, role))

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "rounding": self.rounding,
            "backbone_total": self.backbone_total,
            "entries": [
                {"layer": e.layer, "role": e.role, "d": e.d, "k": e.k,
                 "stable_rank": e.stable_rank, "rank": e.rank}
                for e in self.entries
            ],
            "total_trainable": self.total_trainable,
            "trainable_ratio": self.trainable_ratio,
            "head_params": self.head_params,
            "clamped": [{"layer": k.layer, "role": k.role} for k in self.clamped],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RankPlan":
        clamped = {(c["layer"], c["role"]) for c in doc.get("clamped", [])}
        entries = [
            PlanEntry(e["layer"], e["role"], e["d"], e["k"], e["stable_rank"], e["rank"],
                      (e["layer"], e["role"]) in clamped)
            for e in doc["entries"]
        ]
        return cls(doc["strategy"], doc["rounding"], doc["backbone_total"], entries,
                   doc.get("head_params", 0))


def round_rank(value: float, rounding: str) -> int:
    if rounding == "ceil":
        return math.ceil(value)
    if rounding == "floor":
        return math.floor(value)
    if rounding == "nearest":
        return math.floor(value + 0.5)
    raise ValueError(f"unknown rounding mode {rounding!r}; expected one of {ROUNDING_MODES}")


def adapted_keys(bundle: WeightBundle) -> list[WeightKey]:
    """Every (layer, role) the plan must cover: q/v/o for layers 1..L."""
    layers = bundle.layers()
    if not layers:
        return []
    return [WeightKey(layer, role) for layer in range(1, max(layers) + 1) for role in ADAPTED_ROLES]


def _matrices(bundle: WeightBundle):
    out = []
    for key in adapted_keys(bundle):
        entry = bundle.find(key.layer, key.role)
        if entry is None:
            raise MissingWeight(key)
        out.append((key, entry))
    return out


def _stable_ranks(items, seed: int, workers: int | None) -> list[float]:
    def one(item):
        return stable_rank(item[1].array, seed=seed)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, items))
    return [one(item) for item in items]


def _clamp(rank: int, d: int, k: int) -> tuple[int, bool]:
    upper = min(d, k)
    clamped = min(max(rank, 1), upper)
    return clamped, clamped != rank


def plan_stable(bundle: WeightBundle, rounding: str = "ceil", seed: int = 0,
                workers: int | None = None) -> RankPlan:
    """Assign each q/v/o adapter the rounded stable rank of its pretrained weight."""
    if rounding not in ROUNDING_MODES:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    items = _matrices(bundle)
    sranks = _stable_ranks(items, seed, workers)
    entries = []
    for (key, entry), sr in zip(items, sranks):
        d, k = entry.shape
        rank, clamped = _clamp(round_rank(sr, rounding), d, k)
        entries.append(PlanEntry(key.layer, key.role, d, k, sr, rank, clamped))
    return RankPlan("stable", rounding, bundle.backbone_total, entries,
                    bundle.role_total("classifier"))


def plan_fixed(bundle: WeightBundle, r: int, with_stable_rank: bool = False, seed: int = 0,
               workers: int | None = None) -> RankPlan:
    """Uniform rank ``r`` everywhere, clamped to ``min(d, k)``.

    Stable ranks are only computed (for reference) when ``with_stable_rank``.
    """
    if r < 1:
        raise ValueError("fixed rank must be at least 1")
    items = _matrices(bundle)
    sranks = _stable_ranks(items, seed, workers) if with_stable_rank else [None] * len(items)
    entries = []
    for (key, entry), sr in zip(items, sranks):
        d, k = entry.shape
        rank, clamped = _clamp(r, d, k)
        entries.append(PlanEntry(key.layer, key.role, d, k, sr, rank, clamped))
    return RankPlan(f"fixed:{r}", "ceil", bundle.backbone_total, entries,
                    bundle.role_total("classifier"))


def budget_report(plan: RankPlan, backbone_total: int | None = None) -> dict:
    """Trainable-parameter accounting, overall and per layer.

    ``trainable_ratio`` excludes the task head; ``trainable_ratio_with_head``
    counts classifier tensors (already part of the backbone total) as trainable.
    """
    total = plan.backbone_total if backbone_total is None else backbone_total
    if total <= 0:
        raise ValueError("backbone_total must be positive")
    per_layer: dict[int, dict] = {}
    for e in plan.entries:
        row = per_layer.setdefault(e.layer, {"layer": e.layer, "params": 0, "ranks": {}})
        row["params"] += e.params
        row["ranks"][e.role] = e.rank
    trainable = plan.total_trainable
    return {
        "strategy": plan.strategy,
        "total_trainable": trainable,
        "backbone_total": total,
        "trainable_ratio": trainable / total,
        "head_params": plan.head_params,
        "trainable_ratio_with_head": (trainable + plan.head_params) / total,
        "clamped": [str(k) for k in plan.clamped],
        "per_layer": [per_layer[layer] for layer in sorted(per_layer)],
    }


def verify_lower_bound(plan: RankPlan, bundle: WeightBundle, rel_threshold: float = 1e-12,
                       slack: float = 1e-9) -> bool:
    """True iff every entry's stable rank is at most its numerical rank."""
    for e in plan.entries:
        entry = bundle.find(e.layer, e.role)
        if entry is None:
            raise MissingWeight(e.key)
        sr = e.stable_rank if e.stable_rank is not None else stable_rank(entry.array)
        if sr > effective_rank(entry.array, rel_threshold) + slack:
            return False
    return True


def parse_strategy(text: str) -> tuple[str, int | None]:
    """``"stable"`` or ``"fixed:R"`` -> (kind, R)."""
    if text == "stable":
        return "stable", None
    if text.startswith("fixed:"):
        try:
            r = int(text.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad fixed rank in strategy {text!r}") from None
        if r < 1:
            raise ValueError("fixed rank must be at least 1")
        return "fixed", r
    raise ValueError(f"unknown strategy {text!r}; expected 'stable' or 'fixed:R'")


def make_plan(bundle: WeightBundle, strategy: str, rounding: str = "ceil", seed: int = 0,
              workers: int | None = None) -> RankPlan:
    kind, r = parse_strategy(strategy)
    if kind == "stable":
        return plan_stable(bundle, rounding, seed=seed, workers=workers)
    return plan_fixed(bundle, r, seed=seed, workers=workers)
