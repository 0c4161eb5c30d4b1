"""AdamW + cosine-annealing training with SPU sampling and stable-rank tracking."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adapter import SpuSampler, sample_active_rank
from .errors import NonFiniteLoss, PlanMismatch, ShapeMismatch
from .linalg import effective_rank, stable_rank
from .nn.model import ADAPTABLE_ROLES, ToyTransformer, adapter_names, projection_name
from .nn.tape import Tape
from .planner import RankPlan, plan_fixed
from .synth import Split, TaskData

MODES = ("full_ft", "linear_probe", "lora_fixed", "sr_lora", "sr_lora_no_spu")
ADAPTER_MODES = ("lora_fixed", "sr_lora", "sr_lora_no_spu")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr0: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "sr_lora"
    spu: bool | None = None
    fixed_rank: int = 8
    seed: int = 0
    spu_include_zero: bool = False
    rank_threshold: float = 1e-6
    audit_fraction: float = 0.01

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not (self.lr0 > 0 and 0 <= self.lr_min <= self.lr0):
            raise ValueError("need lr0 > 0 and 0 <= lr_min <= lr0")

    @property
    def use_spu(self) -> bool:
        if self.mode not in ADAPTER_MODES:
            return False
        if self.spu is not None:
            return self.spu
        return self.mode == "sr_lora"

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        mode = doc.get("mode", "sr_lora")
        if isinstance(mode, str) and mode.startswith("lora_fixed:"):
            doc["mode"] = "lora_fixed"
            doc["fixed_rank"] = int(mode.split(":", 1)[1])
        return cls(**doc)


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError("need total_steps >= 1 and 0 <= step <= total_steps")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, config: TrainConfig, masks: dict | None = None,
               no_decay: set[str] | frozenset = frozenset()) -> dict[str, np.ndarray]:
    """One in-place AdamW update with decoupled weight decay.

    ``masks`` maps a parameter name to an index expression; only that region
    (and its moment estimates) is touched. Step counts are kept per element
    so bias correction stays exact for regions skipped on earlier steps.
    """
    masks = masks or {}
    b1, b2 = config.beta1, config.beta2
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} does not match parameter {name!r} {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = np.zeros(p.shape, dtype=np.int64)
        idx = masks.get(name, ...)
        m, v, t = state.m[name], state.v[name], state.t[name]
        wd = 0.0 if name in no_decay else config.weight_decay
        gi = g[idx]
        if wd:
            p[idx] -= lr * wd * p[idx]
        t[idx] += 1
        m[idx] = b1 * m[idx] + (1.0 - b1) * gi
        v[idx] = b2 * v[idx] + (1.0 - b2) * gi * gi
        ti = t[idx]
        m_hat = m[idx] / (1.0 - b1 ** ti)
        v_hat = v[idx] / (1.0 - b2 ** ti)
        p[idx] -= lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return params


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    test_metric: float
    lr: float


@dataclass
class RunReport:
    config: dict
    mode: str
    rank_keys: list[tuple[int, str]]
    epochs: list[EpochRecord] = field(default_factory=list)
    ranks: list[tuple[int, int, str, float]] = field(default_factory=list)
    losses: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_val_metric: float = float("nan")
    test_metric: float = float("nan")
    total_steps: int = 0
    trainable_params: int = 0
    plan: dict | None = None
    delta_rank: dict[str, int] = field(default_factory=dict)
    spu_audited_steps: int = 0
    wall_time: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def initial_train_loss(self) -> float:
        return self.epochs[0].train_loss

    @property
    def final_train_loss(self) -> float:
        return self.epochs[-1].train_loss

    @property
    def mean_delta_rank(self) -> float:
        return float(np.mean(list(self.delta_rank.values()))) if self.delta_rank else 0.0

    def rank_series(self) -> dict[tuple[int, str], list[float]]:
        series: dict[tuple[int, str], list[float]] = {k: [] for k in self.rank_keys}
        for _, layer, role, value in self.ranks:
            series[(layer, role)].append(value)
        return series

    def to_dict(self) -> dict:
        """JSON-ready summary; wall time is left out so reruns are byte-identical."""
        drift = rank_drift(self)
        return {
            "mode": self.mode,
            "config": self.config,
            "plan": self.plan,
            "trainable_params": self.trainable_params,
            "total_steps": self.total_steps,
            "initial_train_loss": self.initial_train_loss,
            "final_train_loss": self.final_train_loss,
            "best_epoch": self.best_epoch,
            "best_val_metric": self.best_val_metric,
            "test_metric": self.test_metric,
            "epochs": [asdict(e) for e in self.epochs],
            "delta_rank": self.delta_rank,
            "mean_delta_rank": self.mean_delta_rank,
            "rank_drift": {f"{layer}:{role}": d["max_abs_drift"] for (layer, role), d in drift.items()},
            "spu_audited_steps": self.spu_audited_steps,
            **self.extras,
        }


def rank_drift(report: RunReport) -> dict[tuple[int, str], dict]:
    """Largest |srank_t - srank_0| per key over all logged epochs."""
    out = {}
    for key, series in report.rank_series().items():
        base = series[0] if series else 0.0
        out[key] = {"max_abs_drift": max((abs(v - base) for v in series), default=0.0),
                    "series": series}
    return out


def _metric(logits: np.ndarray, labels: np.ndarray) -> float:
    if labels.ndim == 2:
        return float(np.mean((logits > 0).astype(np.float64) == labels))
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: ToyTransformer, split: Split, batch_size: int = 128) -> tuple[float, float]:
    """(mean loss, metric) with every adapter at full rank."""
    saved = {k: a.active_rank for k, a in model.adapters.items()}
    for a in model.adapters.values():
        a.reset_active_rank()
    try:
        total, logits_all = 0.0, []
        n = len(split)
        for i in range(0, n, batch_size):
            x, y = split.inputs[i:i + batch_size], split.labels[i:i + batch_size]
            tape = Tape(enabled=False)
            logits, _, _ = model.build(tape, x)
            total += float(model.loss(tape, logits, y).value) * x.shape[0]
            logits_all.append(logits.value)
        return total / n, _metric(np.concatenate(logits_all), split.labels)
    finally:
        for k, s in saved.items():
            model.adapters[k].active_rank = s


def _param_refs(model: ToyTransformer) -> dict[str, np.ndarray]:
    refs = {n: model.params[n] for n in model.params if n not in model.frozen}
    for (layer, role), adapter in model.adapters.items():
        a_name, b_name = adapter_names(layer, role)
        refs[a_name] = adapter.a
        refs[b_name] = adapter.b
    return refs


def _no_decay(model: ToyTransformer) -> set[str]:
    return {n for n, (_, role) in model.tags.items() if role == "norm"}


def _rank_keys(model: ToyTransformer) -> list[tuple[int, str]]:
    return [(layer, role) for layer in range(1, model.config.layers + 1) for role in ADAPTABLE_ROLES]


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def configure_mode(model: ToyTransformer, plan: RankPlan | None, config: TrainConfig) -> RankPlan | None:
    """Set freeze flags and attach adapters for ``config.mode``; returns the plan used."""
    model.adapters.clear()
    classifier = [n for n, (_, role) in model.tags.items() if role == "classifier"]
    if config.mode == "full_ft":
        model.frozen = set()
        return None
    model.freeze()
    model.unfreeze(classifier)
    if config.mode == "linear_probe":
        return None
    if plan is None:
        if config.mode != "lora_fixed":
            raise PlanMismatch(f"mode {config.mode} needs a rank plan")
        plan = plan_fixed(model.to_bundle(include_adapters=False), config.fixed_rank)
    wanted = set(_rank_keys(model))
    have = {(e.layer, e.role) for e in plan.entries}
    if wanted != have:
        missing = sorted(wanted - have)
        extra = sorted(have - wanted)
        raise PlanMismatch(f"plan does not match model layers (missing {missing}, unexpected {extra})")
    model.attach_plan(plan, seed=config.seed, spu=config.use_spu)
    return plan


def train(model: ToyTransformer, task: TaskData, plan: RankPlan | None, config: TrainConfig) -> RunReport:
    """Fine-tune ``model`` in place on ``task.adapt_train``; returns the run record.

    The returned model state is the best epoch by validation metric.
    """
    started = time.perf_counter()
    plan = configure_mode(model, plan, config)
    keys = _rank_keys(model)
    report = RunReport(config=asdict(config), mode=config.mode, rank_keys=keys)
    if plan is not None:
        report.plan = {"strategy": plan.strategy, "total_trainable": plan.total_trainable,
                       "trainable_ratio": plan.trainable_ratio,
                       "ranks": {f"{e.layer}:{e.role}": e.rank for e in plan.entries}}
    refs = _param_refs(model)
    report.trainable_params = int(sum(v.size for v in refs.values()))
    no_decay = _no_decay(model)
    base_weights = {k: model.base_weight(*k).copy() for k in keys}

    samplers = {}
    if config.use_spu:
        for (layer, role), adapter in model.adapters.items():
            seed = _derived_seed(config.seed, 13, layer, ADAPTABLE_ROLES.index(role))
            samplers[(layer, role)] = SpuSampler(seed, adapter.r, config.spu_include_zero)

    def snapshot_ranks(epoch: int) -> None:
        for layer, role in keys:
            report.ranks.append((epoch, layer, role, stable_rank(model.effective_weight(layer, role))))

    def record_epoch(epoch: int, lr: float) -> EpochRecord:
        train_loss, _ = evaluate(model, task.adapt_train)
        _, val_metric = evaluate(model, task.val)
        _, test_metric = evaluate(model, task.test)
        rec = EpochRecord(epoch, train_loss, val_metric, test_metric, lr)
        report.epochs.append(rec)
        snapshot_ranks(epoch)
        return rec

    record_epoch(0, config.lr0)
    x_all, y_all = task.adapt_train.inputs, task.adapt_train.labels
    n = x_all.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    order_rng = np.random.default_rng([config.seed, 11])
    audit_steps: set[int] = set()
    if samplers and config.audit_fraction > 0 and total_steps > 0:
        count = min(total_steps, max(1, math.ceil(config.audit_fraction * total_steps)))
        audit_rng = np.random.default_rng([config.seed, 17])
        audit_steps = {int(i) for i in audit_rng.choice(total_steps, size=count, replace=False)}
    state = AdamWState()
    best = None
    step = 0
    lr = config.lr0
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            lr = cosine_lr(step, total_steps - 1, config.lr0, config.lr_min) if total_steps > 1 else config.lr0
            for key, sampler in samplers.items():
                sample_active_rank(sampler, model.adapters[key])
            tails = _adapter_tails(model) if step in audit_steps else None

            tape = Tape()
            logits, _, _ = model.build(tape, x_all[idx])
            loss = model.loss(tape, logits, y_all[idx])
            value = float(loss.value)
            if not math.isfinite(value):
                raise NonFiniteLoss(step, value)
            grads = tape.backward(loss)
            masks = {}
            for (layer, role), adapter in model.adapters.items():
                if adapter.active_rank < adapter.r:
                    a_name, b_name = adapter_names(layer, role)
                    masks[a_name] = (slice(0, adapter.active_rank), slice(None))
                    masks[b_name] = (slice(None), slice(0, adapter.active_rank))
            adamw_step(refs, grads, state, lr, config, masks, no_decay)
            if tails is not None:
                _check_tails(model, tails, step)
                report.spu_audited_steps += 1
            report.losses.append((step, value, lr))
            for adapter in model.adapters.values():
                adapter.reset_active_rank()
            step += 1
        rec = record_epoch(epoch, lr)
        if best is None or rec.val_metric > best[0].val_metric:
            best = (rec, {name: arr.copy() for name, arr in refs.items()})

    report.total_steps = step
    if best is None:
        chosen = report.epochs[0]
    else:
        chosen, saved = best
        for name, arr in saved.items():
            refs[name][...] = arr
    report.best_epoch = chosen.epoch
    report.best_val_metric = chosen.val_metric
    report.test_metric = chosen.test_metric
    for layer, role in keys:
        change = model.effective_weight(layer, role) - base_weights[(layer, role)]
        report.delta_rank[f"{layer}:{role}"] = effective_rank(change, config.rank_threshold) if np.any(change) else 0
    report.wall_time = time.perf_counter() - started
    return report


def _adapter_tails(model: ToyTransformer) -> dict:
    tails = {}
    for key, adapter in model.adapters.items():
        s = adapter.active_rank
        tails[key] = (adapter.a[s:, :].copy(), adapter.b[:, s:].copy())
    return tails


def _check_tails(model: ToyTransformer, tails: dict, step: int) -> None:
    for key, (a_tail, b_tail) in tails.items():
        adapter = model.adapters[key]
        s = adapter.active_rank
        if not (np.array_equal(adapter.a[s:, :], a_tail) and np.array_equal(adapter.b[:, s:], b_tail)):
            raise RuntimeError(f"SPU locality violated at step {step} for layer {key[0]} {key[1]}")


def pretrain(model: ToyTransformer, split: Split, epochs: int = 2, batch_size: int = 32,
             lr0: float = 1e-3, weight_decay: float = 5e-2, seed: int = 0) -> list[float]:
    """Full training of every tensor on the source split; returns per-step losses."""
    model.adapters.clear()
    model.frozen = set()
    config = TrainConfig(epochs=max(epochs, 1), batch_size=batch_size, lr0=lr0,
                         weight_decay=weight_decay, mode="full_ft", seed=seed)
    refs = _param_refs(model)
    no_decay = _no_decay(model)
    state = AdamWState()
    rng = np.random.default_rng([seed, 23])
    n = len(split)
    total = math.ceil(n / batch_size) * epochs
    losses = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            lr = cosine_lr(step, total - 1, lr0, 0.0) if total > 1 else lr0
            tape = Tape()
            logits, _, _ = model.build(tape, split.inputs[idx])
            loss = model.loss(tape, logits, split.labels[idx])
            value = float(loss.value)
            if not math.isfinite(value):
                raise NonFiniteLoss(step, value)
            adamw_step(refs, tape.backward(loss), state, lr, config, no_decay=no_decay)
            losses.append(value)
            step += 1
    return losses


def write_report(report: RunReport, out_dir) -> Path:
    """Emit report.json, ranks.csv and loss.csv into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    with open(out / "ranks.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "layer", "role", "stable_rank"])
        for epoch, layer, role, value in report.ranks:
            w.writerow([epoch, layer, role, repr(value)])
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in report.losses:
            w.writerow([step, repr(loss), repr(lr)])
    return out


__all__ = [
    "ADAPTER_MODES",
    "AdamWState",
    "EpochRecord",
    "MODES",
    "RunReport",
    "TrainConfig",
    "adamw_step",
    "configure_mode",
    "cosine_lr",
    "evaluate",
    "pretrain",
    "projection_name",
    "rank_drift",
    "train",
    "write_report",
]
