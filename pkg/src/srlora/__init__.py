"""Stable-rank guided low-rank adaptation on a small numpy transformer."""

from .adapter import LoraAdapter, SpuSampler, apply_adapted, delta, init_adapter, merge, sample_active_rank
from .bundle import WeightBundle, load_bundle, save_bundle
from .linalg import effective_rank, frobenius_norm, pearson, spectral_norm, stable_rank, svd
from .planner import RankPlan, budget_report, make_plan, plan_fixed, plan_stable
from .synth import TaskSpec, generate
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "LoraAdapter", "SpuSampler", "apply_adapted", "delta", "init_adapter", "merge", "sample_active_rank",
    "WeightBundle", "load_bundle", "save_bundle",
    "effective_rank", "frobenius_norm", "pearson", "spectral_norm", "stable_rank", "svd",
    "RankPlan", "budget_report", "make_plan", "plan_fixed", "plan_stable",
    "TaskSpec", "generate", "TrainConfig", "train",
]
