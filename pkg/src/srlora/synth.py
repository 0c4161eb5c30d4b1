"""Seeded synthetic few-shot tasks with a domain-gap knob.

Source sequences are anisotropic Gaussian tokens labeled by a frozen
two-layer teacher. Target sequences are source draws multiplied on the
right by ``R(gap) = expm(gap * S)`` for a seeded skew-symmetric ``S``,
then relabeled by the same teacher with class offsets re-balanced for
that gap. ``gap = 0`` leaves inputs untouched;
``gap = 1`` applies the full seeded rotation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .bundle import WeightBundle

LABEL_MODES = ("multi_class", "multi_label")
SPLITS = ("pretrain", "adapt_train", "val", "test")
_SPLIT_STREAM = {name: i for i, name in enumerate(SPLITS)}
_MAX_ANGLE = 0.9 * np.pi


@dataclass(frozen=True)
class TaskSpec:
    input_dim: int = 16
    seq_len: int = 16
    num_classes: int = 3
    shots: int = 5
    gap: float = 1.0
    label_mode: str = "multi_class"
    seed: int = 0
    pretrain_size: int = 5000
    val_per_class: int = 10
    test_per_class: int = 50
    teacher_hidden: int = 32

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("shots must be at least 1")
        if not 0.0 <= self.gap <= 1.0:
            raise ValueError("gap must lie in [0, 1]")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}")
        if min(self.input_dim, self.seq_len, self.num_classes, self.pretrain_size) < 1:
            raise ValueError("dimensions and sizes must be positive")


@dataclass
class Split:
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class TaskData:
    spec: TaskSpec
    pretrain: Split
    adapt_train: Split
    val: Split
    test: Split

    def split(self, name: str) -> Split:
        return getattr(self, name)

    def to_bundle(self) -> WeightBundle:
        bundle = WeightBundle(meta={"task_spec": asdict(self.spec)})
        for name in SPLITS:
            s = self.split(name)
            bundle.add(f"{name}.inputs", s.inputs, role="input")
            bundle.add(f"{name}.labels", s.labels, role="label")
        return bundle

    @classmethod
    def from_bundle(cls, bundle: WeightBundle) -> "TaskData":
        spec = TaskSpec(**bundle.meta["task_spec"])
        splits = {}
        for name in SPLITS:
            labels = bundle[f"{name}.labels"]
            if spec.label_mode == "multi_class":
                labels = labels.astype(np.intp)
            splits[name] = Split(bundle[f"{name}.inputs"], labels)
        return cls(spec, **splits)


class SyntheticProcess:
    """The generative process shared by every task built from one seed."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        ss = np.random.SeedSequence(spec.seed)
        proc_seq, teacher_seq, rot_seq, calib_seq, self._split_root = ss.spawn(5)
        rng = np.random.default_rng(proc_seq)
        d = spec.input_dim
        self.token_scale = np.exp(rng.uniform(-1.0, 0.5, size=d))
        self.token_mean = rng.standard_normal(d) / np.sqrt(d)

        trng = np.random.default_rng(teacher_seq)
        h = spec.teacher_hidden
        self.w1 = trng.standard_normal((h, d)) * (2.0 / np.sqrt(d))
        self.b1 = trng.standard_normal(h) * 0.5
        self.w2 = trng.standard_normal((spec.num_classes, h)) * (4.0 / np.sqrt(h))

        rrng = np.random.default_rng(rot_seq)
        g = rrng.standard_normal((d, d))
        skew = g - g.T
        radius = float(np.max(np.abs(np.linalg.eigvals(skew)))) if d > 1 else 0.0
        self.skew = skew * (_MAX_ANGLE / radius) if radius > 0 else skew

        self._calib_seq = calib_seq
        self._calibrations: dict[float, tuple[np.ndarray, np.ndarray]] = {}
        self.bias, self.thresholds = self.calibration(0.0)

    # -- teacher -----------------------------------------------------------
    def _raw_logits(self, x: np.ndarray) -> np.ndarray:
        hidden = np.tanh(x @ self.w1.T + self.b1).mean(axis=1)
        return hidden @ self.w2.T

    def calibration(self, gap: float) -> tuple[np.ndarray, np.ndarray]:
        """Class offsets and multi-label thresholds for inputs at ``gap``.

        Offsets are shifted until argmax labels are roughly balanced on a fixed
        calibration draw; the teacher weights themselves never change.
        """
        gap = float(gap)
        if gap not in self._calibrations:
            rng = np.random.default_rng(self._calib_seq)
            n, c = 20_000, self.spec.num_classes
            logits = self._raw_logits(self.transform(self.draw_source(rng, n), gap))
            bias = np.zeros(c)
            for _ in range(60):
                freq = np.bincount(np.argmax(logits + bias, axis=1), minlength=c) / n
                bias -= 0.5 * np.log(np.maximum(freq, 1.0 / n) * c)
            self._calibrations[gap] = (bias, np.median(logits + bias, axis=0))
        return self._calibrations[gap]

    def teacher_logits(self, x: np.ndarray, gap: float = 0.0) -> np.ndarray:
        return self._raw_logits(x) + self.calibration(gap)[0]

    def labels(self, x: np.ndarray, gap: float = 0.0) -> np.ndarray:
        logits = self.teacher_logits(x, gap)
        if self.spec.label_mode == "multi_label":
            return (logits > self.calibration(gap)[1]).astype(np.float64)
        return np.argmax(logits, axis=1)

    # -- inputs ----------------------------------------------------------------
    def draw_source(self, rng: np.random.Generator, n: int) -> np.ndarray:
        s = self.spec
        z = rng.standard_normal((n, s.seq_len, s.input_dim))
        return z * self.token_scale + self.token_mean

    def rotation(self, gap: float) -> np.ndarray:
        return expm(gap * self.skew)

    def transform(self, x: np.ndarray, gap: float) -> np.ndarray:
        if gap == 0.0:
            return x
        return x @ self.rotation(gap)

    def source_second_moment(self) -> np.ndarray:
        """Per-token E[x^T x] of the source process."""
        return np.diag(self.token_scale ** 2) + np.outer(self.token_mean, self.token_mean)

    def split_rng(self, name: str) -> np.random.Generator:
        child = np.random.SeedSequence(self._split_root.entropy,
                                       spawn_key=self._split_root.spawn_key + (_SPLIT_STREAM[name],))
        return np.random.default_rng(child)

    def draw_split(self, name: str, per_class: Sequence[int], gap: float, chunk: int = 512) -> Split:
        """Quota-sample a class-balanced split (quota keyed on the argmax class)."""
        rng = self.split_rng(name)
        quota = np.array(per_class, dtype=np.int64)
        taken = np.zeros_like(quota)
        inputs, labels = [], []
        max_draws = 1000 * int(quota.sum()) + 100 * chunk
        drawn = 0
        while np.any(taken < quota):
            if drawn >= max_draws:
                short = [int(c) for c in np.flatnonzero(taken < quota)]
                raise RuntimeError(f"split {name!r}: classes {short} too rare to fill their quota")
            x = self.transform(self.draw_source(rng, chunk), gap)
            drawn += chunk
            cls = np.argmax(self.teacher_logits(x, gap), axis=1)
            lab = self.labels(x, gap)
            for i in range(chunk):
                c = cls[i]
                if taken[c] < quota[c]:
                    taken[c] += 1
                    inputs.append(x[i])
                    labels.append(lab[i])
        return Split(np.stack(inputs), np.stack(labels) if labels[0].ndim else np.array(labels))


def _balanced_counts(total: int, classes: int) -> list[int]:
    base, extra = divmod(total, classes)
    return [base + (1 if c < extra else 0) for c in range(classes)]


def generate(spec: TaskSpec) -> TaskData:
    """Pretrain split from the source process; few-shot splits from the target."""
    proc = SyntheticProcess(spec)
    c = spec.num_classes
    return TaskData(
        spec=spec,
        pretrain=proc.draw_split("pretrain", _balanced_counts(spec.pretrain_size, c), 0.0),
        adapt_train=proc.draw_split("adapt_train", [spec.shots] * c, spec.gap),
        val=proc.draw_split("val", [spec.val_per_class] * c, spec.gap),
        test=proc.draw_split("test", [spec.test_per_class] * c, spec.gap),
    )


def gap_sweep(spec: TaskSpec, gaps: Sequence[float]) -> list[TaskData]:
    return [generate(replace(spec, gap=float(g))) for g in gaps]


def mean_embedding_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Distance between mean token embeddings (linear-kernel MMD)."""
    mx = np.asarray(x).reshape(-1, np.shape(x)[-1]).mean(axis=0)
    my = np.asarray(y).reshape(-1, np.shape(y)[-1]).mean(axis=0)
    return float(np.linalg.norm(mx - my))
