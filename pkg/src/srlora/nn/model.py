"""Desk-scale pre-norm transformer classifier with q/v/o adapter slots."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..adapter import LoraAdapter, init_adapter
from ..bundle import WeightBundle
from ..errors import EmptyDataset, PlanMismatch, ShapeMismatch
from ..linalg import singular_values
from .tape import Tape, Var

ADAPTABLE_ROLES = ("query", "value", "output")
PROJECTIONS = ("query", "key", "value", "output")


@dataclass
class ModelConfig:
    layers: int = 4
    model_dim: int = 64
    heads: int = 4
    mlp_dim: int = 128
    seq_len: int = 16
    num_classes: int = 3
    input_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("layers", "model_dim", "heads", "mlp_dim", "seq_len", "num_classes", "input_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


@dataclass
class ForwardResult:
    logits: np.ndarray
    features: np.ndarray
    attention: list[np.ndarray] = field(default_factory=list)


def projection_name(layer: int, role: str) -> str:
    return f"layers.{layer}.attn.{role}"


def adapter_names(layer: int, role: str) -> tuple[str, str]:
    base = projection_name(layer, role)
    return f"{base}.lora_a", f"{base}.lora_b"


class ToyTransformer:
    """Parameters live in ``params`` (name -> float64 array) with (layer, role) tags.

    Tensors named in ``frozen`` receive no gradient. Adapters may be attached
    to the query, value and output projections only.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 tags: dict[str, tuple[int | None, str]] | None = None):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self.tags: dict[str, tuple[int | None, str]] = {}
        self.frozen: set[str] = set()
        self.adapters: dict[tuple[int, str], LoraAdapter] = {}
        if params is None:
            self._init_params()
        else:
            self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            self.tags = dict(tags)

    def _add(self, name, value, layer, role):
        self.params[name] = value
        self.tags[name] = (layer, role)

    def _init_params(self):
        c = self.config
        rng = np.random.default_rng(c.seed)
        d = c.model_dim

        def normal(shape, fan_in):
            return rng.standard_normal(shape) / math.sqrt(fan_in)

        self._add("embed.weight", normal((d, c.input_dim), c.input_dim), None, "embed")
        self._add("embed.bias", np.zeros(d), None, "bias")
        self._add("embed.pos", 0.1 * rng.standard_normal((c.seq_len, d)), None, "embed")
        for layer in range(1, c.layers + 1):
            p = f"layers.{layer}"
            self._add(f"{p}.norm1.gain", np.ones(d), layer, "norm")
            self._add(f"{p}.norm1.bias", np.zeros(d), layer, "norm")
            for role in PROJECTIONS:
                self._add(projection_name(layer, role), normal((d, d), d), layer, role)
            self._add(f"{p}.norm2.gain", np.ones(d), layer, "norm")
            self._add(f"{p}.norm2.bias", np.zeros(d), layer, "norm")
            self._add(f"{p}.mlp_in.weight", normal((c.mlp_dim, d), d), layer, "mlp_in")
            self._add(f"{p}.mlp_in.bias", np.zeros(c.mlp_dim), layer, "bias")
            self._add(f"{p}.mlp_out.weight", normal((d, c.mlp_dim), c.mlp_dim), layer, "mlp_out")
            self._add(f"{p}.mlp_out.bias", np.zeros(d), layer, "bias")
        self._add("norm.gain", np.ones(d), None, "norm")
        self._add("norm.bias", np.zeros(d), None, "norm")
        self.attach_classifier(c.num_classes, c.seed)

    # -- structure ------------------------------------------------------
    def attach_classifier(self, num_classes: int, seed: int, scale: float = 0.01) -> None:
        """Replace the task head with a fresh seeded one."""
        rng = np.random.default_rng([seed, 7])
        self.config.num_classes = num_classes
        self._add("classifier.weight", scale * rng.standard_normal((num_classes, self.config.model_dim)),
                  None, "classifier")
        self._add("classifier.bias", np.zeros(num_classes), None, "classifier")

    def trainable_names(self) -> list[str]:
        names = [n for n in self.params if n not in self.frozen]
        for (layer, role) in self.adapter_keys():
            names.extend(adapter_names(layer, role))
        return names

    def freeze(self, names=None) -> None:
        self.frozen |= set(self.params if names is None else names)

    def unfreeze(self, names=None) -> None:
        self.frozen -= set(self.params if names is None else names)

    def adapter_keys(self) -> list[tuple[int, str]]:
        order = {r: i for i, r in enumerate(ADAPTABLE_ROLES)}
        return sorted(self.adapters, key=lambda k: (k[0], order[k[1]]))

    def attach_adapter(self, layer: int, role: str, adapter: LoraAdapter) -> None:
        if role not in ADAPTABLE_ROLES:
            raise ValueError(f"adapters attach to {ADAPTABLE_ROLES} only, not {role!r}")
        w = self.params.get(projection_name(layer, role))
        if w is None:
            raise PlanMismatch(f"model has no projection for layer {layer} {role}")
        if w.shape != (adapter.d, adapter.k):
            raise PlanMismatch(f"adapter shape ({adapter.d}, {adapter.k}) != weight {w.shape} "
                               f"at layer {layer} {role}")
        self.adapters[(layer, role)] = adapter

    def attach_plan(self, plan, seed: int, spu: bool = False) -> None:
        """Create one fresh adapter per plan entry, seeded per (layer, role)."""
        for e in plan.entries:
            w = self.params.get(projection_name(e.layer, e.role))
            if w is None:
                raise PlanMismatch(f"model has no projection for layer {e.layer} {e.role}")
            if w.shape != (e.d, e.k):
                raise PlanMismatch(f"plan shape ({e.d}, {e.k}) != weight {w.shape} at layer {e.layer} {e.role}")
            adapter_seed = [seed, e.layer, ADAPTABLE_ROLES.index(e.role)]
            self.attach_adapter(e.layer, e.role, init_adapter(e.d, e.k, e.rank, adapter_seed, spu=spu))

    def base_weight(self, layer: int, role: str) -> np.ndarray:
        return self.params[projection_name(layer, role)]

    def effective_weight(self, layer: int, role: str) -> np.ndarray:
        """Pretrained weight plus the full-rank adapter product, if any."""
        w = self.base_weight(layer, role)
        adapter = self.adapters.get((layer, role))
        if adapter is None:
            return w
        return w + adapter.b @ adapter.a

    def merge_adapters(self) -> None:
        for (layer, role), adapter in list(self.adapters.items()):
            name = projection_name(layer, role)
            self.params[name] = self.params[name] + adapter.b @ adapter.a
        self.adapters.clear()

    def copy(self) -> "ToyTransformer":
        clone = ToyTransformer(ModelConfig(**asdict(self.config)), self.params, self.tags)
        clone.frozen = set(self.frozen)
        clone.adapters = {k: a.copy() for k, a in self.adapters.items()}
        return clone

    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- forward ---------------------------------------------------------
    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c = self.config
        if x.ndim != 3 or x.shape[1:] != (c.seq_len, c.input_dim):
            raise ShapeMismatch(f"expected input (batch, {c.seq_len}, {c.input_dim}), got {x.shape}")
        return x

    def build(self, tape: Tape, x, keep_attention: bool = False):
        """Record the forward pass on ``tape``; returns (logits, features, attention)."""
        x = self._check_input(x)
        c = self.config
        leaves: dict[str, Var] = {}

        def p(name):
            var = leaves.get(name)
            if var is None:
                var = tape.leaf(self.params[name], name, name not in self.frozen)
                leaves[name] = var
            return var

        def project(h, layer, role):
            y = tape.linear(h, p(projection_name(layer, role)))
            adapter = self.adapters.get((layer, role))
            if adapter is None or adapter.active_rank == 0:
                return y
            a_name, b_name = adapter_names(layer, role)
            a = tape.leaf(adapter.a, a_name, True)
            b = tape.leaf(adapter.b, b_name, True)
            s = adapter.active_rank
            if s < adapter.r:
                a = tape.slice(a, (slice(0, s), slice(None)))
                b = tape.slice(b, (slice(None), slice(0, s)))
            return tape.add(y, tape.linear(tape.linear(h, a), b))

        batch = x.shape[0]
        d, nh, dh, t = c.model_dim, c.heads, c.head_dim, c.seq_len
        inv_sqrt = 1.0 / math.sqrt(dh)
        attention = []

        h = tape.add(tape.add(tape.linear(tape.leaf(x), p("embed.weight")), p("embed.bias")), p("embed.pos"))
        for layer in range(1, c.layers + 1):
            pre = f"layers.{layer}"
            a = tape.layernorm(h, p(f"{pre}.norm1.gain"), p(f"{pre}.norm1.bias"))
            q = project(a, layer, "query")
            k = tape.linear(a, p(projection_name(layer, "key")))
            v = project(a, layer, "value")

            def heads(z):
                return tape.swapaxes(tape.reshape(z, (batch, t, nh, dh)), 1, 2)

            q, k, v = heads(q), heads(k), heads(v)
            scores = tape.scale(tape.matmul(q, tape.swapaxes(k, 2, 3)), inv_sqrt)
            att = tape.softmax(scores)
            if keep_attention:
                attention.append(att.value)
            ctx = tape.reshape(tape.swapaxes(tape.matmul(att, v), 1, 2), (batch, t, d))
            h = tape.add(h, project(ctx, layer, "output"))
            m = tape.layernorm(h, p(f"{pre}.norm2.gain"), p(f"{pre}.norm2.bias"))
            u = tape.gelu(tape.add(tape.linear(m, p(f"{pre}.mlp_in.weight")), p(f"{pre}.mlp_in.bias")))
            h = tape.add(h, tape.add(tape.linear(u, p(f"{pre}.mlp_out.weight")), p(f"{pre}.mlp_out.bias")))
        h = tape.layernorm(h, p("norm.gain"), p("norm.bias"))
        features = tape.mean(h, axis=1)
        logits = tape.add(tape.linear(features, p("classifier.weight")), p("classifier.bias"))
        return logits, features, attention

    def forward(self, x, keep_attention: bool = False) -> ForwardResult:
        tape = Tape(enabled=False)
        logits, features, attention = self.build(tape, x, keep_attention)
        return ForwardResult(logits.value, features.value, attention)

    def loss(self, tape: Tape, logits: Var, labels: np.ndarray) -> Var:
        """Cross-entropy for integer labels, sigmoid BCE for (batch, classes) 0/1 targets."""
        labels = np.asarray(labels)
        if labels.ndim == 2:
            return tape.binary_cross_entropy(logits, labels)
        return tape.cross_entropy(logits, labels)

    # -- bundle round trip -------------------------------------------------
    def to_bundle(self, include_adapters: bool = True) -> WeightBundle:
        bundle = WeightBundle(meta={"model_config": asdict(self.config)})
        for name, value in self.params.items():
            layer, role = self.tags[name]
            bundle.add(name, value, layer=layer, role=role)
        if include_adapters:
            for layer, role in self.adapter_keys():
                adapter = self.adapters[(layer, role)]
                a_name, b_name = adapter_names(layer, role)
                bundle.add(a_name, adapter.a, layer=layer, role="lora_a", target=role)
                bundle.add(b_name, adapter.b, layer=layer, role="lora_b", target=role)
        return bundle

    @classmethod
    def from_bundle(cls, bundle: WeightBundle, config: ModelConfig | None = None) -> "ToyTransformer":
        if config is None:
            raw = bundle.meta.get("model_config")
            if raw is None:
                raise ShapeMismatch("bundle carries no model_config; pass one explicitly")
            config = ModelConfig(**raw)
        params, tags, factors = {}, {}, {}
        for e in bundle.entries():
            if e.role in ("lora_a", "lora_b"):
                factors[(e.layer, e.target, e.role)] = e.array
                continue
            params[e.name] = e.array
            tags[e.name] = (e.layer, e.role)
        model = cls(config, params, tags)
        expected = cls(ModelConfig(**asdict(config)))
        for name, value in expected.params.items():
            if name not in model.params:
                raise ShapeMismatch(f"bundle lacks tensor {name!r}")
            if model.params[name].shape != value.shape:
                raise ShapeMismatch(f"tensor {name!r} has shape {model.params[name].shape}, "
                                    f"expected {value.shape}")
        model.config.num_classes = model.params["classifier.weight"].shape[0]
        for (layer, role, kind) in factors:
            if kind != "lora_a":
                continue
            a = factors[(layer, role, "lora_a")]
            b = factors.get((layer, role, "lora_b"))
            if b is None:
                raise ShapeMismatch(f"adapter at layer {layer} {role} lacks its lora_b factor")
            model.attach_adapter(layer, role, LoraAdapter(np.array(b), np.array(a)))
        return model


def forward(model: ToyTransformer, x, keep_attention: bool = False) -> ForwardResult:
    return model.forward(x, keep_attention)


@dataclass
class FeatureSpectrum:
    singular_values: np.ndarray
    count_above: int
    rel_threshold: float


def extract_features(model: ToyTransformer, inputs, batch_size: int = 64) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[0] == 0:
        raise EmptyDataset("no input sequences to extract features from")
    chunks = [model.forward(inputs[i:i + batch_size]).features
              for i in range(0, inputs.shape[0], batch_size)]
    return np.concatenate(chunks, axis=0)


def extract_feature_spectrum(model: ToyTransformer, inputs, rel_threshold: float = 1e-3,
                             batch_size: int = 64) -> FeatureSpectrum:
    """Singular values of the stacked pre-classifier features, largest first.

    Values below ``sigma_1 * max(N, d) * eps`` are set to zero.
    """
    feats = extract_features(model, inputs, batch_size)
    sigma = singular_values(feats)
    # values at round-off level are reported as exact zeros
    sigma[sigma <= sigma[0] * max(feats.shape) * np.finfo(np.float64).eps] = 0.0
    count = int(np.count_nonzero(sigma > rel_threshold * sigma[0])) if sigma[0] > 0 else 0
    return FeatureSpectrum(sigma, count, rel_threshold)


__all__ = [
    "FeatureSpectrum",
    "ForwardResult",
    "ModelConfig",
    "ToyTransformer",
    "adapter_names",
    "extract_feature_spectrum",
    "extract_features",
    "forward",
    "projection_name",
]
