"""Tensor inventories of reference architectures and synthetic bundles built from them."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .bundle import WeightBundle


class TensorSpec(NamedTuple):
    name: str
    layer: int | None
    role: str
    shape: tuple[int, ...]


def vit_inventory(layers: int = 12, dim: int = 768, mlp_dim: int = 3072, patch: int = 16,
                  channels: int = 3, image: int = 224) -> list[TensorSpec]:
    """Headless ViT tensor list with q/k/v split into separate projections.

    The defaults give ViT-B/16: 85,798,656 parameters.
    """
    tokens = (image // patch) ** 2 + 1
    inv = [
        TensorSpec("patch_embed.weight", None, "embed", (dim, channels, patch, patch)),
        TensorSpec("patch_embed.bias", None, "bias", (dim,)),
        TensorSpec("cls_token", None, "embed", (1, dim)),
        TensorSpec("pos_embed", None, "embed", (tokens, dim)),
    ]
    for layer in range(1, layers + 1):
        p = f"blocks.{layer}"
        inv += [
            TensorSpec(f"{p}.norm1.weight", layer, "norm", (dim,)),
            TensorSpec(f"{p}.norm1.bias", layer, "norm", (dim,)),
        ]
        for role in ("query", "key", "value", "output"):
            inv += [
                TensorSpec(f"{p}.attn.{role}.weight", layer, role, (dim, dim)),
                TensorSpec(f"{p}.attn.{role}.bias", layer, "bias", (dim,)),
            ]
        inv += [
            TensorSpec(f"{p}.norm2.weight", layer, "norm", (dim,)),
            TensorSpec(f"{p}.norm2.bias", layer, "norm", (dim,)),
            TensorSpec(f"{p}.mlp.fc1.weight", layer, "mlp_in", (mlp_dim, dim)),
            TensorSpec(f"{p}.mlp.fc1.bias", layer, "bias", (mlp_dim,)),
            TensorSpec(f"{p}.mlp.fc2.weight", layer, "mlp_out", (dim, mlp_dim)),
            TensorSpec(f"{p}.mlp.fc2.bias", layer, "bias", (dim,)),
        ]
    inv += [
        TensorSpec("norm.weight", None, "norm", (dim,)),
        TensorSpec("norm.bias", None, "norm", (dim,)),
    ]
    return inv


def decaying_spectrum_matrix(rng: np.random.Generator, d: int, k: int, decay: float = 0.5) -> np.ndarray:
    """Random matrix whose column scales decay as ``i ** -decay`` before mixing."""
    n = min(d, k)
    scales = np.arange(1, n + 1, dtype=np.float64) ** -decay
    left = rng.standard_normal((d, n)) * scales
    right = rng.standard_normal((n, k))
    return left @ right / np.sqrt(n * k)


def synthetic_vit_bundle(seed: int = 0, layers: int = 12, dim: int = 768, mlp_dim: int = 3072,
                         attention_only: bool = False) -> WeightBundle:
    """ViT-shaped bundle with seeded attention projections.

    Projection matrices get a decaying spectrum so stable ranks are
    well separated from 1 and from full rank; every other tensor is zero
    (norm gains one). With ``attention_only`` only the q/v/o projections
    are included.
    """
    rng = np.random.default_rng(seed)
    bundle = WeightBundle(meta={"architecture": f"vit-{layers}x{dim}", "seed": seed})
    for spec in vit_inventory(layers=layers, dim=dim, mlp_dim=mlp_dim):
        is_proj = spec.role in ("query", "key", "value", "output")
        if attention_only and spec.role not in ("query", "value", "output"):
            continue
        if is_proj:
            arr = decaying_spectrum_matrix(rng, *spec.shape)
        elif spec.role == "norm" and spec.name.endswith("weight"):
            arr = np.ones(spec.shape)
        else:
            arr = np.zeros(spec.shape)
        bundle.add(spec.name, arr, layer=spec.layer, role=spec.role)
    return bundle


def identity_bundle(layers: int, width: int, roles=("query", "key", "value", "output")) -> WeightBundle:
    bundle = WeightBundle(meta={"architecture": "identity"})
    for layer in range(1, layers + 1):
        for role in roles:
            bundle.add(f"blocks.{layer}.attn.{role}.weight", np.eye(width), layer=layer, role=role)
    return bundle
