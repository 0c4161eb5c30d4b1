"""Two-file checkpoint container: ``manifest.json`` plus ``weights.bin``.

The payload is a contiguous little-endian float32 blob, row-major per
tensor. Offsets and lengths in the manifest are byte counts. Tensors are
widened to float64 lazily on first access and narrowed again on save, so
``save(load(path))`` reproduces the payload byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    BundleError,
    ManifestParse,
    OffsetOverlap,
    TruncatedPayload,
    UnknownDtype,
)

MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "weights.bin"
FORMAT_TAG = "srlora-bundle"
FORMAT_VERSION = 1

ADAPTER_ROLES = frozenset({"lora_a", "lora_b"})
# roles whose (layer, role) pair must be unique among 2-D tensors
PROJECTION_ROLES = ("query", "key", "value", "output")

_DTYPE = np.dtype("<f4")


@dataclass
class TensorEntry:
    name: str
    layer: int | None
    role: str
    shape: tuple[int, ...]
    target: str | None = None
    _array: np.ndarray | None = field(default=None, repr=False)
    _raw: np.ndarray | None = field(default=None, repr=False)

    @property
    def array(self) -> np.ndarray:
        if self._array is None:
            self._array = np.array(self._raw, dtype=np.float64).reshape(self.shape)
        return self._array

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def f32_bytes(self) -> bytes:
        if self._array is None and self._raw is not None:
            return np.asarray(self._raw, dtype=_DTYPE).tobytes()
        narrow = np.ascontiguousarray(self.array, dtype=_DTYPE)
        if not np.all(np.isfinite(narrow)):
            raise BundleError("tensor is not finite in float32", self.name)
        return narrow.tobytes()


class WeightBundle:
    """Ordered, named collection of tensors with layer/role tags."""

    def __init__(self, meta: dict | None = None):
        self.meta: dict = dict(meta or {})
        self._entries: dict[str, TensorEntry] = {}

    def add(self, name: str, array, layer: int | None = None, role: str = "other",
            target: str | None = None) -> TensorEntry:
        if name in self._entries:
            raise BundleError("duplicate tensor name", name)
        arr = np.array(array, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise BundleError("tensor contains NaN or Inf", name)
        if layer is not None and arr.ndim == 2 and role in PROJECTION_ROLES:
            if self.find(layer, role) is not None:
                raise BundleError(f"duplicate (layer, role) = ({layer}, {role})", name)
        entry = TensorEntry(name, layer, role, tuple(int(s) for s in arr.shape), target, _array=arr)
        self._entries[name] = entry
        return entry

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].array

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> TensorEntry:
        return self._entries[name]

    def entries(self) -> Iterator[TensorEntry]:
        return iter(list(self._entries.values()))

    def names(self) -> list[str]:
        return list(self._entries)

    def find(self, layer: int, role: str) -> TensorEntry | None:
        for e in self._entries.values():
            if e.layer == layer and e.role == role and len(e.shape) == 2:
                return e
        return None

    def by_role(self, role: str) -> list[TensorEntry]:
        return [e for e in self._entries.values() if e.role == role]

    def layers(self) -> list[int]:
        return sorted({e.layer for e in self._entries.values()
                       if e.layer is not None and e.role in PROJECTION_ROLES})

    @property
    def backbone_total(self) -> int:
        return sum(e.size for e in self._entries.values() if e.role not in ADAPTER_ROLES)

    def role_total(self, role: str) -> int:
        return sum(e.size for e in self._entries.values() if e.role == role)


def _manifest_record(entry: TensorEntry, offset: int, length: int) -> dict:
    rec = {
        "name": entry.name,
        "layer": entry.layer,
        "role": entry.role,
        "shape": list(entry.shape),
        "dtype": "f32",
        "offset": offset,
        "length": length,
    }
    if entry.target is not None:
        rec["target"] = entry.target
    return rec


def save_bundle(bundle: WeightBundle, path) -> Path:
    """Write ``bundle`` into directory ``path`` (created if missing)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    # narrow everything first: entries may be lazy views of the file about to be overwritten
    blobs = [(entry, entry.f32_bytes()) for entry in bundle.entries()]
    records = []
    offset = 0
    with open(path / PAYLOAD_NAME, "wb") as fh:
        for entry, blob in blobs:
            fh.write(blob)
            records.append(_manifest_record(entry, offset, len(blob)))
            offset += len(blob)
    manifest = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "backbone_total": bundle.backbone_total,
        "meta": bundle.meta,
        "tensors": records,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _require(rec: dict, key: str, kind, name: str | None):
    if key not in rec:
        raise ManifestParse(f"missing field {key!r}", name)
    value = rec[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ManifestParse(f"field {key!r} must be an integer", name)
    if kind is not int and not isinstance(value, kind):
        raise ManifestParse(f"field {key!r} has the wrong type", name)
    return value


def load_bundle(path) -> WeightBundle:
    """Read a bundle directory, validating the manifest against the payload."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except FileNotFoundError as exc:
        raise ManifestParse(f"no manifest at {path / MANIFEST_NAME}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestParse(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), list):
        raise ManifestParse("manifest must be an object with a 'tensors' list")
    payload_path = path / PAYLOAD_NAME
    if not payload_path.exists():
        raise TruncatedPayload(f"no payload at {payload_path}")
    payload_size = payload_path.stat().st_size
    if payload_size % _DTYPE.itemsize:
        raise TruncatedPayload(f"payload size {payload_size} is not a multiple of 4")
    blob = (np.memmap(payload_path, dtype=_DTYPE, mode="r") if payload_size
            else np.zeros(0, dtype=_DTYPE))

    bundle = WeightBundle(meta=manifest.get("meta") or {})
    seen_pairs: set[tuple[int, str]] = set()
    prev_end = 0
    for i, rec in enumerate(manifest["tensors"]):
        if not isinstance(rec, dict):
            raise ManifestParse(f"tensor record {i} is not an object")
        name = rec.get("name")
        if not isinstance(name, str) or not name:
            raise ManifestParse(f"tensor record {i} has no name")
        dtype = _require(rec, "dtype", str, name)
        if dtype != "f32":
            raise UnknownDtype(f"unsupported dtype {dtype!r}", name)
        shape = _require(rec, "shape", list, name)
        if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape):
            raise ManifestParse("shape must be a list of non-negative integers", name)
        offset = _require(rec, "offset", int, name)
        length = _require(rec, "length", int, name)
        role = _require(rec, "role", str, name)
        layer = rec.get("layer")
        if layer is not None and (isinstance(layer, bool) or not isinstance(layer, int)):
            raise ManifestParse("layer must be an integer or null", name)
        if offset < 0 or length < 0 or offset % _DTYPE.itemsize:
            raise ManifestParse("offset/length must be non-negative and 4-byte aligned", name)
        if length != math.prod(shape) * _DTYPE.itemsize:
            raise ManifestParse(f"length {length} does not match shape {shape}", name)
        if offset < prev_end:
            raise OffsetOverlap(f"offset {offset} overlaps the previous tensor ending at {prev_end}", name)
        if offset + length > payload_size:
            raise TruncatedPayload(
                f"tensor spans bytes [{offset}, {offset + length}) past payload end {payload_size}", name)
        if name in bundle:
            raise ManifestParse("duplicate tensor name", name)
        if layer is not None and role in PROJECTION_ROLES and len(shape) == 2:
            if (layer, role) in seen_pairs:
                raise ManifestParse(f"duplicate (layer, role) = ({layer}, {role})", name)
            seen_pairs.add((layer, role))
        prev_end = offset + length
        start = offset // _DTYPE.itemsize
        raw = blob[start:start + length // _DTYPE.itemsize]
        bundle._entries[name] = TensorEntry(name, layer, role, tuple(shape), rec.get("target"), _raw=raw)

    declared = manifest.get("backbone_total")
    if declared is not None and declared != bundle.backbone_total:
        raise ManifestParse(
            f"declared backbone_total {declared} != counted {bundle.backbone_total}")
    return bundle
