"""Named f64 tensor containers, the BTC-v1 file format, task vectors and
the task-arithmetic merge.

BTC-v1 layout::

    bytes 0..7    magic b"BOLTTC01"
    bytes 8..15   manifest length L, unsigned 64-bit little-endian
    bytes 16..16+L  UTF-8 JSON manifest
    payload       row-major little-endian f64 tensors, back to back

Entry offsets in the manifest are relative to the start of the payload.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ArchitectureError,
    BadMagicError,
    FormatError,
    ManifestMismatchError,
    TruncatedPayloadError,
    ValidationError,
)

MAGIC = b"BOLTTC01"
FORMAT_VERSION = 1
ROLES = ("checkpoint", "task_vector", "basis", "sigma", "dataset", "family")
_LE_F64 = np.dtype("<f8")
_HEADER = struct.Struct("<8sQ")


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=np.float64, order="C", copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class TensorEntry:
    name: str
    data: np.ndarray
    dtype: str = "f64"

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ValidationError("tensor entry needs a non-empty name")
        if self.dtype != "f64":
            raise ValidationError(f"unsupported dtype {self.dtype!r} for {self.name}")
        data = _frozen(self.data)
        if data.ndim not in (1, 2):
            raise ValidationError(f"{self.name}: only 1-D and 2-D tensors are supported")
        if data.size == 0:
            raise ValidationError(f"{self.name}: zero-size shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.data.shape)


@dataclass(frozen=True, eq=False)
class TensorContainer:
    model_id: str
    role: str
    entries: tuple[TensorEntry, ...]
    metadata: Mapping[str, str] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}")
        entries = tuple(self.entries)
        seen = set()
        for e in entries:
            if e.name in seen:
                raise ValidationError(f"duplicate entry name {e.name!r}")
            seen.add(e.name)
        meta = {str(k): str(v) for k, v in dict(self.metadata).items()}
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "metadata", meta)

    @classmethod
    def from_arrays(cls, model_id, role, arrays: Mapping[str, np.ndarray], metadata=None):
        entries = tuple(TensorEntry(name, arr) for name, arr in arrays.items())
        return cls(model_id=model_id, role=role, entries=entries, metadata=metadata or {})

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __contains__(self, name) -> bool:
        return any(e.name == name for e in self.entries)

    def __getitem__(self, name) -> np.ndarray:
        for e in self.entries:
            if e.name == name:
                return e.data
        raise KeyError(name)

    def arrays(self) -> dict[str, np.ndarray]:
        return {e.name: e.data for e in self.entries}

    def signature(self) -> dict[str, tuple[int, ...]]:
        return {e.name: e.shape for e in self.entries}

    def equals(self, other: "TensorContainer") -> bool:
        """Bitwise comparison of manifest fields and every payload tensor."""
        if (self.model_id, self.role, self.format_version, self.metadata) != (
            other.model_id,
            other.role,
            other.format_version,
            other.metadata,
        ):
            return False
        if self.signature() != other.signature() or self.names != other.names:
            return False
        return all(
            a.data.tobytes() == b.data.tobytes() for a, b in zip(self.entries, other.entries)
        )

    def replace(self, arrays=None, **kwargs) -> "TensorContainer":
        merged = self.arrays()
        merged.update(arrays or {})
        fields = dict(model_id=self.model_id, role=self.role, metadata=self.metadata)
        fields.update(kwargs)
        return TensorContainer.from_arrays(fields["model_id"], fields["role"], merged, fields["metadata"])


def encode_container(c: TensorContainer) -> bytes:
    entries = []
    offset = 0
    for e in c.entries:
        byte_len = e.data.size * 8
        entries.append(
            {"name": e.name, "shape": list(e.shape), "dtype": e.dtype, "offset": offset, "byte_len": byte_len}
        )
        offset += byte_len
    manifest = {
        "format_version": c.format_version,
        "model_id": c.model_id,
        "role": c.role,
        "metadata": dict(c.metadata),
        "entries": entries,
    }
    blob = json.dumps(manifest, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    payload = b"".join(e.data.astype(_LE_F64, copy=False).tobytes(order="C") for e in c.entries)
    return _HEADER.pack(MAGIC, len(blob)) + blob + payload


def decode_container(raw: bytes) -> TensorContainer:
    if len(raw) < 8 or raw[:8] != MAGIC:
        raise BadMagicError(bytes(raw[:8]))
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header")
    _, manifest_len = _HEADER.unpack_from(raw, 0)
    start = _HEADER.size
    if len(raw) < start + manifest_len:
        raise FormatError("truncated manifest")
    try:
        manifest = json.loads(raw[start : start + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {manifest.get('format_version')!r}")

    payload = memoryview(raw)[start + manifest_len :]
    expected_total = 0
    entries = []
    for item in manifest["entries"]:
        shape = tuple(int(s) for s in item["shape"])
        count = math.prod(shape)
        if item.get("dtype") != "f64":
            raise FormatError(f"{item['name']}: unsupported dtype {item.get('dtype')!r}")
        if item["byte_len"] != count * 8 or item["offset"] != expected_total:
            raise ManifestMismatchError(
                f"{item['name']}: manifest offset/byte_len disagree with shape {list(shape)}"
            )
        expected_total += item["byte_len"]
        entries.append((item["name"], shape, item["offset"], item["byte_len"]))
    if len(payload) < expected_total:
        raise TruncatedPayloadError(expected_total, len(payload))
    if len(payload) > expected_total:
        raise ManifestMismatchError(
            f"payload has {len(payload) - expected_total} trailing bytes beyond the manifest"
        )

    tensors = tuple(
        TensorEntry(name, np.frombuffer(payload[off : off + n], dtype=_LE_F64).reshape(shape))
        for name, shape, off, n in entries
    )
    return TensorContainer(
        model_id=manifest["model_id"],
        role=manifest["role"],
        entries=tensors,
        metadata=manifest.get("metadata", {}),
        format_version=manifest["format_version"],
    )


def save_container(c: TensorContainer, path) -> None:
    data = encode_container(c)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_container(path) -> TensorContainer:
    with open(path, "rb") as fh:
        return decode_container(fh.read())


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


@dataclass(frozen=True, eq=False)
class TaskVector:
    """Per-layer deltas ``theta_i - theta_0``.

    ``residual`` carries the rounding error of each subtraction (an exact
    two-sum remainder), which lets ``apply_task_arithmetic`` add the vector
    back onto ``theta_0`` without losing the last bit.
    """

    layers: Mapping[str, np.ndarray]
    source_id: str
    residual: Mapping[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", {k: _frozen(v) for k, v in self.layers.items()})
        object.__setattr__(self, "residual", {k: _frozen(v) for k, v in self.residual.items()})

    def signature(self):
        return {k: v.shape for k, v in self.layers.items()}

    def to_container(self) -> TensorContainer:
        return TensorContainer.from_arrays(self.source_id, "task_vector", self.layers)


def check_same_architecture(a: Mapping[str, tuple], b: Mapping[str, tuple], what="architecture mismatch"):
    bad = sorted(set(a) ^ set(b)) + sorted(k for k in set(a) & set(b) if tuple(a[k]) != tuple(b[k]))
    if bad:
        raise ArchitectureError(what, bad)


def compute_task_vector(theta_i: TensorContainer, theta_0: TensorContainer, source_id=None) -> TaskVector:
    check_same_architecture(theta_i.signature(), theta_0.signature())
    layers, residual = {}, {}
    for name in theta_0.names:
        delta, err = _two_sum(theta_i[name], -theta_0[name])
        layers[name] = delta
        residual[name] = err
    return TaskVector(layers, source_id or theta_i.model_id, residual)


def apply_task_arithmetic(
    theta_0: TensorContainer,
    deltas: Sequence[TaskVector],
    alphas: Sequence[float],
    model_id: str = "merged",
) -> TensorContainer:
    """``theta_0 + sum_i alpha_i * delta_i``, accumulated in source_id order."""
    if len(deltas) != len(alphas):
        raise ValidationError(f"{len(deltas)} task vectors but {len(alphas)} alphas")
    if not deltas:
        raise ValidationError("task arithmetic needs at least one task vector")
    sig = theta_0.signature()
    for tv in deltas:
        check_same_architecture(tv.signature(), sig, f"task vector {tv.source_id} does not match base")

    order = sorted(range(len(deltas)), key=lambda i: deltas[i].source_id)
    merged = {}
    for name in theta_0.names:
        high = np.zeros(sig[name])
        low = np.zeros(sig[name])
        for i in order:
            a = float(alphas[i])
            high = high + a * deltas[i].layers[name]
            if name in deltas[i].residual:
                low = low + a * deltas[i].residual[name]
        s, t = _two_sum(theta_0[name], high)
        merged[name] = s + (t + low)
    meta = {
        "sources": ",".join(deltas[i].source_id for i in order),
        "alphas": ",".join(repr(float(alphas[i])) for i in order),
    }
    return TensorContainer.from_arrays(model_id, "checkpoint", merged, meta)


def iter_layer_names(container: TensorContainer, matrices_only=False) -> Iterable[str]:
    for e in container.entries:
        if not matrices_only or len(e.shape) == 2:
            yield e.name
