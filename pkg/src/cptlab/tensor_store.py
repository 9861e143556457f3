"""Named-tensor container, checkpoint persistence, and parameter distances.

Checkpoint container format (version 1):

    magic        4 bytes         b"CPTL"
    version      u32 little-endian
    header_len   u64 little-endian
    header       UTF-8 JSON: {"tensors": [{name, dtype, shape,
                 byte_offset, byte_length}, ...], "layer_index": {...},
                 "meta": {...}}   (meta is optional free-form metadata)
    payload      raw little-endian scalars, in header order;
                 byte_offset is relative to the payload start

Files are written atomically (temp file in the same directory + rename),
and round-trip bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    CheckpointCorruptionError,
    CheckpointFormatError,
    CongruenceError,
    PersistenceError,
    ValidationError,
)

MAGIC = b"CPTL"
FORMAT_VERSION = 1

# storage dtype tag -> little-endian numpy dtype
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise ValidationError(f"unsupported dtype {arr.dtype}; expected float32 or float64")


@dataclass(frozen=True)
class NamedTensor:
    """A named, shaped, row-major floating-point tensor."""

    name: str
    array: np.ndarray

    def __post_init__(self):
        if not self.name:
            raise ValidationError("tensor name must be non-empty")
        if np.asarray(self.array).ndim == 0:
            raise ValidationError(f"tensor {self.name!r}: shape must be non-empty")
        arr = np.ascontiguousarray(self.array)
        dtype_tag(arr)  # rejects non-float32/64
        if any(d <= 0 for d in arr.shape):
            raise ValidationError(
                f"tensor {self.name!r}: dimensions must be positive, got {arr.shape}"
            )
        # own a frozen copy rather than flipping the caller's writeable flag
        if arr is self.array and arr.flags.writeable:
            arr = arr.copy()
        if arr.flags.writeable:
            arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def dtype(self) -> str:
        return dtype_tag(self.array)

    def assert_finite(self) -> None:
        if not np.all(np.isfinite(self.array)):
            raise ValidationError(f"tensor {self.name!r} contains non-finite values")


class ParameterSet:
    """Ordered collection of uniquely named tensors with a layer assignment.

    Immutable once constructed: the backing arrays are read-only and update
    operations build new sets. ``layer_index`` maps each tensor name to an
    integer layer id (embedding = 0, blocks = 1..L, head = L+1 by the model's
    convention); names without an explicit entry default to layer 0.
    """

    def __init__(
        self,
        tensors: Sequence[NamedTensor] | Mapping[str, np.ndarray],
        layer_index: Optional[Mapping[str, int]] = None,
    ):
        if isinstance(tensors, Mapping):
            tensors = [NamedTensor(name, arr) for name, arr in tensors.items()]
        self._tensors: dict[str, NamedTensor] = {}
        for t in tensors:
            if t.name in self._tensors:
                raise ValidationError(f"duplicate tensor name {t.name!r}")
            self._tensors[t.name] = t
        layer_index = dict(layer_index or {})
        unknown = set(layer_index) - set(self._tensors)
        if unknown:
            raise ValidationError(f"layer_index names not in set: {sorted(unknown)}")
        self.layer_index: dict[str, int] = {
            name: int(layer_index.get(name, 0)) for name in self._tensors
        }

    # -- container protocol -------------------------------------------------

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[NamedTensor]:
        return iter(self._tensors.values())

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name].array

    @property
    def names(self) -> list[str]:
        return list(self._tensors)

    def tensor(self, name: str) -> NamedTensor:
        return self._tensors[name]

    def items(self):
        return ((t.name, t.array) for t in self._tensors.values())

    def layer_ids(self) -> list[int]:
        return sorted(set(self.layer_index.values()))

    def num_scalars(self) -> int:
        return sum(t.array.size for t in self)

    # -- derivation ---------------------------------------------------------

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParameterSet":
        """New set with some arrays replaced; shapes and dtypes must match."""
        unknown = set(updates) - set(self._tensors)
        if unknown:
            raise ValidationError(f"unknown tensor names: {sorted(unknown)}")
        out = []
        for t in self:
            if t.name in updates:
                new = np.asarray(updates[t.name])
                if new.shape != t.shape or new.dtype != t.array.dtype:
                    raise CongruenceError(
                        f"replacement for {t.name!r} has shape {new.shape} dtype "
                        f"{new.dtype}, expected {t.shape} {t.array.dtype}"
                    )
                out.append(NamedTensor(t.name, new))
            else:
                out.append(t)
        return ParameterSet(out, self.layer_index)

    def map_arrays(self, fn) -> "ParameterSet":
        """New congruent set with ``fn`` applied to every array."""
        return ParameterSet(
            [NamedTensor(t.name, np.asarray(fn(t.array), dtype=t.array.dtype)) for t in self],
            self.layer_index,
        )

    def zeros_like(self) -> "ParameterSet":
        return self.map_arrays(np.zeros_like)

    # -- congruence ---------------------------------------------------------

    def check_congruent(self, other: "ParameterSet") -> None:
        """Raise CongruenceError naming the first mismatching tensor."""
        for t in self:
            if t.name not in other:
                raise CongruenceError(f"tensor {t.name!r} missing from other set")
            o = other.tensor(t.name)
            if t.shape != o.shape:
                raise CongruenceError(
                    f"tensor {t.name!r}: shape {t.shape} != {o.shape}"
                )
            if t.dtype != o.dtype:
                raise CongruenceError(
                    f"tensor {t.name!r}: dtype {t.dtype} != {o.dtype}"
                )
        for name in other.names:
            if name not in self:
                raise CongruenceError(f"tensor {name!r} missing from this set")

    def congruent_with(self, other: "ParameterSet") -> bool:
        try:
            self.check_congruent(other)
            return True
        except CongruenceError:
            return False

    def equals(self, other: "ParameterSet") -> bool:
        """Bit-exact equality of names, shapes, dtypes, data, and layer ids."""
        if self.names != other.names or self.layer_index != other.layer_index:
            return False
        return all(
            t.array.dtype == other.tensor(t.name).array.dtype
            and t.shape == other.tensor(t.name).shape
            and np.array_equal(
                t.array.view(np.uint8), other.tensor(t.name).array.view(np.uint8)
            )
            for t in self
        )


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------

def save_checkpoint(ps: ParameterSet, path, meta: Optional[dict] = None) -> None:
    """Write ``ps`` to ``path`` in the container format, atomically."""
    entries = []
    offset = 0
    payloads = []
    for t in ps:
        raw = np.ascontiguousarray(t.array, dtype=DTYPES[t.dtype]).tobytes()
        entries.append(
            {
                "name": t.name,
                "dtype": t.dtype,
                "shape": list(t.shape),
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = {"tensors": entries, "layer_index": ps.layer_index}
    if meta is not None:
        header["meta"] = meta
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = os.fspath(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(MAGIC)
                f.write(struct.pack("<I", FORMAT_VERSION))
                f.write(struct.pack("<Q", len(header_bytes)))
                f.write(header_bytes)
                for raw in payloads:
                    f.write(raw)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as e:
        raise PersistenceError(f"cannot write checkpoint {path!r}: {e}") from e


def load_checkpoint(path) -> ParameterSet:
    ps, _ = load_checkpoint_with_meta(path)
    return ps


def load_checkpoint_with_meta(path) -> tuple[ParameterSet, dict]:
    """Read a checkpoint; returns the set and the header's meta dict."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise PersistenceError(f"cannot read checkpoint {path!r}: {e}") from e

    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path!r}: bad magic bytes {blob[:4]!r}")
    if len(blob) < 16:
        raise CheckpointCorruptionError(f"{path!r}: file shorter than fixed header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path!r}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    if header_end > len(blob):
        raise CheckpointCorruptionError(f"{path!r}: declared header overruns file")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path!r}: unparseable header: {e}") from e

    payload = blob[header_end:]
    tensors = []
    seen = set()
    for entry in header.get("tensors", []):
        name = entry["name"]
        if name in seen:
            raise ValidationError(f"{path!r}: duplicate tensor name {name!r} in header")
        seen.add(name)
        if entry["dtype"] not in DTYPES:
            raise ValidationError(f"{path!r}: tensor {name!r} has dtype {entry['dtype']!r}")
        dt = DTYPES[entry["dtype"]]
        shape = tuple(int(d) for d in entry["shape"])
        expected = int(np.prod(shape)) * dt.itemsize if shape else 0
        if not shape or any(d <= 0 for d in shape):
            raise ValidationError(f"{path!r}: tensor {name!r} has invalid shape {shape}")
        if entry["byte_length"] != expected:
            raise ValidationError(
                f"{path!r}: tensor {name!r} declares {entry['byte_length']} bytes, "
                f"shape {shape} needs {expected}"
            )
        lo, hi = entry["byte_offset"], entry["byte_offset"] + entry["byte_length"]
        if lo < 0 or hi > len(payload):
            raise CheckpointCorruptionError(
                f"{path!r}: tensor {name!r} payload [{lo}:{hi}] outside "
                f"{len(payload)}-byte payload"
            )
        arr = np.frombuffer(payload[lo:hi], dtype=dt).reshape(shape)
        t = NamedTensor(name, arr.astype(arr.dtype.newbyteorder("="), copy=True))
        t.assert_finite()
        tensors.append(t)

    layer_index = {k: int(v) for k, v in header.get("layer_index", {}).items()}
    layer_index = {k: v for k, v in layer_index.items() if k in seen}
    return ParameterSet(tensors, layer_index), header.get("meta", {})


# ---------------------------------------------------------------------------
# Parameter distances
# ---------------------------------------------------------------------------

def l2_distance_per_layer(a: ParameterSet, b: ParameterSet) -> dict[int, float]:
    """Per-layer Euclidean norm of the element-wise difference a - b.

    The two sets must be congruent; the layer assignment is taken from ``a``.
    Accumulation is always in float64 regardless of storage dtype.
    """
    a.check_congruent(b)
    sumsq: dict[int, float] = {layer: 0.0 for layer in a.layer_ids()}
    for t in a:
        diff = t.array.astype(np.float64) - b[t.name].astype(np.float64)
        sumsq[a.layer_index[t.name]] += float(np.dot(diff.ravel(), diff.ravel()))
    return {layer: float(np.sqrt(s)) for layer, s in sumsq.items()}


def aggregate_shift(per_layer: Mapping[int, float], mode: str) -> float:
    """Mean or sum of per-layer distances. ``mode`` is "mean" or "sum"."""
    if not per_layer:
        raise ValueError("aggregate_shift requires a non-empty per-layer map")
    values = list(per_layer.values())
    if mode == "mean":
        return float(sum(values) / len(values))
    if mode == "sum":
        return float(sum(values))
    raise ValueError(f"unknown aggregation mode {mode!r}; expected 'mean' or 'sum'")
