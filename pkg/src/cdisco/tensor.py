"""Dense float32 tensor container and its on-disk formats.

Tensors are immutable after construction and every public operation
validates that the result is finite, so downstream code never sees
NaN/Inf. Serialization uses the CDAD container: magic ``CDAD``,
version u32, rank u32, shape u64 per axis, then the payload as
little-endian float32 in row-major order.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    ShapeError,
    TruncatedPayloadError,
    ValidationError,
    VersionMismatchError,
)

CDAD_MAGIC = b"CDAD"
CDAD_VERSION = 1


class DenseTensor:
    """N-dimensional row-major float32 array with an explicit shape.

    Rank 0 (shape ``()``) holds a single scalar. All values are finite;
    construction rejects NaN/Inf.
    """

    __slots__ = ("_array",)

    def __init__(self, shape: Sequence[int], data: Iterable[float]):
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"dimension sizes must be positive, got {shape}")
        arr = np.asarray(list(data) if not isinstance(data, np.ndarray) else data,
                         dtype=np.float32).reshape(-1)
        expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if arr.size != expected:
            raise ShapeError(
                f"data length {arr.size} does not match shape {shape} (= {expected})")
        arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("tensor contains non-finite values")
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "DenseTensor":
        t = cls.__new__(cls)
        # np.array keeps rank-0 shapes (ascontiguousarray would promote them)
        out = np.array(arr, dtype=np.float32, order="C", copy=True)
        if not np.all(np.isfinite(out)):
            raise ValidationError("tensor contains non-finite values")
        out.flags.writeable = False
        t._array = out
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "DenseTensor":
        return cls.from_array(np.zeros(tuple(shape), dtype=np.float32))

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def rank(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return int(self._array.size)

    @property
    def array(self) -> np.ndarray:
        """Read-only shaped view of the stored values."""
        return self._array

    @property
    def data(self) -> np.ndarray:
        """Read-only flat row-major view of the stored values."""
        return self._array.reshape(-1)

    def tolist(self):
        return self._array.tolist()

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and bool(
            np.array_equal(self._array, other._array))

    def __hash__(self):
        return hash((self.shape, self._array.tobytes()))

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape})"


@dataclass(frozen=True)
class LabeledBatch:
    """Per-sample features with integer class labels in ``[0, class_count)``."""

    features: DenseTensor
    labels: tuple[int, ...]
    class_count: int
    sample_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.features.rank < 1:
            raise ShapeError("features need a leading sample axis")
        n = self.features.shape[0]
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        if len(self.labels) != n:
            raise ValidationError(
                f"labels length {len(self.labels)} != sample count {n}")
        if n < 1 or self.class_count < 1:
            raise ValidationError("need at least one sample and one class")
        bad = [v for v in self.labels if not 0 <= v < self.class_count]
        if bad:
            raise ValidationError(f"labels outside [0, {self.class_count}): {bad[:5]}")
        if not self.sample_ids:
            object.__setattr__(
                self, "sample_ids", tuple(f"s{i:04d}" for i in range(n)))
        elif len(self.sample_ids) != n:
            raise ValidationError("sample_ids length mismatch")

    @property
    def n(self) -> int:
        return self.features.shape[0]


def pool_gap(features: DenseTensor) -> DenseTensor:
    """Global average pooling of an [H, W, D] map to a [D] vector."""
    if features.rank != 3:
        raise ShapeError(f"pool_gap expects rank 3, got shape {features.shape}")
    return DenseTensor.from_array(features.array.mean(axis=(0, 1)))


def elementwise_product(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return DenseTensor.from_array(a.array * b.array)


def percentile(values, p: float) -> float:
    """Nearest-rank percentile: the value at rank ``ceil(p*n)`` ascending.

    ``p=0`` returns the minimum and ``p=1`` the maximum.
    """
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValidationError("percentile of empty input")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("percentile input contains non-finite values")
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"p must be in [0, 1], got {p}")
    ordered = np.sort(arr, kind="stable")
    rank = max(1, math.ceil(p * arr.size))
    return float(ordered[rank - 1])


def write_tensor(tensor: DenseTensor, path) -> None:
    """Write a tensor in the CDAD container (see module docstring)."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CDAD_MAGIC)
        fh.write(struct.pack("<I", CDAD_VERSION))
        fh.write(struct.pack("<I", tensor.rank))
        for dim in tensor.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(tensor.data.astype("<f4").tobytes())


def read_tensor(path) -> DenseTensor:
    """Read a CDAD container written by :func:`write_tensor`."""
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CDAD_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise TruncatedPayloadError(f"{path}: header cut short")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != CDAD_VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}")
    offset = 12
    if len(blob) < offset + 8 * rank:
        raise TruncatedPayloadError(f"{path}: shape table cut short")
    shape = struct.unpack_from(f"<{rank}Q" if rank else "<", blob, offset)
    offset += 8 * rank
    count = 1
    for dim in shape:
        if dim == 0:
            raise FormatError(f"{path}: zero-sized dimension")
        count *= dim
    payload = blob[offset:]
    if len(payload) < 4 * count:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, expected {4 * count}")
    if len(payload) > 4 * count:
        raise FormatError(f"{path}: {len(payload) - 4 * count} trailing bytes")
    arr = np.frombuffer(payload, dtype="<f4", count=count).reshape(shape)
    return DenseTensor.from_array(arr)


def write_pgm(map_tensor: DenseTensor, path, symmetric: bool = False) -> None:
    """Render an [H, W] map as binary PGM (P5, maxval 255).

    Values are min-max normalized to [0, 255]; a constant map renders as
    mid-gray 128. With ``symmetric=True`` zero maps to mid-gray and the
    scale is set by the largest magnitude, for signed concept maps.
    """
    if map_tensor.rank != 2:
        raise ShapeError(f"PGM map must be rank 2, got shape {map_tensor.shape}")
    values = map_tensor.array.astype(np.float64)
    h, w = values.shape
    if symmetric:
        peak = float(np.max(np.abs(values)))
        if peak == 0.0:
            pixels = np.full((h, w), 128, dtype=np.uint8)
        else:
            scaled = 127.5 + values * (127.5 / peak)
            pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    else:
        lo = float(values.min())
        hi = float(values.max())
        if hi == lo:
            pixels = np.full((h, w), 128, dtype=np.uint8)
        else:
            pixels = np.rint((values - lo) * (255.0 / (hi - lo))).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
