"""Binary formats for datasets (ARMD), activation traces (ATF) and weights (ARMW).

All three are little-endian with a 4-byte magic and a u16 version.

ATF layout::

    b"ARMT" | u16 version=1 | u16 flags | u32 layer_count
    [flags & 1: u16 len, model_id utf-8 | u16 len, dataset_id utf-8]
    per layer: u16 name_len | name utf-8 | u32 n_filters | u32 n_samples
               | n_filters * n_samples f32, filter-major

ARMD layout::

    b"ARMD" | u16 version=1 | u32 sample_count | u32 class_count
    | u16 channels | u16 height | u16 width
    | f32 pixels (sample-major, channel-first) | u32 labels

ARMW layout::

    b"ARMW" | u16 version=1 | u16 flags=0 | u32 count | count * f32
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ATF_MAGIC = b"ARMT"
ARMD_MAGIC = b"ARMD"
ARMW_MAGIC = b"ARMW"
VERSION = 1
FLAG_IDS = 0x1

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


class FormatError(ValueError):
    """Raised for malformed, truncated or invariant-violating files and objects."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Dataset:
    """Images in [0, 1] stored as one ``(n, channels, height, width)`` float32 array."""

    name: str
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        if self.images.ndim != 4:
            raise FormatError("images must have shape (n, channels, height, width)")
        if min(self.images.shape[1:]) < 1:
            raise FormatError("image dimensions must be positive")
        if self.labels.shape != (self.images.shape[0],):
            raise FormatError(
                f"dimension mismatch: {self.images.shape[0]} samples but {self.labels.size} labels"
            )
        if self.num_classes < 1:
            raise FormatError("class count must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"label out of range [0, {self.num_classes})")
        if not np.all(np.isfinite(self.images)):
            raise FormatError("non-finite pixel value")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise FormatError("pixel out of range [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def image(self, index: int) -> np.ndarray:
        return self.images[index]

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(name or self.name, self.images[idx], self.labels[idx], self.num_classes)

    def with_images(self, images: np.ndarray, name: str) -> "Dataset":
        return Dataset(name, images, self.labels.copy(), self.num_classes)

    def __eq__(self, other) -> bool:
        # the name is not part of the on-disk content
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(eq=False)
class LayerTrace:
    """Spatially averaged activations of one layer: ``values[filter, sample]``."""

    layer_name: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise FormatError(f"layer {self.layer_name!r}: values must be 2-D (filters, samples)")
        if self.values.shape[0] < 1:
            raise FormatError(f"layer {self.layer_name!r}: no filters")
        if not np.all(np.isfinite(self.values)):
            raise FormatError(f"layer {self.layer_name!r}: non-finite activation value")

    @property
    def n_filters(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerTrace):
            return NotImplemented
        return (
            self.layer_name == other.layer_name
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(eq=False)
class ActivationTrace:
    model_id: str
    dataset_id: str
    layers: list[LayerTrace] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise FormatError("empty trace")
        n = self.layers[0].n_samples
        for layer in self.layers:
            if layer.n_samples != n:
                raise FormatError(
                    f"layer {layer.layer_name!r} has {layer.n_samples} samples, expected {n}"
                )

    @property
    def n_samples(self) -> int:
        return self.layers[0].n_samples

    @property
    def layer_names(self) -> list[str]:
        return [layer.layer_name for layer in self.layers]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ActivationTrace):
            return NotImplemented
        return (
            self.model_id == other.model_id
            and self.dataset_id == other.dataset_id
            and len(self.layers) == len(other.layers)
            and all(a == b for a, b in zip(self.layers, other.layers))
        )


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int, what: str) -> memoryview:
        if n > self.remaining():
            raise FormatError(f"truncated: need {n} bytes for {what}, {self.remaining()} left")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def text(self, what: str) -> str:
        (length,) = self.unpack("<H", f"{what} length")
        raw = self.take(length, what)
        try:
            return bytes(raw).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not valid UTF-8") from exc

    def array(self, dtype: np.dtype, count: int, what: str) -> np.ndarray:
        raw = self.take(count * dtype.itemsize, what)
        return np.frombuffer(raw, dtype=dtype).copy()

    def finish(self) -> None:
        if self.remaining():
            raise FormatError(f"{self.remaining()} trailing bytes after payload")


def _pack_text(text: str, what: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"{what} longer than 65535 bytes")
    return struct.pack("<H", len(raw)) + raw


def _write_atomic(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# ATF
# ---------------------------------------------------------------------------


def encode_trace(trace: ActivationTrace) -> bytes:
    trace.validate()
    has_ids = bool(trace.model_id or trace.dataset_id)
    parts = [ATF_MAGIC, struct.pack("<HHI", VERSION, FLAG_IDS if has_ids else 0, len(trace.layers))]
    if has_ids:
        parts.append(_pack_text(trace.model_id, "model_id"))
        parts.append(_pack_text(trace.dataset_id, "dataset_id"))
    for layer in trace.layers:
        parts.append(_pack_text(layer.layer_name, "layer name"))
        parts.append(struct.pack("<II", layer.n_filters, layer.n_samples))
        parts.append(layer.values.astype(_F32, copy=False).tobytes())
    return b"".join(parts)


def decode_trace(data: bytes) -> ActivationTrace:
    r = _Reader(data)
    if bytes(r.take(4, "magic")) != ATF_MAGIC:
        raise FormatError("not an ATF file (bad magic)")
    version, flags, layer_count = r.unpack("<HHI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported ATF version {version}")
    if flags & ~FLAG_IDS:
        raise FormatError(f"unknown ATF flags 0x{flags:04x}")
    if layer_count == 0:
        raise FormatError("empty trace")
    model_id = dataset_id = ""
    if flags & FLAG_IDS:
        model_id = r.text("model_id")
        dataset_id = r.text("dataset_id")
    layers = []
    for i in range(layer_count):
        name = r.text(f"layer {i} name")
        n_filters, n_samples = r.unpack("<II", f"layer {i} dims")
        count = n_filters * n_samples
        values = r.array(_F32, count, f"layer {i} payload")
        layers.append(LayerTrace(name, values.reshape(n_filters, n_samples)))
    r.finish()
    return ActivationTrace(model_id, dataset_id, layers)


def write_trace(trace: ActivationTrace, path: str | os.PathLike) -> None:
    _write_atomic(path, encode_trace(trace))


def read_trace(path: str | os.PathLike) -> ActivationTrace:
    return decode_trace(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# ARMD
# ---------------------------------------------------------------------------


def encode_dataset(ds: Dataset) -> bytes:
    ds.validate()
    n, c, h, w = ds.images.shape
    if max(c, h, w) > 0xFFFF:
        raise FormatError("image dimension exceeds u16")
    header = ARMD_MAGIC + struct.pack("<HIIHHH", VERSION, n, ds.num_classes, c, h, w)
    return header + ds.images.astype(_F32, copy=False).tobytes() + ds.labels.astype(_U32).tobytes()


def decode_dataset(data: bytes, name: str = "") -> Dataset:
    r = _Reader(data)
    if bytes(r.take(4, "magic")) != ARMD_MAGIC:
        raise FormatError("not an ARMD file (bad magic)")
    version, n, num_classes, c, h, w = r.unpack("<HIIHHH", "header")
    if version != VERSION:
        raise FormatError(f"unsupported ARMD version {version}")
    if min(c, h, w) == 0:
        raise FormatError("dimension mismatch: zero image dimension")
    pixels = r.array(_F32, n * c * h * w, "pixels")
    labels = r.array(_U32, n, "labels")
    r.finish()
    return Dataset(name, pixels.reshape(n, c, h, w), labels.astype(np.int64), num_classes)


def write_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    _write_atomic(path, encode_dataset(ds))


def read_dataset(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    return decode_dataset(path.read_bytes(), name=path.stem)


# ---------------------------------------------------------------------------
# ARMW
# ---------------------------------------------------------------------------


def encode_weights(flat: np.ndarray) -> bytes:
    flat = np.asarray(flat, dtype=_F32).ravel()
    return ARMW_MAGIC + struct.pack("<HHI", VERSION, 0, flat.size) + flat.tobytes()


def decode_weights(data: bytes) -> np.ndarray:
    r = _Reader(data)
    if bytes(r.take(4, "magic")) != ARMW_MAGIC:
        raise FormatError("not an ARMW file (bad magic)")
    version, flags, count = r.unpack("<HHI", "header")
    if version != VERSION or flags != 0:
        raise FormatError(f"unsupported ARMW version/flags {version}/{flags}")
    flat = r.array(_F32, count, "weights")
    r.finish()
    if not np.all(np.isfinite(flat)):
        raise FormatError("non-finite weight value")
    return flat.astype(np.float32)


def write_weights(flat: np.ndarray, path: str | os.PathLike) -> None:
    _write_atomic(path, encode_weights(flat))


def read_weights(path: str | os.PathLike) -> np.ndarray:
    return decode_weights(Path(path).read_bytes())
