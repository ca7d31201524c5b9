"""Binary model files with optional per-tensor 8-bit weight quantization.

Layout (all integers little-endian)::

    magic      4 bytes  b"LTTS"
    version    u32      1
    input_dim  u32
    frame_dim  u32
    bundle     u32      frames predicted per network step (K)
    n_layers   u32
    per layer: kind u8, units u32, projection u32
    n_aux      u32      0, or 4 when normalization statistics follow
    tensor records, per layer in W, R, P, b order (absent ones skipped),
        then the aux vectors (input mean, input std, target mean, target std):
        kind u8 (0 = raw f32, 1 = int8), rows u32, cols u32,
        scale f32 (kind 1 only), payload (rows * cols f32 or i8)
    crc32      u32      zlib CRC-32 of every preceding byte

Weight matrices are quantized when requested; biases and aux vectors always
stay raw float32. Quantized weights come back as float32 after loading.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .data import Normalizer
from .network import LAYER_KINDS, LayerSpec, LayerWeights, NetworkSpec, check_weights, weight_shapes

MAGIC = b"LTTS"
VERSION = 1

RAW = 0
INT8 = 1

_KIND_CODES = {kind: code for code, kind in enumerate(LAYER_KINDS)}


class ModelFormatError(Exception):
    """Base class for unreadable model files."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


@dataclass
class QuantizedTensor:
    rows: int
    cols: int
    scale: float
    payload: np.ndarray

    def __post_init__(self) -> None:
        if self.payload.dtype != np.int8 or self.payload.size != self.rows * self.cols:
            raise ValueError("payload must hold rows * cols int8 values")
        if np.any(self.payload == -128):
            raise ValueError("payload values must lie in [-127, 127]")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be finite and positive")


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(m: np.ndarray) -> QuantizedTensor:
    """Symmetric per-tensor quantization: scale = max|m| / 127, q = round(m / scale)."""
    m = np.asarray(m, dtype=np.float32)
    if not np.isfinite(m).all():
        raise ValueError("cannot quantize a tensor with non-finite values")
    if m.ndim > 2:
        raise ValueError("only vectors and matrices can be quantized")
    m2 = m.reshape(1, -1) if m.ndim < 2 else m
    peak = float(np.max(np.abs(m2))) if m2.size else 0.0
    scale = np.float32(peak / 127.0) if peak > 0 else np.float32(1.0)
    if scale == 0:
        # subnormal peaks underflow; fall back to the smallest positive scale
        scale = np.float32(np.finfo(np.float32).smallest_subnormal)
    q = _round_half_away(m2.astype(np.float64) / float(scale))
    q = np.clip(q, -127, 127).astype(np.int8)
    return QuantizedTensor(m2.shape[0], m2.shape[1], float(scale), q.reshape(-1))


def dequantize_tensor(q: QuantizedTensor) -> np.ndarray:
    """float32 matrix ``payload * scale``."""
    return (q.payload.astype(np.float32) * np.float32(q.scale)).reshape(q.rows, q.cols)


def quantize_roundtrip(m: np.ndarray) -> np.ndarray:
    return dequantize_tensor(quantize_tensor(m)).reshape(np.shape(m))


class LoadedModel(NamedTuple):
    spec: NetworkSpec
    weights: list[LayerWeights]
    quantized: bool
    normalizer: Normalizer | None = None


def _tensor_record(buf: io.BytesIO, arr: np.ndarray, quantize: bool) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    rows, cols = (1, arr.shape[0]) if arr.ndim == 1 else arr.shape
    if quantize:
        q = quantize_tensor(arr.reshape(rows, cols))
        buf.write(struct.pack("<BIIf", INT8, rows, cols, q.scale))
        buf.write(q.payload.tobytes())
    else:
        buf.write(struct.pack("<BII", RAW, rows, cols))
        buf.write(arr.astype("<f4").tobytes())


def encode_model(
    spec: NetworkSpec,
    weights: Sequence[LayerWeights],
    quantize: bool = False,
    normalizer: Normalizer | None = None,
) -> bytes:
    check_weights(spec, weights)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIIII", VERSION, spec.input_dim, spec.frame_dim, spec.bundle_size, len(spec.layers)))
    for layer in spec.layers:
        buf.write(struct.pack("<BII", _KIND_CODES[layer.kind], layer.units, layer.projection))
    aux = normalizer.arrays() if normalizer is not None else []
    buf.write(struct.pack("<I", len(aux)))
    for layer in weights:
        for name, t in zip(layer.names(), layer.tensors()):
            _tensor_record(buf, t, quantize and name != "b")
    for a in aux:
        _tensor_record(buf, np.asarray(a).reshape(-1), False)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(
    spec: NetworkSpec,
    weights: Sequence[LayerWeights],
    quantize: bool,
    path: str | os.PathLike,
    normalizer: Normalizer | None = None,
) -> int:
    """Write a model file; returns the number of bytes written."""
    data = encode_model(spec, weights, quantize, normalizer)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


_RECORDS_PER_KIND = {"relu": 2, "linear": 2, "linear_recurrent": 3, "lstm": 3, "lstmp": 4}


def _read_record(r: _Reader) -> tuple[int, int, int, float, bytes]:
    kind, rows, cols = r.unpack("<BII")
    n = rows * cols
    if kind == RAW:
        return kind, rows, cols, 1.0, r.take(4 * n)
    if kind == INT8:
        (scale,) = r.unpack("<f")
        return kind, rows, cols, scale, r.take(n)
    raise ModelFormatError(f"unknown tensor record kind {kind}")


def _record_array(record) -> np.ndarray:
    kind, rows, cols, scale, raw = record
    if kind == RAW:
        return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(rows, cols)
    try:
        q = QuantizedTensor(rows, cols, scale, np.frombuffer(raw, dtype=np.int8).copy())
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc
    return dequantize_tensor(q)


def decode_model(data: bytes) -> LoadedModel:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a model file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"model format version {version}, this reader supports {VERSION}")
    input_dim, frame_dim, bundle, n_layers = r.unpack("<IIII")
    header = [r.unpack("<BII") for _ in range(n_layers)]
    (n_aux,) = r.unpack("<I")
    for code, _, _ in header:
        if code >= len(LAYER_KINDS):
            raise ModelFormatError(f"unknown layer kind code {code}")
    n_records = sum(_RECORDS_PER_KIND[LAYER_KINDS[code]] for code, _, _ in header) + n_aux
    records = [_read_record(r) for _ in range(n_records)]

    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes after checksum")
    if zlib.crc32(data[:body_end]) != crc:
        raise ChecksumError("checksum mismatch, model file is corrupt")

    try:
        layers = tuple(LayerSpec(LAYER_KINDS[code], units, proj) for code, units, proj in header)
        spec = NetworkSpec(input_dim, layers, bundle, frame_dim)
    except ValueError as exc:
        raise ModelFormatError(f"inconsistent network header: {exc}") from exc
    if n_aux not in (0, 4):
        raise ModelFormatError(f"unexpected aux tensor count {n_aux}")

    weights: list[LayerWeights] = []
    pending = iter(records)
    for shapes in weight_shapes(spec):
        tensors = {}
        for name, shape in shapes.items():
            arr = _record_array(next(pending))
            if arr.size != int(np.prod(shape)):
                raise ModelFormatError(f"tensor {name} has {arr.size} values, expected shape {shape}")
            tensors[name] = arr.reshape(shape)
        weights.append(LayerWeights(**tensors))
    aux = [_record_array(rec).reshape(-1).astype(np.float64) for rec in pending]
    quantized = any(rec[0] == INT8 for rec in records)
    normalizer = Normalizer(*aux) if aux else None
    return LoadedModel(spec, weights, quantized, normalizer)


def load_model(path: str | os.PathLike) -> LoadedModel:
    """Read a model file; quantized weights are restored to float32."""
    with open(path, "rb") as fh:
        return decode_model(fh.read())
