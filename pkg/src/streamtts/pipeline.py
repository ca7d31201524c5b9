"""Streaming synthesis: phoneme durations, frame features, bundled acoustic inference.

The acoustic network is driven frame-synchronously. With bundle size K every
network step consumes the linguistic vector of the last frame in the bundle
and emits K frames, so producing frame t never needs input past the end of
t's bundle. Frames leave the stream in fixed-size chunks as soon as enough of
them exist.
"""

from __future__ import annotations

import math
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .data import ConfigError, Normalizer
from .network import StreamState, forward_step
from .quantstore import LoadedModel

MCEP_DIM = 40
BAP_DIM = 7
LF0_INDEX = MCEP_DIM + BAP_DIM
VUV_INDEX = LF0_INDEX + 1
FRAME_DIM = VUV_INDEX + 1
POSITION_FEATURES = 2
DEFAULT_CHUNK = 50

FEATURE_MAGIC = b"AFRM"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")


def _normalizer(model: LoadedModel) -> Normalizer:
    if model.normalizer is not None:
        return model.normalizer
    return Normalizer.identity(model.spec.input_dim, model.spec.frame_dim)


def predict_durations(model: LoadedModel, phonemes: np.ndarray) -> np.ndarray:
    """Frame count per phoneme, rounded and clamped to at least 1."""
    phonemes = np.asarray(phonemes)
    if phonemes.ndim != 2 or phonemes.shape[1] != model.spec.input_dim:
        raise ConfigError(
            f"duration model expects {model.spec.input_dim} features per phoneme, got shape {phonemes.shape}"
        )
    if model.spec.output_dim != 1:
        raise ConfigError("duration model must predict one value per phoneme")
    norm = _normalizer(model)
    state = StreamState.zeros(model.spec)
    raw = np.empty(len(phonemes))
    for i, p in enumerate(phonemes):
        y = forward_step(model.spec, model.weights, state, norm.apply_input(p).astype(np.float32))
        raw[i] = norm.unapply_target(y.astype(np.float64))[0]
    rounded = np.sign(raw) * np.floor(np.abs(raw) + 0.5)
    return np.maximum(rounded, 1).astype(np.int64)


def upsample(phonemes: np.ndarray, durations: Sequence[int]) -> np.ndarray:
    """Repeat each phoneme row for its duration and append two position features.

    The features are the fractional position inside the phoneme (j / n) and the
    remaining frame count normalized by duration ((n - j) / n).
    """
    phonemes = np.asarray(phonemes, dtype=np.float32)
    durations = np.asarray(durations, dtype=np.int64)
    if len(durations) != len(phonemes):
        raise ConfigError("one duration per phoneme required")
    if np.any(durations < 1):
        raise ConfigError("durations must be >= 1")
    width = phonemes.shape[1] if phonemes.ndim == 2 else 0
    total = int(durations.sum())
    out = np.empty((total, width + POSITION_FEATURES), dtype=np.float32)
    out[:, :width] = np.repeat(phonemes, durations, axis=0)
    n = np.repeat(durations, durations)
    starts = np.repeat(np.cumsum(durations) - durations, durations)
    j = np.arange(total) - starts
    out[:, width] = j / n
    out[:, width + 1] = (n - j) / n
    return out


@dataclass
class StreamReport:
    frames: int = 0
    steps: int = 0
    chunks: int = 0
    steps_to_first_chunk: int = 0
    time_to_first_chunk_ms: float = 0.0
    total_ms: float = 0.0


@dataclass
class StreamResult:
    chunks: list[np.ndarray] = field(default_factory=list)
    report: StreamReport = field(default_factory=StreamReport)

    @property
    def frames(self) -> np.ndarray:
        if not self.chunks:
            return np.zeros((0, 0), dtype=np.float32)
        return np.concatenate(self.chunks)


class SynthesisStream:
    """Frame-synchronous acoustic inference over one utterance.

    ``on_step(step, bundle_start, bundle_end)`` is invoked right before each
    network step; tests use it to audit input access.
    """

    def __init__(
        self,
        model: LoadedModel,
        chunk_size: int = DEFAULT_CHUNK,
        on_step: Callable[[int, int, int], None] | None = None,
    ):
        if chunk_size < 1:
            raise ConfigError("chunk size must be >= 1")
        self.model = model
        self.chunk_size = chunk_size
        self.on_step = on_step
        self.norm = _normalizer(model)
        self.state = StreamState.zeros(model.spec)
        self.report = StreamReport()

    def _postprocess(self, y: np.ndarray) -> np.ndarray:
        spec = self.model.spec
        frames = self.norm.unapply_target(y.reshape(spec.bundle_size, spec.frame_dim)).astype(np.float32)
        if spec.frame_dim == FRAME_DIM:
            np.clip(frames[:, VUV_INDEX], 0.0, 1.0, out=frames[:, VUV_INDEX])
        return frames

    def chunks(self, frame_inputs: Sequence[np.ndarray]) -> Iterator[np.ndarray]:
        spec = self.model.spec
        k = spec.bundle_size
        total = len(frame_inputs)
        self.state.reset()
        self.report = report = StreamReport(frames=total)
        start = time.perf_counter()
        pending: list[np.ndarray] = []
        pending_count = 0
        for step, first in enumerate(range(0, total, k)):
            last = min(first + k, total) - 1
            if self.on_step is not None:
                self.on_step(step, first, last)
            x = self.norm.apply_input(np.asarray(frame_inputs[last])).astype(np.float32)
            y = forward_step(spec, self.model.weights, self.state, x)
            report.steps += 1
            # trailing partial bundle: surplus frames are dropped
            frames = self._postprocess(y)[: last - first + 1]
            pending.append(frames)
            pending_count += len(frames)
            while pending_count >= self.chunk_size:
                block = np.concatenate(pending)
                chunk, rest = block[: self.chunk_size], block[self.chunk_size :]
                pending = [rest] if len(rest) else []
                pending_count = len(rest)
                yield self._emit(chunk, start)
        if pending_count:
            yield self._emit(np.concatenate(pending), start)
        if report.chunks == 0:
            report.total_ms = (time.perf_counter() - start) * 1e3

    def _emit(self, chunk: np.ndarray, start: float) -> np.ndarray:
        # total time is the moment the last chunk is ready, so a single-chunk
        # utterance reports latency equal to total
        report = self.report
        report.total_ms = (time.perf_counter() - start) * 1e3
        if report.chunks == 0:
            report.time_to_first_chunk_ms = report.total_ms
            report.steps_to_first_chunk = report.steps
        report.chunks += 1
        return chunk


def synthesize_stream(
    model: LoadedModel,
    frame_inputs: Sequence[np.ndarray],
    bundle_size: int,
    chunk_size: int = DEFAULT_CHUNK,
    on_chunk: Callable[[np.ndarray], None] | None = None,
) -> StreamResult:
    """Run a stream to completion, collecting chunks and timings."""
    if bundle_size != model.spec.bundle_size:
        raise ConfigError(f"model predicts {model.spec.bundle_size} frames per step, asked for {bundle_size}")
    stream = SynthesisStream(model, chunk_size)
    result = StreamResult()
    for chunk in stream.chunks(frame_inputs):
        if on_chunk is not None:
            on_chunk(chunk)
        result.chunks.append(chunk)
    result.report = stream.report
    return result


def synthesize(
    duration_model: LoadedModel,
    acoustic_model: LoadedModel,
    phonemes: np.ndarray,
    chunk_size: int = DEFAULT_CHUNK,
) -> StreamResult:
    """Phoneme features to acoustic frames, timed from the very first step."""
    phonemes = np.asarray(phonemes)
    if phonemes.ndim != 2 or len(phonemes) == 0:
        raise ConfigError("need a non-empty phoneme sequence")
    start = time.perf_counter()
    durations = predict_durations(duration_model, phonemes)
    frame_inputs = upsample(phonemes, durations)
    front_ms = (time.perf_counter() - start) * 1e3
    result = synthesize_stream(acoustic_model, frame_inputs, acoustic_model.spec.bundle_size, chunk_size)
    result.report.time_to_first_chunk_ms += front_ms
    result.report.total_ms += front_ms
    return result


def voiced(frames: np.ndarray) -> np.ndarray:
    """Voicing decision per frame: vuv output above 0.5."""
    return np.asarray(frames)[:, VUV_INDEX] > 0.5


def emit_features(frames: np.ndarray, path: str | os.PathLike, format: str = "bin") -> int:
    """Write frames as binary AFRM (little-endian f32 rows) or text; returns bytes written."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise ValueError("frames must be a 2-D array")
    count, dim = frames.shape
    if format == "bin":
        data = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, count, dim) + frames.astype("<f4").tobytes()
    elif format == "text":
        lines = [f"# AFRM text version={FEATURE_VERSION} frames={count} dim={dim}"]
        lines += [" ".join(f"{v:.9g}" for v in row) for row in frames]
        data = ("\n".join(lines) + "\n").encode()
    else:
        raise ValueError(f"unknown feature format {format!r}")
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read_features(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == FEATURE_MAGIC:
        if len(data) < _FEATURE_HEADER.size:
            raise ValueError(f"{path}: truncated feature header")
        _, version, count, dim = _FEATURE_HEADER.unpack_from(data)
        if version != FEATURE_VERSION:
            raise ValueError(f"{path}: unsupported feature file version {version}")
        body = data[_FEATURE_HEADER.size :]
        if len(body) != 4 * count * dim:
            raise ValueError(f"{path}: expected {count}x{dim} frames, found {len(body)} payload bytes")
        return np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(count, dim)
    text = data.decode()
    header, _, rest = text.partition("\n")
    if not header.startswith("# AFRM text"):
        raise ValueError(f"{path}: not a feature file")
    fields = dict(kv.split("=") for kv in header.split()[3:])
    count, dim = int(fields["frames"]), int(fields["dim"])
    rows = [line.split() for line in rest.splitlines() if line.strip()]
    out = np.array(rows, dtype=np.float32).reshape(count, dim) if count else np.zeros((0, dim), np.float32)
    return out


def bundle_steps(frames: int, bundle_size: int) -> int:
    return math.ceil(frames / bundle_size)
