"""Truncated-BPTT training of acoustic and duration networks with plain SGD.

Training data are bundled sequences: every network step sees one linguistic
vector (the last real frame of its bundle) and is scored against the K frames
of the bundle. Padding frames produced by offset augmentation are masked out
of the loss. Each truncation window of a mini-batch is one SGD step with
learning rate ``lr0 * decay**step``; recurrent state carries across windows
but gradients do not.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import ConfigError, Normalizer, UtteranceData
from .losses import CONTAMINATED, SQUARED, LossConfig, block_losses, loss_gradient
from .network import (
    LINEAR_RECURRENT,
    RECURRENT_KINDS,
    RELU,
    LayerWeights,
    NetworkSpec,
    NumericError,
    StreamState,
    forward_step,
    init_weights,
)
from .quantstore import LoadedModel


class TrainingDiverged(NumericError):
    pass


def default_learning_rate(model: str = "acoustic", bundle_size: int = 1, loss: str = SQUARED) -> float:
    """Initial learning rates used for the production-size networks."""
    if model == "duration":
        return 5e-6 if loss == CONTAMINATED else 1e-6
    if loss == CONTAMINATED:
        return 5e-6
    return 2.5e-6 if bundle_size > 1 else 1e-5


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    decay: float = 0.9999
    bptt_horizon: int = 20
    batch_size: int = 4
    loss: LossConfig | None = None
    bundle_size: int = 1
    silence_keep_fraction: float = 0.2
    max_steps: int = 10_000
    convergence_window: int = 5
    convergence_threshold: float = 1e-3
    seed: int = 0
    augment: bool = True
    eval_every: int = 0
    clip_norm: float | None = None

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]")
        if self.bundle_size < 1:
            raise ConfigError("bundle size K must be >= 1")
        if not 0.0 <= self.silence_keep_fraction <= 1.0:
            raise ConfigError("silence_keep_fraction must lie in [0, 1]")
        if self.bptt_horizon < 1 or self.batch_size < 1:
            raise ConfigError("bptt_horizon and batch_size must be >= 1")

    def lr_at(self, step: int) -> float:
        return self.learning_rate * self.decay**step

    def loss_for(self, frame_dim: int) -> LossConfig:
        return self.loss if self.loss is not None else LossConfig.squared(frame_dim)


# ---------------------------------------------------------------- data prep


def remove_silence(u: UtteranceData, keep_fraction: float, seed: int) -> UtteranceData:
    """Keep every non-silent frame and a seeded uniform sample of silent ones."""
    if keep_fraction >= 1.0:
        return u
    silent = np.flatnonzero(u.silence_mask)
    n_keep = int(math.floor(keep_fraction * len(silent) + 0.5))
    rng = np.random.default_rng(seed)
    kept = rng.choice(silent, size=n_keep, replace=False) if n_keep else np.array([], dtype=np.int64)
    keep = ~u.silence_mask
    keep[kept] = True
    return u.with_frames(keep)


def duration_data(u: UtteranceData) -> tuple[np.ndarray, np.ndarray]:
    """Phoneme features and frame counts, minus leading/trailing silences."""
    silent = u.silent_phonemes()
    lo, hi = 0, u.n_phonemes
    while lo < hi and silent[lo]:
        lo += 1
    while hi > lo and silent[hi - 1]:
        hi -= 1
    return u.phoneme_features[lo:hi], u.phoneme_durations[lo:hi].astype(np.float64)


@dataclass
class BundledSequence:
    inputs: np.ndarray
    targets: np.ndarray
    frame_mask: np.ndarray
    offset: int = 0

    def __len__(self) -> int:
        return len(self.inputs)


def bundle_sequence(inputs: np.ndarray, targets: np.ndarray, k: int, offset: int = 0) -> BundledSequence:
    """Group frames into K-frame bundles whose first full bundle starts at ``offset``.

    Frames before ``offset`` form a leading bundle padded in front with copies
    of the first frame; a short trailing bundle is padded with copies of the
    last frame. The input of a bundle is the linguistic vector of its last
    real frame.
    """
    if k < 1:
        raise ConfigError("bundle size K must be >= 1")
    t = len(inputs)
    if t == 0:
        return BundledSequence(
            np.zeros((0, inputs.shape[1]), inputs.dtype), np.zeros((0, k * targets.shape[1]), targets.dtype),
            np.zeros((0, k), bool), offset,
        )
    lead = (k - offset % k) % k
    n_bundles = math.ceil((t + lead) / k)
    pos = np.arange(n_bundles * k) - lead  # frame index for every bundled slot
    real = (pos >= 0) & (pos < t)
    src = np.clip(pos, 0, t - 1)
    targets_b = targets[src].reshape(n_bundles, k * targets.shape[1])
    mask = real.reshape(n_bundles, k)
    last_real = np.array([src[b * k : (b + 1) * k][mask[b]][-1] for b in range(n_bundles)])
    return BundledSequence(inputs[last_real], targets_b, mask, offset)


def augment_offsets(u: UtteranceData, k: int) -> list[BundledSequence]:
    """One bundled sequence per offset 0..K-1."""
    if k < 1:
        raise ConfigError("bundle size K must be >= 1")
    return [bundle_sequence(u.linguistic, u.acoustic, k, o) for o in range(k)]


# ---------------------------------------------------------------- gradients


def zeros_like_weights(weights: Sequence[LayerWeights]) -> list[LayerWeights]:
    return [
        LayerWeights(*(None if t is None else np.zeros_like(t) for t in (w.W, w.b, w.R, w.P)))
        for w in weights
    ]


@dataclass
class Batch:
    """Time-major padded arrays: inputs (T, B, F), targets (T, B, K*d), mask (T, B, K)."""

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    @classmethod
    def stack(cls, seqs: Sequence[BundledSequence], dtype=np.float32) -> "Batch":
        n = max((len(s) for s in seqs), default=0)
        b = len(seqs)
        f = seqs[0].inputs.shape[1]
        kd = seqs[0].targets.shape[1]
        k = seqs[0].frame_mask.shape[1]
        x = np.zeros((n, b, f), dtype)
        z = np.zeros((n, b, kd), dtype)
        m = np.zeros((n, b, k), bool)
        for j, s in enumerate(seqs):
            x[: len(s), j] = s.inputs
            z[: len(s), j] = s.targets
            m[: len(s), j] = s.frame_mask
        return cls(x, z, m)

    def window(self, start: int, stop: int) -> "Batch":
        return Batch(self.inputs[start:stop], self.targets[start:stop], self.mask[start:stop])

    @property
    def n_frames(self) -> int:
        return int(self.mask.sum())


def _frame_losses(loss: LossConfig, spec: NetworkSpec, y: np.ndarray, batch: Batch):
    """Masked loss sum and dL/dy for stacked outputs ``y`` (T, B, K*d)."""
    shape = y.shape[:-1] + (spec.bundle_size, spec.frame_dim)
    f = y.reshape(shape)
    z = batch.targets.reshape(shape)
    per_frame = block_losses(loss, z, f).sum(-1)
    total = float(per_frame[batch.mask].sum())
    grad = loss_gradient(loss, z, f) * batch.mask[..., None]
    return total, grad.reshape(y.shape).astype(y.dtype)


@dataclass
class GradientResult:
    grads: list[LayerWeights]
    loss: float
    n_frames: int
    state: StreamState = field(repr=False)


def bptt_gradients(
    spec: NetworkSpec,
    weights: Sequence[LayerWeights],
    batch: Batch,
    loss: LossConfig,
    state: StreamState | None = None,
) -> GradientResult:
    """Exact gradient of the summed masked loss over one truncation window.

    ``state`` is the carry entering the window (zeros when omitted); it is
    treated as a constant. The carry leaving the window is returned.
    """
    t_len, b = batch.inputs.shape[:2]
    dtype = weights[0].W.dtype
    if state is None:
        state = StreamState.zeros(spec, batch=b, dtype=dtype)
    state = state.copy()
    grads = zeros_like_weights(weights)
    if t_len == 0:
        return GradientResult(grads, 0.0, 0, state)

    caches: list[list[dict]] = []
    outputs = []
    for t in range(t_len):
        step_cache: list[dict] = []
        try:
            outputs.append(forward_step(spec, weights, state, batch.inputs[t].astype(dtype), step_cache))
        except NumericError as exc:
            raise NumericError(f"{exc} at step {t}", layer=exc.layer, step=t) from exc
        caches.append(step_cache)
    y = np.stack(outputs)
    total, dy = _frame_losses(loss, spec, y, batch)
    if not math.isfinite(total):
        raise NumericError("non-finite loss in window", step=t_len - 1)

    carry: list = [None] * len(spec.layers)
    for t in range(t_len - 1, -1, -1):
        da = dy[t]
        for idx in range(len(spec.layers) - 1, -1, -1):
            lspec, w, g, cache = spec.layers[idx], weights[idx], grads[idx], caches[t][idx]
            if lspec.kind in RECURRENT_KINDS:
                da, carry[idx] = _lstm_backward(w, g, cache, da, carry[idx])
            elif lspec.kind == RELU:
                dpre = da * (cache["pre"] > 0)
                g.W += dpre.T @ cache["x"]
                g.b += dpre.sum(0)
                da = dpre @ w.W
            else:
                dout = da if carry[idx] is None else da + carry[idx]
                g.W += dout.T @ cache["x"]
                g.b += dout.sum(0)
                if lspec.kind == LINEAR_RECURRENT:
                    g.R += dout.T @ cache["y_prev"]
                    carry[idx] = dout @ w.R
                da = dout @ w.W
        if not np.isfinite(da).all():
            raise NumericError(f"non-finite gradient at step {t}", step=t)
    for idx, g in enumerate(grads):
        for tensor in g.tensors():
            if not np.isfinite(tensor).all():
                raise NumericError(f"non-finite gradient in layer {idx}", layer=idx)
    return GradientResult(grads, total, batch.n_frames, state)


def _lstm_backward(w: LayerWeights, g: LayerWeights, cache: dict, da: np.ndarray, carry):
    if carry is None:
        dr, dc_next = da, 0.0
    else:
        dr, dc_next = da + carry[0], carry[1]
    i, f, gg, o, tc = cache["i"], cache["f"], cache["g"], cache["o"], cache["tc"]
    if w.P is not None:
        g.P += dr.T @ cache["h"]
        dh = dr @ w.P
    else:
        dh = dr
    do = dh * tc
    dc = dc_next + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [dc * gg * i * (1.0 - i), dc * cache["c_prev"] * f * (1.0 - f), dc * i * (1.0 - gg * gg), do * o * (1.0 - o)],
        axis=-1,
    )
    g.W += dz.T @ cache["x"]
    g.R += dz.T @ cache["r_prev"]
    g.b += dz.sum(0)
    return dz @ w.W, (dz @ w.R, dc * f)


def sequence_gradients(
    spec: NetworkSpec,
    weights: Sequence[LayerWeights],
    batch: Batch,
    loss: LossConfig,
    horizon: int,
) -> tuple[list[LayerWeights], float]:
    """Gradient summed over consecutive truncation windows, without updates."""
    total = zeros_like_weights(weights)
    loss_sum = 0.0
    state = None
    for start in range(0, len(batch.inputs), horizon):
        res = bptt_gradients(spec, weights, batch.window(start, start + horizon), loss, state)
        state = res.state
        loss_sum += res.loss
        for acc, g in zip(total, res.grads):
            for a, t in zip(acc.tensors(), g.tensors()):
                a += t
    return total, loss_sum


# ---------------------------------------------------------------- training loop


def evaluate(spec: NetworkSpec, weights: Sequence[LayerWeights], seqs: Sequence[BundledSequence], loss: LossConfig) -> float:
    """Mean per-frame loss over full sequences, starting from zero state."""
    if not seqs:
        return float("nan")
    batch = Batch.stack(seqs, weights[0].W.dtype)
    state = StreamState.zeros(spec, batch=len(seqs), dtype=weights[0].W.dtype)
    y = np.stack([forward_step(spec, weights, state, x) for x in batch.inputs])
    total, _ = _frame_losses(loss, spec, y, batch)
    return total / max(batch.n_frames, 1)


def _sgd_update(weights, grads, scale: float, clip_norm: float | None) -> None:
    if clip_norm is not None:
        norm = math.sqrt(sum(float((t.astype(np.float64) ** 2).sum()) for g in grads for t in g.tensors()))
        if norm * scale > clip_norm:
            scale = clip_norm / norm
    for w, g in zip(weights, grads):
        for wt, gt in zip(w.tensors(), g.tensors()):
            wt -= np.asarray(scale, dtype=wt.dtype) * gt


def _converged(history: list[float], window: int, threshold: float) -> bool:
    if window <= 0 or len(history) <= window:
        return False
    old, new = history[-window - 1], history[-1]
    return (old - new) / max(abs(old), 1e-12) < threshold


def fit_sequences(
    spec: NetworkSpec,
    train_seqs: Sequence[BundledSequence],
    cfg: TrainConfig,
    dev_seqs: Sequence[BundledSequence] = (),
    weights: list[LayerWeights] | None = None,
) -> tuple[list[LayerWeights], list[dict]]:
    """SGD over already-bundled sequences; returns weights and the log."""
    if not train_seqs:
        raise ConfigError("empty training corpus")
    loss = cfg.loss_for(spec.frame_dim)
    if loss.dim != spec.frame_dim:
        raise ConfigError(f"loss has {loss.dim} dims, network frames have {spec.frame_dim}")
    if weights is None:
        weights = init_weights(spec, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    log: list[dict] = []
    dev_history: list[float] = []
    step = 0
    epoch = 0
    t0 = time.perf_counter()
    run_loss, run_frames = 0.0, 0

    def record() -> bool:
        nonlocal run_loss, run_frames
        dev = evaluate(spec, weights, dev_seqs, loss) if dev_seqs else float("nan")
        train_loss = run_loss / max(run_frames, 1)
        log.append(
            {
                "step": step,
                "epoch": epoch,
                "train_loss": train_loss,
                "dev_loss": dev,
                "lr": cfg.lr_at(step),
                "wallclock": time.perf_counter() - t0,
            }
        )
        run_loss, run_frames = 0.0, 0
        if not math.isfinite(train_loss) or (dev_seqs and not math.isfinite(dev)):
            raise TrainingDiverged(f"loss became non-finite at step {step}", step=step)
        if dev_seqs:
            dev_history.append(dev)
            return _converged(dev_history, cfg.convergence_window, cfg.convergence_threshold)
        return False

    done = False
    while not done:
        order = rng.permutation(len(train_seqs))
        for first in range(0, len(order), cfg.batch_size):
            batch = Batch.stack([train_seqs[i] for i in order[first : first + cfg.batch_size]])
            state = None
            for start in range(0, len(batch.inputs), cfg.bptt_horizon):
                window = batch.window(start, start + cfg.bptt_horizon)
                try:
                    res = bptt_gradients(spec, weights, window, loss, state)
                except NumericError as exc:
                    raise TrainingDiverged(f"training diverged at step {step}: {exc}", step=step) from exc
                state = res.state
                if res.n_frames:
                    _sgd_update(weights, res.grads, cfg.lr_at(step) / res.n_frames, cfg.clip_norm)
                    run_loss += res.loss
                    run_frames += res.n_frames
                step += 1
                if cfg.eval_every and step % cfg.eval_every == 0 and record():
                    done = True
                if step >= cfg.max_steps:
                    done = True
                if done:
                    break
            if done:
                break
        epoch += 1
        if not cfg.eval_every and not done:
            done = record()
    if run_frames or not log:
        record()
    return weights, log


def acoustic_sequences(corpus: Sequence[UtteranceData], k: int, augment: bool) -> list[BundledSequence]:
    seqs: list[BundledSequence] = []
    for u in corpus:
        if u.n_frames == 0:
            continue
        if augment:
            seqs.extend(augment_offsets(u, k))
        else:
            seqs.append(bundle_sequence(u.linguistic, u.acoustic, k, 0))
    return seqs


def train(
    corpus: Sequence[UtteranceData],
    spec: NetworkSpec,
    cfg: TrainConfig,
    dev: Sequence[UtteranceData] = (),
) -> tuple[list[LayerWeights], list[dict]]:
    """Train an acoustic network on normalized utterances.

    Silence frames are thinned per utterance, then sequences are bundled
    (all K offsets when ``cfg.augment``). Dev utterances are scored over all K
    offsets so the dev loss covers every alignment seen at synthesis time.
    """
    if not corpus:
        raise ConfigError("empty training corpus")
    if cfg.bundle_size != spec.bundle_size:
        raise ConfigError(f"config K={cfg.bundle_size} but network K={spec.bundle_size}")
    thinned = [remove_silence(u, cfg.silence_keep_fraction, cfg.seed * 100_003 + i) for i, u in enumerate(corpus)]
    train_seqs = acoustic_sequences(thinned, spec.bundle_size, cfg.augment)
    dev_seqs = acoustic_sequences(dev, spec.bundle_size, True)
    return fit_sequences(spec, train_seqs, cfg, dev_seqs)


def duration_sequences(corpus: Sequence[UtteranceData], norm: Normalizer) -> list[BundledSequence]:
    seqs = []
    for u in corpus:
        feats, durs = duration_data(u)
        if len(feats) == 0:
            continue
        x = norm.apply_input(feats).astype(np.float32)
        z = norm.apply_target(durs[:, None]).astype(np.float32)
        seqs.append(BundledSequence(x, z, np.ones((len(x), 1), bool)))
    return seqs


def fit_normalizer(corpus: Sequence[UtteranceData]) -> Normalizer:
    return Normalizer.fit([u.linguistic for u in corpus], [u.acoustic for u in corpus])


def fit_duration_normalizer(corpus: Sequence[UtteranceData]) -> Normalizer:
    pairs = [duration_data(u) for u in corpus]
    pairs = [p for p in pairs if len(p[0])]
    if not pairs:
        raise ConfigError("no phonemes left for duration training")
    return Normalizer.fit([f for f, _ in pairs], [d[:, None] for _, d in pairs])


def build_acoustic_model(
    train_corpus: Sequence[UtteranceData],
    spec: NetworkSpec,
    cfg: TrainConfig,
    dev_corpus: Sequence[UtteranceData] = (),
) -> tuple[LoadedModel, list[dict]]:
    """Fit normalization on raw utterances, train, and package the model."""
    norm = fit_normalizer(train_corpus)
    weights, log = train(
        [norm.normalize(u) for u in train_corpus], spec, cfg, [norm.normalize(u) for u in dev_corpus]
    )
    return LoadedModel(spec, weights, False, norm), log


def build_duration_model(
    train_corpus: Sequence[UtteranceData],
    spec: NetworkSpec,
    cfg: TrainConfig,
    dev_corpus: Sequence[UtteranceData] = (),
) -> tuple[LoadedModel, list[dict]]:
    norm = fit_duration_normalizer(train_corpus)
    dcfg = replace(cfg, bundle_size=1, loss=_duration_loss(cfg.loss))
    weights, log = fit_sequences(
        spec, duration_sequences(train_corpus, norm), dcfg, duration_sequences(dev_corpus, norm)
    )
    return LoadedModel(spec, weights, False, norm), log


def _duration_loss(loss: LossConfig | None) -> LossConfig | None:
    if loss is None:
        return None
    return replace(loss, blocks=(), sigma=(), dim=1)


# ---------------------------------------------------------------- config file

_CONFIG_KEYS = {
    "learning_rate": float,
    "duration_learning_rate": float,
    "decay": float,
    "horizon": int,
    "batch_size": int,
    "K": int,
    "loss.kind": str,
    "loss.epsilon": float,
    "loss.c": float,
    "blocks": str,
    "seed": int,
    "max_steps": int,
    "silence_keep": float,
    "augment": lambda v: v.strip().lower() in ("1", "true", "yes", "on"),
    "eval_every": int,
    "clip_norm": float,
    "frame_dim": int,
    "cells": int,
    "projection": int,
    "lstm_layers": int,
    "relu_units": int,
    "duration_cells": int,
    "corpus": str,
    "out": str,
}


def parse_blocks(text: str) -> tuple[tuple[int, ...], ...]:
    """``"0-46;47-48"`` -> ((0..46), (47, 48)); ranges are inclusive."""
    blocks = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        idx: list[int] = []
        for piece in part.split(","):
            lo, _, hi = piece.partition("-")
            idx.extend(range(int(lo), int(hi or lo) + 1))
        blocks.append(tuple(idx))
    return tuple(blocks)


def read_config(path: str | os.PathLike) -> dict:
    """Parse a ``key = value`` file (``#`` comments) into typed values."""
    values: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep or key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown or malformed entry {line!r}")
            try:
                values[key] = _CONFIG_KEYS[key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def train_config_from(values: dict, frame_dim: int, **overrides) -> TrainConfig:
    values = {**values, **{k: v for k, v in overrides.items() if v is not None}}
    kind = values.get("loss.kind", SQUARED)
    blocks = parse_blocks(values["blocks"]) if "blocks" in values else ()
    if kind == SQUARED:
        loss = LossConfig(kind=SQUARED, blocks=blocks, dim=frame_dim)
    else:
        loss = LossConfig(
            kind=kind,
            epsilon=values.get("loss.epsilon", 0.1),
            c=values.get("loss.c", 10.0),
            blocks=blocks,
            dim=frame_dim,
        )
    k = values.get("K", 1)
    return TrainConfig(
        learning_rate=values.get("learning_rate", default_learning_rate("acoustic", k, kind)),
        decay=values.get("decay", 0.9999),
        bptt_horizon=values.get("horizon", 20),
        batch_size=values.get("batch_size", 4),
        loss=loss,
        bundle_size=k,
        silence_keep_fraction=values.get("silence_keep", 0.2),
        max_steps=values.get("max_steps", 10_000),
        seed=values.get("seed", 0),
        augment=values.get("augment", True),
        eval_every=values.get("eval_every", 0),
        clip_norm=values.get("clip_norm"),
    )
