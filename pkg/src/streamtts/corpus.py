"""Seeded synthetic corpus of aligned linguistic/acoustic sequences.

Each utterance is a phoneme string framed by silences. Phonemes carry a
one-hot identity plus a few continuous features; durations depend on both.
Acoustic targets are a smooth nonlinear map of a phoneme embedding, the
continuous features and the in-phoneme position, low-pass filtered over time
with a little low-pass noise on top. Outliers are whole frames whose targets
are pushed by a fixed number of clean standard deviations within one block.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ConfigError, UtteranceData
from .losses import default_blocks
from .pipeline import FRAME_DIM, VUV_INDEX, emit_features, read_features, upsample

SILENCE = 0


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    n_utterances: int = 50
    n_phonemes: int = 24
    phonemes_per_utterance: tuple[int, int] = (6, 14)
    n_continuous: int = 3
    embedding_dim: int = 8
    duration_mean: float = 8.0
    duration_jitter: float = 0.15
    edge_silence: int = 12
    smoothness: float = 0.6
    noise_std: float = 0.05
    outlier_rate: float = 0.0
    outlier_magnitude: float = 10.0
    silence_rate: float = 0.1
    acoustic_dim: int = FRAME_DIM

    def __post_init__(self) -> None:
        for name in ("outlier_rate", "silence_rate", "smoothness"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.n_phonemes < 2:
            raise ConfigError("need at least one non-silence phoneme")
        lo, hi = self.phonemes_per_utterance
        if lo < 1 or hi < lo:
            raise ConfigError("bad phonemes_per_utterance range")
        if self.acoustic_dim < 1 or self.n_utterances < 0:
            raise ConfigError("acoustic_dim must be >= 1 and n_utterances >= 0")

    @property
    def phoneme_dim(self) -> int:
        return self.n_phonemes + self.n_continuous

    @property
    def linguistic_dim(self) -> int:
        return self.phoneme_dim + 2


@dataclass
class _Language:
    embedding: np.ndarray
    base_duration: np.ndarray
    voiced: np.ndarray
    proj: np.ndarray
    amp: np.ndarray
    slope: np.ndarray
    bias: np.ndarray


def _language(cfg: CorpusConfig) -> _Language:
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    p, e = cfg.n_phonemes, cfg.embedding_dim
    latent = e + cfg.n_continuous + 2
    base = cfg.duration_mean * rng.uniform(0.5, 1.5, size=p)
    base[SILENCE] = cfg.duration_mean
    voiced = rng.random(p) < 0.6
    voiced[SILENCE] = False
    return _Language(
        embedding=rng.normal(size=(p, e)),
        base_duration=base,
        voiced=voiced,
        proj=rng.normal(scale=1.0 / math.sqrt(latent), size=(cfg.acoustic_dim, latent)) * 1.5,
        amp=rng.uniform(0.5, 1.5, size=cfg.acoustic_dim),
        slope=rng.uniform(-0.5, 0.5, size=cfg.acoustic_dim),
        bias=rng.normal(scale=0.5, size=cfg.acoustic_dim),
    )


def _lowpass(x: np.ndarray, alpha: float) -> np.ndarray:
    out = np.empty_like(x)
    acc = x[0]
    for t in range(len(x)):
        acc = alpha * acc + (1.0 - alpha) * x[t]
        out[t] = acc
    return out


def _utterance(cfg: CorpusConfig, lang: _Language, index: int) -> UtteranceData:
    rng = np.random.default_rng([cfg.seed, index])
    lo, hi = cfg.phonemes_per_utterance
    ids = [SILENCE]
    for _ in range(int(rng.integers(lo, hi + 1))):
        if len(ids) > 1 and ids[-1] != SILENCE and rng.random() < cfg.silence_rate:
            ids.append(SILENCE)
        ids.append(int(rng.integers(1, cfg.n_phonemes)))
    ids.append(SILENCE)
    ids = np.array(ids)
    n = len(ids)

    cont = rng.uniform(-1.0, 1.0, size=(n, cfg.n_continuous))
    feats = np.zeros((n, cfg.phoneme_dim), dtype=np.float32)
    feats[np.arange(n), ids] = 1.0
    feats[:, cfg.n_phonemes :] = cont

    stretch = 1.0 + 0.3 * cont[:, 0] if cfg.n_continuous else np.ones(n)
    dur = lang.base_duration[ids] * stretch * np.exp(cfg.duration_jitter * rng.normal(size=n))
    dur = np.maximum(np.rint(dur), 1).astype(np.int64)
    dur[0] = dur[-1] = cfg.edge_silence

    linguistic = upsample(feats, dur)
    frame_ids = np.repeat(ids, dur)
    latent = np.concatenate(
        [lang.embedding[frame_ids], np.repeat(cont, dur, axis=0), linguistic[:, -2:]], axis=1
    )
    h = latent @ lang.proj.T
    raw = lang.amp * np.sin(h) + lang.slope * h + lang.bias
    noise = _lowpass(rng.normal(scale=cfg.noise_std, size=raw.shape), cfg.smoothness)
    target = _lowpass(raw, cfg.smoothness) + noise
    voiced_frames = lang.voiced[frame_ids]
    if cfg.acoustic_dim == FRAME_DIM:
        target[:, VUV_INDEX] = voiced_frames
    silence = frame_ids == SILENCE
    target = target.astype(np.float32)
    return UtteranceData(
        utt_id=f"utt{index:05d}",
        phoneme_features=feats,
        phoneme_durations=dur,
        linguistic=linguistic,
        acoustic=target,
        silence_mask=silence,
        clean_acoustic=target.copy(),
        outlier_mask=np.zeros(len(target), dtype=bool),
    )


def generate(cfg: CorpusConfig) -> list[UtteranceData]:
    """Deterministic corpus for ``cfg``; clean targets ride along on each utterance."""
    lang = _language(cfg)
    corpus = [_utterance(cfg, lang, i) for i in range(cfg.n_utterances)]
    total = sum(u.n_frames for u in corpus)
    n_out = int(math.floor(cfg.outlier_rate * total + 0.5))
    if n_out == 0 or total == 0:
        return corpus

    rng = np.random.default_rng([cfg.seed, 0x0D1E])
    std = np.concatenate([u.clean_acoustic for u in corpus]).astype(np.float64).std(0)
    std = np.where(std > 0, std, 1.0)
    blocks = default_blocks(cfg.acoustic_dim)
    offsets = np.cumsum([0] + [u.n_frames for u in corpus])
    chosen = np.sort(rng.choice(total, size=n_out, replace=False))
    which_block = rng.integers(0, len(blocks), size=n_out)
    for flat, blk in zip(chosen, which_block):
        u_idx = int(np.searchsorted(offsets, flat, side="right") - 1)
        t = int(flat - offsets[u_idx])
        u = corpus[u_idx]
        dims = list(blocks[blk])
        u.acoustic[t, dims] += (cfg.outlier_magnitude * std[dims]).astype(np.float32)
        u.outlier_mask[t] = True
    return corpus


def split(
    corpus: list[UtteranceData], fractions: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[list[UtteranceData], list[UtteranceData], list[UtteranceData]]:
    """Disjoint, exhaustive train/dev/test split by seeded permutation."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions {fractions} must be three non-negative values summing to 1")
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(fractions[0] * n + 0.5))
    n_dev = min(int(math.floor(fractions[1] * n + 0.5)), n - n_train)
    parts = (order[:n_train], order[n_train : n_train + n_dev], order[n_train + n_dev :])
    return tuple([corpus[i] for i in sorted(p)] for p in parts)  # type: ignore[return-value]


MANIFEST = "manifest.tsv"
_COLUMNS = ["utt_id", "phonemes", "frames", "outlier_count", "durations", "silent_phonemes", "outlier_frames"]


def _ints(values) -> str:
    return ",".join(str(int(v)) for v in values)


def _parse_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def save_corpus(corpus: list[UtteranceData], directory: str | os.PathLike) -> Path:
    """Feature files per utterance plus a tab-separated manifest."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(_COLUMNS)
        for u in corpus:
            emit_features(u.phoneme_features, root / f"{u.utt_id}.phon")
            emit_features(u.linguistic, root / f"{u.utt_id}.ling")
            emit_features(u.acoustic, root / f"{u.utt_id}.acou")
            if u.clean_acoustic is not None:
                emit_features(u.clean_acoustic, root / f"{u.utt_id}.clean")
            outliers = np.flatnonzero(u.outlier_mask) if u.outlier_mask is not None else []
            writer.writerow(
                [
                    u.utt_id,
                    u.n_phonemes,
                    u.n_frames,
                    len(outliers),
                    _ints(u.phoneme_durations),
                    _ints(u.silent_phonemes()),
                    _ints(outliers),
                ]
            )
    return root / MANIFEST


def load_corpus(directory: str | os.PathLike) -> list[UtteranceData]:
    root = Path(directory)
    with open(root / MANIFEST, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    corpus = []
    for row in rows:
        uid = row["utt_id"]
        durations = np.array(_parse_ints(row["durations"]), dtype=np.int64)
        silent = np.array(_parse_ints(row["silent_phonemes"]), dtype=bool)
        n_frames = int(row["frames"])
        outlier_mask = np.zeros(n_frames, dtype=bool)
        outlier_mask[_parse_ints(row["outlier_frames"])] = True
        clean_path = root / f"{uid}.clean"
        phon = read_features(root / f"{uid}.phon")
        corpus.append(
            UtteranceData(
                utt_id=uid,
                phoneme_features=phon,
                phoneme_durations=durations,
                linguistic=read_features(root / f"{uid}.ling"),
                acoustic=read_features(root / f"{uid}.acou"),
                silence_mask=np.repeat(silent, durations),
                clean_acoustic=read_features(clean_path) if clean_path.exists() else None,
                outlier_mask=outlier_mask,
            )
        )
    return corpus
