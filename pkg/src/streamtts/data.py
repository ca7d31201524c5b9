"""Shared data containers: aligned utterances and feature normalization."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np


@dataclass
class UtteranceData:
    """One aligned utterance.

    ``linguistic`` and ``acoustic`` are frame-level and equally long;
    ``phoneme_features`` holds one row per phoneme and ``phoneme_durations``
    says how many frames each phoneme spans. ``clean_acoustic`` and
    ``outlier_mask`` are only present for synthetic data, where the targets
    before outlier injection are known.
    """

    utt_id: str
    phoneme_features: np.ndarray
    phoneme_durations: np.ndarray
    linguistic: np.ndarray
    acoustic: np.ndarray
    silence_mask: np.ndarray
    clean_acoustic: np.ndarray | None = None
    outlier_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.phoneme_durations = np.asarray(self.phoneme_durations, dtype=np.int64)
        self.silence_mask = np.asarray(self.silence_mask, dtype=bool)
        self.validate()

    @property
    def n_frames(self) -> int:
        return int(self.linguistic.shape[0])

    @property
    def n_phonemes(self) -> int:
        return int(self.phoneme_features.shape[0])

    def validate(self) -> None:
        t = self.linguistic.shape[0]
        if self.acoustic.shape[0] != t:
            raise ValueError(f"{self.utt_id}: {t} linguistic frames vs {self.acoustic.shape[0]} acoustic")
        if self.silence_mask.shape != (t,):
            raise ValueError(f"{self.utt_id}: silence mask length mismatch")
        if self.phoneme_durations.shape != (self.phoneme_features.shape[0],):
            raise ValueError(f"{self.utt_id}: one duration per phoneme required")
        if int(self.phoneme_durations.sum()) != t:
            raise ValueError(f"{self.utt_id}: durations sum to {self.phoneme_durations.sum()}, not {t}")
        for extra in (self.clean_acoustic, self.outlier_mask):
            if extra is not None and extra.shape[0] != t:
                raise ValueError(f"{self.utt_id}: auxiliary target length mismatch")

    def phoneme_index(self) -> np.ndarray:
        """Phoneme number of every frame."""
        return np.repeat(np.arange(self.n_phonemes), self.phoneme_durations)

    def silent_phonemes(self) -> np.ndarray:
        """A phoneme counts as silent when all of its frames are silent."""
        if self.n_frames == 0:
            return np.zeros(self.n_phonemes, dtype=bool)
        idx = self.phoneme_index()
        voiced_frames = np.bincount(idx[~self.silence_mask], minlength=self.n_phonemes)
        return voiced_frames == 0

    def with_frames(self, keep: np.ndarray) -> "UtteranceData":
        """Sub-utterance with only the frames selected by boolean ``keep``.

        Durations are recounted and phonemes left without frames are dropped.
        """
        keep = np.asarray(keep, dtype=bool)
        counts = np.bincount(self.phoneme_index()[keep], minlength=self.n_phonemes)
        present = counts > 0

        def pick(a):
            return None if a is None else a[keep]

        return replace(
            self,
            phoneme_features=self.phoneme_features[present],
            phoneme_durations=counts[present],
            linguistic=self.linguistic[keep],
            acoustic=self.acoustic[keep],
            silence_mask=self.silence_mask[keep],
            clean_acoustic=pick(self.clean_acoustic),
            outlier_mask=pick(self.outlier_mask),
        )


@dataclass
class Normalizer:
    """Per-dimension zero-mean unit-variance scaling of inputs and targets."""

    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    STD_FLOOR = 1e-3

    @classmethod
    def fit(cls, inputs: Iterable[np.ndarray], targets: Iterable[np.ndarray], floor: float = STD_FLOOR) -> "Normalizer":
        x = np.concatenate([np.asarray(a, dtype=np.float64) for a in inputs])
        y = np.concatenate([np.asarray(a, dtype=np.float64) for a in targets])
        if len(x) == 0 or len(y) == 0:
            raise ValueError("cannot fit a normalizer on empty data")
        return cls(
            x.mean(0),
            np.maximum(x.std(0), floor),
            y.mean(0),
            np.maximum(y.std(0), floor),
        )

    @classmethod
    def identity(cls, in_dim: int, out_dim: int) -> "Normalizer":
        return cls(np.zeros(in_dim), np.ones(in_dim), np.zeros(out_dim), np.ones(out_dim))

    def apply_input(self, x: np.ndarray) -> np.ndarray:
        return (x - self.in_mean) / self.in_std

    def unapply_input(self, x: np.ndarray) -> np.ndarray:
        return x * self.in_std + self.in_mean

    def apply_target(self, y: np.ndarray) -> np.ndarray:
        return (y - self.out_mean) / self.out_std

    def unapply_target(self, y: np.ndarray) -> np.ndarray:
        return y * self.out_std + self.out_mean

    def arrays(self) -> list[np.ndarray]:
        return [self.in_mean, self.in_std, self.out_mean, self.out_std]

    def normalize(self, u: UtteranceData) -> UtteranceData:
        """Normalized float32 copy of an utterance (clean targets included)."""

        def tgt(a):
            return None if a is None else self.apply_target(a).astype(np.float32)

        return replace(
            u,
            linguistic=self.apply_input(u.linguistic).astype(np.float32),
            acoustic=tgt(u.acoustic),
            clean_acoustic=tgt(u.clean_acoustic),
        )


class ConfigError(ValueError):
    """Inconsistent configuration or arguments."""
