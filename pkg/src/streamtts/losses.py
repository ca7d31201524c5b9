"""Squared and epsilon-contaminated Gaussian regression losses.

The contaminated loss is the negative log of a two-component Gaussian mixture
sharing the prediction as mean: weight ``1 - epsilon`` on covariance Sigma and
``epsilon`` on ``c * Sigma``. The output vector is split into blocks and every
block is an independent mixture; the total loss is the sum over blocks.

Every function works on the last axis, so ``z``/``f`` may carry leading batch
axes (frames, sequences, bundled frames).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SQUARED = "squared"
CONTAMINATED = "contaminated"

LOG_2PI = math.log(2.0 * math.pi)


def default_blocks(d: int) -> tuple[tuple[int, ...], ...]:
    """Spectral dims in one block, the trailing (log F0, vuv) pair in another."""
    if d < 3:
        return (tuple(range(d)),)
    return (tuple(range(d - 2)), (d - 2, d - 1))


@dataclass(frozen=True)
class LossConfig:
    kind: str = CONTAMINATED
    epsilon: float = 0.1
    c: float = 10.0
    blocks: tuple[tuple[int, ...], ...] = ()
    sigma: tuple[float, ...] = ()
    dim: int = 0

    def __post_init__(self) -> None:
        if self.kind not in (SQUARED, CONTAMINATED):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.epsilon < 0.5:
            raise ValueError("epsilon must lie in [0, 0.5)")
        if not self.c > 1.0:
            raise ValueError("c must be > 1")
        blocks = tuple(tuple(int(i) for i in b) for b in self.blocks)
        dim = self.dim or (sum(len(b) for b in blocks))
        if not blocks:
            if dim < 1:
                raise ValueError("need either blocks or dim")
            blocks = default_blocks(dim)
        flat = sorted(i for b in blocks for i in b)
        if flat != list(range(dim)) or any(len(b) == 0 for b in blocks):
            raise ValueError(f"blocks {blocks} do not partition range({dim})")
        sigma = tuple(float(s) for s in self.sigma) or (1.0,) * dim
        if len(sigma) != dim or any(not s > 0 for s in sigma):
            raise ValueError("sigma needs one positive variance per dimension")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "dim", dim)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def squared(cls, dim: int) -> "LossConfig":
        return cls(kind=SQUARED, dim=dim)

    @classmethod
    def contaminated(cls, dim: int, epsilon: float = 0.1, c: float = 10.0, blocks=()) -> "LossConfig":
        return cls(kind=CONTAMINATED, epsilon=epsilon, c=c, blocks=blocks, dim=dim)


@dataclass
class _Plan:
    index: list[np.ndarray]
    sizes: np.ndarray
    logdet: np.ndarray
    sigma: np.ndarray = field(repr=False)


_PLANS: dict[LossConfig, _Plan] = {}


def _plan(cfg: LossConfig) -> _Plan:
    plan = _PLANS.get(cfg)
    if plan is None:
        sigma = np.asarray(cfg.sigma, dtype=np.float64)
        index = [np.asarray(b, dtype=np.intp) for b in cfg.blocks]
        plan = _Plan(
            index=index,
            sizes=np.array([len(b) for b in index], dtype=np.float64),
            logdet=np.array([np.log(sigma[b]).sum() for b in index]),
            sigma=sigma,
        )
        _PLANS[cfg] = plan
    return plan


def _check(cfg: LossConfig, z: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z)
    f = np.asarray(f)
    if z.shape != f.shape or z.shape[-1] != cfg.dim:
        raise ValueError(f"target {z.shape} / prediction {f.shape} do not match loss dim {cfg.dim}")
    if not (np.isfinite(z).all() and np.isfinite(f).all()):
        raise ValueError("non-finite target or prediction")
    return z, f


def _log_components(cfg: LossConfig, z: np.ndarray, f: np.ndarray):
    """Per-block log densities of the narrow and wide components, float64."""
    plan = _plan(cfg)
    r = z.astype(np.float64) - f.astype(np.float64)
    q_dim = r * r / plan.sigma
    q = np.stack([q_dim[..., b].sum(-1) for b in plan.index], axis=-1)
    base = 0.5 * plan.sizes * LOG_2PI + 0.5 * plan.logdet
    narrow = -base - 0.5 * q
    wide = -base - 0.5 * plan.sizes * math.log(cfg.c) - 0.5 * q / cfg.c
    return narrow, wide, r


def block_losses(cfg: LossConfig, z: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Loss per block, shape ``z.shape[:-1] + (n_blocks,)``."""
    z, f = _check(cfg, z, f)
    if cfg.kind == SQUARED:
        r = z.astype(np.float64) - f.astype(np.float64)
        return np.stack([0.5 * (r[..., b] ** 2).sum(-1) for b in _plan(cfg).index], axis=-1)
    narrow, wide, _ = _log_components(cfg, z, f)
    if cfg.epsilon == 0.0:
        return -narrow
    return -np.logaddexp(math.log1p(-cfg.epsilon) + narrow, math.log(cfg.epsilon) + wide)


def loss_value(cfg: LossConfig, z: np.ndarray, f: np.ndarray) -> float:
    """Total loss summed over blocks and any leading axes."""
    return float(block_losses(cfg, z, f).sum())


def responsibility(cfg: LossConfig, z: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Posterior weight of the wide (outlier) component, per block."""
    z, f = _check(cfg, z, f)
    narrow, wide, _ = _log_components(cfg, z, f)
    if cfg.epsilon == 0.0:
        return np.zeros_like(narrow)
    a = math.log1p(-cfg.epsilon) + narrow
    b = math.log(cfg.epsilon) + wide
    return np.exp(b - np.logaddexp(a, b))


def loss_gradient(cfg: LossConfig, z: np.ndarray, f: np.ndarray) -> np.ndarray:
    """dL/df with the dtype of ``f``.

    For the mixture, dL/df = (f - z) / sigma * (1 - g + g / c) where g is the
    wide-component responsibility of the block.
    """
    z, f = _check(cfg, z, f)
    diff = f - z
    if cfg.kind == SQUARED:
        return diff
    plan = _plan(cfg)
    gamma = responsibility(cfg, z, f)
    weight = np.empty(f.shape, dtype=np.float64)
    for k, b in enumerate(plan.index):
        weight[..., b] = ((1.0 - gamma[..., k]) + gamma[..., k] / cfg.c)[..., None]
    return (diff / plan.sigma * weight).astype(f.dtype)
