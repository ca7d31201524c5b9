import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamtts.losses import (
    CONTAMINATED,
    LOG_2PI,
    SQUARED,
    LossConfig,
    block_losses,
    default_blocks,
    loss_gradient,
    loss_value,
    responsibility,
)

FIG_CFG = LossConfig.contaminated(1, epsilon=0.1, c=10.0)


def mixture_oracle(z, f, epsilon, c, blocks):
    """Direct (non-log-space) density evaluation, float64."""
    total = 0.0
    for b in blocks:
        r2 = float(np.sum((np.asarray(z)[list(b)] - np.asarray(f)[list(b)]) ** 2))
        n = len(b)
        narrow = (2 * math.pi) ** (-n / 2) * math.exp(-r2 / 2)
        wide = (2 * math.pi * c) ** (-n / 2) * math.exp(-r2 / (2 * c))
        total -= math.log((1 - epsilon) * narrow + epsilon * wide)
    return total


def test_heavy_tail_density_at_zero_residual():
    expected = -math.log(0.9 * (2 * math.pi) ** -0.5 + 0.1 * (20 * math.pi) ** -0.5)
    value = loss_value(FIG_CFG, np.zeros(1), np.zeros(1))
    assert value == pytest.approx(expected, abs=1e-12)
    assert value == pytest.approx(0.9898, abs=1e-4)


def test_heavier_tail_than_gaussian():
    gaussian = 0.5 * 25 + 0.5 * LOG_2PI
    assert loss_value(FIG_CFG, np.array([5.0]), np.zeros(1)) < gaussian
    gauss_cfg = LossConfig.contaminated(1, epsilon=0.0)
    assert loss_value(gauss_cfg, np.array([5.0]), np.zeros(1)) == pytest.approx(gaussian, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_epsilon_zero_is_squared_plus_constant(d, seed):
    rng = np.random.default_rng(seed)
    z, f = rng.normal(scale=3, size=(2, d))
    sq = loss_value(LossConfig.squared(d), z, f)
    ct = loss_value(LossConfig.contaminated(d, epsilon=0.0), z, f)
    assert sq == pytest.approx(0.5 * float(np.sum((z - f) ** 2)), rel=1e-12, abs=1e-12)
    assert ct - sq == pytest.approx(0.5 * d * LOG_2PI, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 9), st.floats(0.01, 0.45), st.floats(1.5, 50), st.integers(0, 2**31 - 1))
def test_matches_direct_density(d, eps, c, seed):
    rng = np.random.default_rng(seed)
    z, f = rng.normal(scale=2, size=(2, d))
    cfg = LossConfig.contaminated(d, epsilon=eps, c=c)
    assert loss_value(cfg, z, f) == pytest.approx(mixture_oracle(z, f, eps, c, cfg.blocks), rel=1e-10)


def test_log_space_stable_for_huge_residuals():
    cfg = LossConfig.contaminated(3)
    value = loss_value(cfg, np.full(3, 1e4), np.zeros(3))
    assert math.isfinite(value)
    assert responsibility(cfg, np.full(3, 1e4), np.zeros(3))[0] == pytest.approx(1.0)


def test_gradient_zero_at_mean():
    cfg = LossConfig.contaminated(9)
    z = np.random.default_rng(0).normal(size=9)
    np.testing.assert_array_equal(loss_gradient(cfg, z, z.copy()), np.zeros(9))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_epsilon_zero_gradient_is_residual(seed):
    z, f = np.random.default_rng(seed).normal(size=(2, 7)).astype(np.float32)
    g = loss_gradient(LossConfig.contaminated(7, epsilon=0.0), z, f)
    np.testing.assert_array_equal(g, f - z)
    np.testing.assert_array_equal(loss_gradient(LossConfig.squared(7), z, f), f - z)


def fd_gradient(cfg, z, f, h=1e-4):
    g = np.zeros_like(f)
    for i in range(len(f)):
        up, down = f.copy(), f.copy()
        up[i] += h
        down[i] -= h
        g[i] = (loss_value(cfg, z, up) - loss_value(cfg, z, down)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(100))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d = 9
    cfg = LossConfig.contaminated(d, epsilon=rng.uniform(0.01, 0.4), c=rng.uniform(2, 20))
    z = rng.normal(size=d)
    f = z + rng.normal(scale=rng.uniform(0.1, 5), size=d)
    analytic = loss_gradient(cfg, z, f)
    numeric = fd_gradient(cfg, z, f)
    assert np.linalg.norm(analytic - numeric) <= 1e-4 * max(np.linalg.norm(numeric), 1e-8)


def test_two_block_default_partition():
    assert default_blocks(49) == (tuple(range(47)), (47, 48))
    assert default_blocks(9) == (tuple(range(7)), (7, 8))
    assert default_blocks(1) == ((0,),)
    assert LossConfig.contaminated(9).blocks == default_blocks(9)


def test_responsibility_at_zero_residual():
    gamma = responsibility(FIG_CFG, np.zeros(1), np.zeros(1))
    expected = (0.1 / math.sqrt(10)) / (0.9 + 0.1 / math.sqrt(10))
    assert gamma[0] == pytest.approx(expected, abs=1e-12)
    assert gamma[0] == pytest.approx(0.0339, abs=1e-4)


def test_responsibility_limits():
    assert responsibility(FIG_CFG, np.array([100.0]), np.zeros(1))[0] == pytest.approx(1.0, abs=1e-12)
    zero_eps = LossConfig.contaminated(4, epsilon=0.0)
    np.testing.assert_array_equal(responsibility(zero_eps, np.ones(4) * 7, np.zeros(4)), np.zeros(2))


def test_responsibility_monotone_in_residual():
    residuals = np.linspace(0, 20, 400)
    gam = [responsibility(FIG_CFG, np.array([r]), np.zeros(1))[0] for r in residuals]
    assert np.all(np.diff(gam) >= 0)
    # strictly inside (0, 1) until it rounds to 1.0 in float64
    assert all(0 < g < 1 for r, g in zip(residuals, gam) if r <= 8)


def test_gradient_saturates():
    d = 4
    cfg = LossConfig.contaminated(d)
    gauss = LossConfig.contaminated(d, epsilon=0.0)
    for scale in (0.5, 3.0, 10.0, 40.0):
        r = np.full(d, scale)
        g = np.linalg.norm(loss_gradient(cfg, r, np.zeros(d)))
        assert g <= np.linalg.norm(r) + 1e-12
        if scale >= 10:
            assert g < np.linalg.norm(loss_gradient(gauss, r, np.zeros(d)))
    far = np.full(d, 1e3)
    np.testing.assert_allclose(loss_gradient(cfg, far, np.zeros(d)), -far / 10, rtol=1e-9)


def test_block_additivity_and_permutation():
    rng = np.random.default_rng(4)
    cfg = LossConfig.contaminated(9)
    z, f = rng.normal(scale=2, size=(2, 9))
    per_block = block_losses(cfg, z, f)
    assert per_block.shape == (2,)
    assert per_block.sum() == pytest.approx(loss_value(cfg, z, f), rel=1e-15)
    perm = np.concatenate([rng.permutation(7), [8, 7]])
    assert loss_value(cfg, z[perm], f[perm]) == pytest.approx(loss_value(cfg, z, f), rel=1e-12)


def test_batched_evaluation():
    cfg = LossConfig.contaminated(5)
    z, f = np.random.default_rng(5).normal(size=(2, 6, 3, 5))
    assert block_losses(cfg, z, f).shape == (6, 3, 2)
    assert loss_gradient(cfg, z, f).shape == (6, 3, 5)


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig.contaminated(3, epsilon=0.5)
    with pytest.raises(ValueError):
        LossConfig.contaminated(3, c=1.0)
    with pytest.raises(ValueError):
        LossConfig(kind=CONTAMINATED, blocks=((0, 1), (1, 2)), dim=3)
    with pytest.raises(ValueError):
        LossConfig(kind=CONTAMINATED, sigma=(1.0, 0.0), dim=2)
    with pytest.raises(ValueError):
        LossConfig(kind="huber", dim=2)
    assert LossConfig(kind=SQUARED, dim=3).sigma == (1.0, 1.0, 1.0)


def test_input_errors():
    cfg = LossConfig.contaminated(3)
    with pytest.raises(ValueError):
        loss_value(cfg, np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        loss_value(cfg, np.array([0.0, np.nan, 0.0]), np.zeros(3))
