import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_network
from streamtts.corpus import CorpusConfig, generate
from streamtts.data import ConfigError, Normalizer, UtteranceData
from streamtts.losses import LossConfig
from streamtts.network import LayerSpec, NetworkSpec, StreamState, forward_step, init_weights
from streamtts.trainer import (
    Batch,
    TrainConfig,
    TrainingDiverged,
    augment_offsets,
    bptt_gradients,
    bundle_sequence,
    duration_data,
    evaluate,
    fit_sequences,
    default_learning_rate,
    parse_blocks,
    read_config,
    remove_silence,
    sequence_gradients,
    train,
    train_config_from,
)


def utterance(n_frames, silent=(), in_dim=3, out_dim=2, seed=0):
    rng = np.random.default_rng(seed)
    silence = np.zeros(n_frames, bool)
    silence[list(silent)] = True
    return UtteranceData(
        utt_id="u",
        phoneme_features=rng.normal(size=(n_frames, in_dim - 2)).astype(np.float32),
        phoneme_durations=np.ones(n_frames, np.int64),
        linguistic=rng.normal(size=(n_frames, in_dim)).astype(np.float32),
        acoustic=rng.normal(size=(n_frames, out_dim)).astype(np.float32),
        silence_mask=silence,
    )


def total_loss(spec, weights, batch, loss):
    return bptt_gradients(spec, weights, batch, loss).loss


def fd_check(spec, weights, batch, loss, h=1e-6, rtol=1e-3):
    """Compare every analytic weight gradient with a central difference."""
    grads = bptt_gradients(spec, weights, batch, loss).grads
    worst = 0.0
    for w, g in zip(weights, grads):
        for t, gt in zip(w.tensors(), g.tensors()):
            for idx in np.ndindex(t.shape):
                old = t[idx]
                t[idx] = old + h
                up = total_loss(spec, weights, batch, loss)
                t[idx] = old - h
                down = total_loss(spec, weights, batch, loss)
                t[idx] = old
                numeric = (up - down) / (2 * h)
                err = abs(gt[idx] - numeric) / max(abs(numeric), abs(gt[idx]), 1e-6)
                worst = max(worst, err)
    assert worst <= rtol, worst
    return worst


def toy_batch(spec, t, b, seed, pad=False):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(t, b, spec.input_dim))
    z = rng.normal(size=(t, b, spec.output_dim))
    mask = np.ones((t, b, spec.bundle_size), bool)
    if pad and t > 1:
        mask[0, 0, 0] = False
        mask[-1, -1, -1] = False
    return Batch(x, z, mask)


# ---------------------------------------------------------------- silence


def test_remove_silence_keep_all_is_identity():
    u = utterance(30, silent=range(10))
    assert remove_silence(u, 1.0, 0) is u


def test_remove_silence_exact_count():
    u = utterance(150, silent=range(100))
    out = remove_silence(u, 0.2, seed=7)
    assert out.silence_mask.sum() == 20
    assert (~out.silence_mask).sum() == 50
    np.testing.assert_array_equal(out.linguistic[~out.silence_mask], u.linguistic[100:])
    again = remove_silence(u, 0.2, seed=7)
    np.testing.assert_array_equal(again.linguistic, out.linguistic)


def test_remove_silence_voiced_unchanged():
    u = utterance(40)
    for frac in (0.0, 0.3, 1.0):
        out = remove_silence(u, frac, 3)
        np.testing.assert_array_equal(out.linguistic, u.linguistic)


def test_remove_silence_keeps_alignment_valid():
    corpus = generate(CorpusConfig(seed=2, n_utterances=5, acoustic_dim=4))
    for u in corpus:
        out = remove_silence(u, 0.2, 1)
        assert out.phoneme_durations.sum() == out.n_frames
        assert out.silence_mask.sum() == math.floor(0.2 * u.silence_mask.sum() + 0.5)


def test_duration_data_drops_edge_silences():
    u = generate(CorpusConfig(seed=1, n_utterances=1, acoustic_dim=4))[0]
    feats, durs = duration_data(u)
    assert len(feats) == u.n_phonemes - 2
    np.testing.assert_array_equal(durs, u.phoneme_durations[1:-1])


# ---------------------------------------------------------------- bundling


def test_k1_is_identity():
    u = utterance(7)
    (seq,) = augment_offsets(u, 1)
    np.testing.assert_array_equal(seq.inputs, u.linguistic)
    np.testing.assert_array_equal(seq.targets, u.acoustic)
    assert seq.frame_mask.all()


def test_k2_offset_structure():
    inputs = np.arange(4, dtype=np.float32)[:, None] + 1  # x1..x4
    targets = inputs * 10  # y1..y4
    s0 = bundle_sequence(inputs, targets, 2, 0)
    assert s0.targets.tolist() == [[10, 20], [30, 40]]
    assert s0.inputs.ravel().tolist() == [2, 4]
    s1 = bundle_sequence(inputs, targets, 2, 1)
    # {pad, y1}, {y2, y3}, {y4, pad}
    assert s1.targets.tolist() == [[10, 10], [20, 30], [40, 40]]
    assert s1.frame_mask.tolist() == [[False, True], [True, True], [True, False]]
    assert s1.inputs.ravel().tolist() == [1, 3, 4]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 5))
def test_offset_counting_and_coverage(t, k):
    u = utterance(t)
    seqs = augment_offsets(u, k)
    assert len(seqs) == k
    assert sum(len(s) for s in seqs) == sum(math.ceil((t + o) / k) for o in range(k))
    counts = np.zeros(t, int)
    d = u.acoustic.shape[1]
    for s in seqs:
        lead = (k - s.offset % k) % k
        slots = np.arange(len(s) * k) - lead
        real = s.frame_mask.ravel()
        counts[slots[real]] += 1
        frames = s.targets.reshape(-1, d)[real]
        np.testing.assert_array_equal(frames, u.acoustic[slots[real]])
        # every bundle reads the input of its last real frame
        for b in range(len(s)):
            last = slots[b * k : (b + 1) * k][s.frame_mask[b]][-1]
            np.testing.assert_array_equal(s.inputs[b], u.linguistic[last])
    assert (counts == k).all()


def test_bad_bundle_size():
    with pytest.raises(ConfigError):
        augment_offsets(utterance(4), 0)


# ---------------------------------------------------------------- gradients


def test_zero_length_segment():
    spec, weights = tiny_network(dtype=np.float64)
    res = bptt_gradients(spec, weights, toy_batch(spec, 0, 2, 0), LossConfig.squared(2))
    assert res.loss == 0.0
    assert all(not t.any() for g in res.grads for t in g.tensors())


def test_scalar_network_two_steps():
    spec = NetworkSpec(1, (LayerSpec("lstmp", 1, 1), LayerSpec("linear_recurrent", 1)), 1, 1)
    weights = init_weights(spec, 3, scale=0.8, dtype=np.float64)
    for w in weights:
        w.b[:] = 0.3
    fd_check(spec, weights, toy_batch(spec, 2, 1, 4), LossConfig.squared(1), rtol=1e-4)


@pytest.mark.parametrize("seed", range(6))
def test_bptt_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 3))
    spec, weights = tiny_network(
        seed=seed, dtype=np.float64, scale=0.6, k=k, cells=int(rng.integers(1, 9)),
        proj=int(rng.integers(0, 4)), relu=int(rng.integers(0, 5)),
    )
    for w in weights:
        w.b[:] = rng.uniform(-0.5, 0.5, w.b.shape)
    loss = LossConfig.contaminated(2) if seed % 2 else LossConfig.squared(2)
    state = StreamState.zeros(spec, batch=2, dtype=np.float64)
    for slot in state.slots:
        if slot is not None:
            for name in vars(slot):
                setattr(slot, name, rng.normal(scale=0.5, size=getattr(slot, name).shape))
    batch = toy_batch(spec, int(rng.integers(1, 6)), 2, seed + 100, pad=True)
    grads = bptt_gradients(spec, weights, batch, loss, state).grads

    def f():
        return bptt_gradients(spec, weights, batch, loss, state).loss

    for w, g in zip(weights, grads):
        for t, gt in zip(w.tensors(), g.tensors()):
            for idx in np.ndindex(t.shape):
                old = t[idx]
                t[idx] = old + 1e-6
                up = f()
                t[idx] = old - 1e-6
                down = f()
                t[idx] = old
                numeric = (up - down) / 2e-6
                assert abs(gt[idx] - numeric) <= 1e-3 * max(abs(numeric), abs(gt[idx]), 1e-6)


def test_carried_state_is_not_modified():
    spec, weights = tiny_network(dtype=np.float64)
    state = StreamState.zeros(spec, batch=2, dtype=np.float64)
    res = bptt_gradients(spec, weights, toy_batch(spec, 3, 2, 1), LossConfig.squared(2), state)
    assert not state.slots[1].c.any()
    assert res.state.slots[1].c.any()


def test_horizon_one_drops_cross_step_terms():
    spec, weights = tiny_network(seed=5, dtype=np.float64)
    batch = toy_batch(spec, 3, 1, 6)
    loss = LossConfig.squared(2)
    truncated, _ = sequence_gradients(spec, weights, batch, loss, horizon=1)

    # oracle: per-step gradients, each from the exact state reached by a plain forward pass
    state = StreamState.zeros(spec, batch=1, dtype=np.float64)
    expected = None
    for t in range(3):
        g = bptt_gradients(spec, weights, batch.window(t, t + 1), loss, state).grads
        forward_step(spec, weights, state, batch.inputs[t])
        if expected is None:
            expected = g
        else:
            for acc, gi in zip(expected, g):
                for a, b in zip(acc.tensors(), gi.tensors()):
                    a += b
    for a_layer, b_layer in zip(truncated, expected):
        for a, b in zip(a_layer.tensors(), b_layer.tensors()):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)

    full, _ = sequence_gradients(spec, weights, batch, loss, horizon=3)
    assert not np.allclose(full[1].R, truncated[1].R)


# ---------------------------------------------------------------- training


def test_learning_rate_defaults():
    assert default_learning_rate("acoustic") == 1e-5
    assert default_learning_rate("duration") == 1e-6
    assert default_learning_rate("acoustic", bundle_size=4) == 2.5e-6
    assert default_learning_rate("acoustic", loss="contaminated") == 5e-6
    assert default_learning_rate("duration", loss="contaminated") == 5e-6


def test_exponential_schedule():
    cfg = TrainConfig(learning_rate=0.1, decay=0.5)
    assert [cfg.lr_at(s) for s in range(3)] == [0.1, 0.05, 0.025]


def test_config_validation():
    for bad in (dict(learning_rate=0), dict(bundle_size=0), dict(silence_keep_fraction=1.5), dict(decay=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def _toy_seqs(k=1, n=3, dim=2, seed=0):
    return [s for i in range(n) for s in augment_offsets(utterance(17 + i, out_dim=dim, seed=seed + i), k)]


def test_empty_corpus_rejected():
    spec, _ = tiny_network()
    with pytest.raises(ConfigError):
        fit_sequences(spec, [], TrainConfig())
    with pytest.raises(ConfigError):
        train([], spec, TrainConfig())


def test_divergence_is_reported():
    spec, weights = tiny_network(scale=3.0)
    cfg = TrainConfig(learning_rate=1e6, decay=1.0, max_steps=50, batch_size=3)
    with pytest.raises(TrainingDiverged):
        fit_sequences(spec, _toy_seqs(), cfg, weights=weights)


def test_training_is_deterministic():
    spec, _ = tiny_network()
    cfg = TrainConfig(learning_rate=0.05, decay=0.999, max_steps=30, batch_size=2, bptt_horizon=5, seed=3)
    w1, log1 = fit_sequences(spec, _toy_seqs(), cfg, _toy_seqs(seed=9))
    w2, log2 = fit_sequences(spec, _toy_seqs(), cfg, _toy_seqs(seed=9))
    for a, b in zip(w1, w2):
        for ta, tb in zip(a.tensors(), b.tensors()):
            np.testing.assert_array_equal(ta, tb)
    strip = [{k: v for k, v in e.items() if k != "wallclock"} for e in log1]
    assert strip == [{k: v for k, v in e.items() if k != "wallclock"} for e in log2]
    assert {"step", "train_loss", "dev_loss", "lr", "wallclock"} <= set(log1[0])


def test_squared_and_gaussian_trajectories_identical():
    spec, _ = tiny_network(k=2)
    seqs = _toy_seqs(k=2)
    base = dict(learning_rate=0.05, decay=0.999, max_steps=40, batch_size=2, bptt_horizon=4, seed=1)
    w_sq, log_sq = fit_sequences(spec, seqs, TrainConfig(loss=LossConfig.squared(2), **base))
    w_g, log_g = fit_sequences(spec, seqs, TrainConfig(loss=LossConfig.contaminated(2, epsilon=0.0), **base))
    for a, b in zip(w_sq, w_g):
        for ta, tb in zip(a.tensors(), b.tensors()):
            np.testing.assert_array_equal(ta, tb)
    for a, b in zip(log_sq, log_g):
        assert b["train_loss"] - a["train_loss"] == pytest.approx(math.log(2 * math.pi), abs=1e-9)


def test_overfits_single_utterance():
    u = generate(CorpusConfig(seed=0, n_utterances=1, acoustic_dim=3, n_phonemes=6, phonemes_per_utterance=(3, 4)))[0]
    u = Normalizer.fit([u.linguistic], [u.acoustic]).normalize(u)
    spec = NetworkSpec(
        u.linguistic.shape[1],
        (LayerSpec("relu", 16), LayerSpec("lstmp", 16, 8), LayerSpec("linear_recurrent", 3)),
        1, 3,
    )
    seqs = [bundle_sequence(u.linguistic, u.acoustic, 1)]
    loss = LossConfig.squared(3)
    initial = evaluate(spec, init_weights(spec, 0), seqs, loss)
    cfg = TrainConfig(learning_rate=0.1, decay=1.0, max_steps=2000, clip_norm=1.0, batch_size=1, seed=0)
    weights, log = fit_sequences(spec, seqs, cfg)
    assert log[-1]["step"] == 2000
    assert evaluate(spec, weights, seqs, loss) < 0.01 * initial


def test_convergence_stops_early():
    spec, _ = tiny_network()
    seqs = _toy_seqs()
    cfg = TrainConfig(learning_rate=1e-9, decay=1.0, max_steps=10_000, batch_size=3, convergence_window=3)
    _, log = fit_sequences(spec, seqs, cfg, seqs)
    assert log[-1]["step"] < 10_000
    assert len(log) == 4


def test_train_checks_bundle_size():
    spec, _ = tiny_network(k=2)
    with pytest.raises(ConfigError):
        train([utterance(10)], spec, TrainConfig(bundle_size=1))


# ---------------------------------------------------------------- config file


def test_config_file(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text(
        "# acoustic model\nlearning_rate = 0.01\nhorizon = 10\nK = 4\nloss.kind = contaminated\n"
        "loss.epsilon = 0.2\nloss.c = 5\nblocks = 0-2;3\nseed = 9\naugment = no\n"
    )
    values = read_config(path)
    cfg = train_config_from(values, frame_dim=4)
    assert cfg.learning_rate == 0.01 and cfg.bptt_horizon == 10 and cfg.bundle_size == 4
    assert cfg.loss.epsilon == 0.2 and cfg.loss.c == 5.0 and cfg.loss.blocks == ((0, 1, 2), (3,))
    assert cfg.seed == 9 and cfg.augment is False
    assert train_config_from({}, 49, K=4).learning_rate == 2.5e-6


def test_config_file_errors(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("learning_rat = 1\n")
    with pytest.raises(ConfigError):
        read_config(path)
    path.write_text("horizon = ten\n")
    with pytest.raises(ConfigError):
        read_config(path)


def test_parse_blocks():
    assert parse_blocks("0-46;47-48") == (tuple(range(47)), (47, 48))
    assert parse_blocks("0,2;1") == ((0, 2), (1,))
