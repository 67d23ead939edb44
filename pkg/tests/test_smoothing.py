import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from npsfuzz.coverage import CoverageBitmap, bitmap_from_edge_sets
from npsfuzz.errors import ConfigError, InsufficientDataError
from npsfuzz.smoothing import (CoverageModel, PatternConfig, RetrainPolicy, TrainConfig, cosine_restart_lr, decode,
                               encode, input_gradient, mutate, rank_bytes, select_target_edges, should_retrain,
                               split_indices, train)


# -- oracles -------------------------------------------------------------------

def fd_gradient(model, x, edge, step=1e-4):
    g = np.zeros_like(x)
    for i in range(len(x)):
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        g[i] = (model.logits(up[None])[0, edge] - model.logits(down[None])[0, edge]) / (2 * step)
    return g


def away_from_kinks(model, x, step):
    """True when no hidden unit changes state within the finite-difference stencil."""
    pre = x @ model.W1 + model.b1
    return np.all(np.abs(pre) > 2 * step * np.abs(model.W1).sum(axis=0))


def random_model(rng, input_len, hidden, outputs):
    return CoverageModel(rng.normal(size=(input_len, hidden)), rng.normal(size=hidden),
                         rng.normal(size=(hidden, outputs)), rng.normal(size=outputs))


def relative_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


# -- encode --------------------------------------------------------------------

def test_encode_examples():
    assert encode(bytes([0, 128, 255]), 4).tolist() == [0.0, 128 / 255, 1.0, 0.0]
    assert encode(b"", 2).tolist() == [0.0, 0.0]
    assert encode(b"\x01\x02\x03", 2).tolist() == [1 / 255, 2 / 255]


@given(st.binary(min_size=0, max_size=32))
def test_encode_decode_round_trip(data):
    assert decode(encode(data, 32), len(data)) == data


# -- gradient ------------------------------------------------------------------

def test_zero_model_zero_gradient():
    m = CoverageModel(np.zeros((8, 4)), np.zeros(4), np.zeros((4, 2)), np.zeros(2))
    assert not input_gradient(m, np.full(8, 0.5), 1).any()


def test_gradient_matches_finite_differences(rng):
    m = random_model(rng, 8, 4, 2)
    checked = 0
    while checked < 20:
        x = rng.random(8)
        if not away_from_kinks(m, x, 1e-4):
            continue
        for e in range(2):
            assert relative_error(input_gradient(m, x, e), fd_gradient(m, x, e)) < 1e-4
        checked += 1


def test_gradient_ignores_other_output_columns(rng):
    m = random_model(rng, 8, 4, 3)
    x = rng.random(8)
    before = input_gradient(m, x, 1)
    m.W2[:, [0, 2]] = rng.normal(size=(4, 2)) * 100
    assert np.array_equal(before, input_gradient(m, x, 1))


def test_gradient_edge_out_of_range(rng):
    m = random_model(rng, 4, 3, 2)
    with pytest.raises(IndexError):
        input_gradient(m, np.zeros(4), 2)


# -- rank ------------------------------------------------------------------------

def test_rank_bytes_example():
    assert rank_bytes(np.array([0.5, -0.9, 0.0, 0.2]), 2) == [(1, -1), (0, 1)]


def test_rank_bytes_k_exceeds_nonzero():
    assert rank_bytes(np.array([0.0, 0.3, 0.0, -0.3]), 10) == [(1, 1), (3, -1)]


def test_rank_bytes_all_zero():
    assert rank_bytes(np.zeros(5), 3) == []


def test_rank_bytes_matches_full_sort(rng):
    for _ in range(200):
        n = int(rng.integers(1, 40))
        g = rng.integers(-5, 6, size=n) / 4.0  # plenty of ties and zeros
        k = int(rng.integers(1, 50))
        oracle = sorted((i for i in range(n) if g[i] != 0), key=lambda i: (-abs(g[i]), i))[:k]
        assert rank_bytes(g, k) == [(i, 1 if g[i] > 0 else -1) for i in oracle]


# -- mutate ----------------------------------------------------------------------

def test_increment_ladder(rng):
    out = mutate(bytes([10]), [(0, 1)], rng, PatternConfig(steps=(1, 16, 128), chunk_max=4))
    values = [o[0] for o in out if len(o) == 1]
    assert values[:4] == [11, 26, 138, 255]


def test_decrement_ladder(rng):
    out = mutate(bytes([10]), [(0, -1)], rng, PatternConfig(chunk_max=4))
    values = [o[0] for o in out if len(o) == 1]
    assert values == sorted(values, reverse=True)
    assert values[-1] == 0 and min(values) >= 0


def test_deletion_never_empties(rng):
    for _ in range(50):
        assert all(len(o) >= 1 for o in mutate(bytes([10]), [(0, 1)], rng))


def test_offsets_past_seed_end(rng):
    out = mutate(b"ab", [(5, 1)], rng, PatternConfig(chunk_max=3))
    # only the insertion survives, appended at the end
    assert len(out) == 1 and out[0][:2] == b"ab" and 3 <= len(out[0]) <= 5


@settings(max_examples=100, deadline=None)
@given(st.binary(min_size=1, max_size=40), st.lists(st.tuples(st.integers(0, 50), st.sampled_from([-1, 1])),
                                                    max_size=6), st.integers(0, 2**32 - 1))
def test_mutation_bounds(seed, hot, rng_seed):
    cfg = PatternConfig(chunk_max=32, max_input_len=48)
    out = mutate(seed, hot, np.random.default_rng(rng_seed), cfg)
    assert all(1 <= len(o) <= 48 for o in out)
    assert out == mutate(seed, hot, np.random.default_rng(rng_seed), cfg)


def test_value_ladder_is_monotone(rng):
    for v in range(256):
        for sign in (1, -1):
            out = [o[0] for o in mutate(bytes([v]), [(0, sign)], rng, PatternConfig(chunk_max=1))
                   if len(o) == 1]
            assert out == (sorted(out) if sign > 0 else sorted(out, reverse=True))
            assert len(out) == len(set(out)) <= 9


# -- retrain policy -------------------------------------------------------------

def test_retrain_gate():
    p = RetrainPolicy()
    assert not should_retrain(p, 199, 199, 0, trained_before=False)
    assert should_retrain(p, 200, 200, 0, trained_before=False)


def test_retrain_needs_ten_new():
    p = RetrainPolicy()
    assert not should_retrain(p, 400, 9, 10_000, trained_before=True)
    assert should_retrain(p, 400, 10, 10_000, trained_before=True)


def test_retrain_interval():
    p = RetrainPolicy(min_interval=3600)
    assert not should_retrain(p, 400, 50, 3599, trained_before=True)
    assert should_retrain(p, 400, 50, 3600, trained_before=True)


def test_retrain_policy_rejects_nonpositive():
    with pytest.raises(ConfigError):
        RetrainPolicy(min_corpus=0)


# -- target edge selection --------------------------------------------------------

def test_select_single_column(rng):
    bm = bitmap_from_edge_sets([{0}, {0}], ["a", "b"])
    assert all(select_target_edges(bm, 1, rng) == [0] for _ in range(10))


def test_select_prefers_rare(rng):
    rows = np.zeros((10, 2), np.uint8)
    rows[:9, 0] = 1
    rows[9, 1] = 1
    bm = CoverageBitmap(rows, ((0,), (1,)), tuple(map(str, range(10))))
    picks = np.array([select_target_edges(bm, 1, rng)[0] for _ in range(10_000)])
    rare = (picks == 1).mean()
    # weights 1/0.9 and 1/0.1 -> rare share 0.9
    assert rare > 0.5
    assert rare == pytest.approx(0.9, abs=0.02)


def test_select_permutation(rng):
    bm = bitmap_from_edge_sets([{0, 1}, {0, 2}, {3, 0}], ["a", "b", "c"])
    assert sorted(select_target_edges(bm, 10, rng)) == list(range(bm.num_columns))


def test_select_deterministic():
    bm = bitmap_from_edge_sets([{0, 1}, {0, 2}, {3, 0}, {0}], list("abcd"))
    a = select_target_edges(bm, 2, np.random.default_rng(5))
    assert a == select_target_edges(bm, 2, np.random.default_rng(5))


# -- training -----------------------------------------------------------------------

def test_split_disjoint_and_seeded():
    tr, ho = split_indices(50, 0.1, 3)
    assert not set(tr) & set(ho)
    assert sorted(set(tr) | set(ho)) == list(range(50))
    assert len(ho) == 5
    assert np.array_equal(ho, split_indices(50, 0.1, 3)[1])


def test_split_too_small():
    with pytest.raises(InsufficientDataError):
        split_indices(1, 0.1, 0)


def test_train_requires_two_cases():
    bm = bitmap_from_edge_sets([{0}], ["a"])
    with pytest.raises(InsufficientDataError):
        train(bm, [b"a"], TrainConfig(hidden=4))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(holdout_fraction=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)


def test_separable_toy():
    # edge 1 iff byte0 > 127: a threshold oracle labels the data
    inputs = [bytes([v, 7]) for v in (0, 30, 60, 100, 140, 180, 220, 250)]
    labels = [{0, 1} if d[0] > 127 else {0} for d in inputs]
    bm = bitmap_from_edge_sets(labels, [str(i) for i in range(8)])
    cfg = TrainConfig(hidden=16, epochs=300, learning_rate=0.05, batch_size=8, holdout_fraction=0.25, seed=1)
    model, metrics = train(bm, inputs, cfg)
    assert metrics.num_samples == 2
    assert metrics.per_edge["accuracy"][1] == 1.0
    assert not set(model.train_indices) & set(model.holdout_indices)


def test_constant_label_fit():
    inputs = [bytes([i, 255 - i]) for i in range(0, 250, 10)]
    bm = bitmap_from_edge_sets([{0}] * len(inputs), [str(i) for i in range(len(inputs))])
    model, metrics = train(bm, inputs, TrainConfig(hidden=8, epochs=20, learning_rate=1e-2))
    hold = [inputs[i] for i in model.holdout_indices]
    assert (model.predict_inputs(hold)[:, 0] >= 0.5).all()


def test_loss_trajectory_non_increasing():
    rng = np.random.default_rng(0)
    inputs = [rng.integers(0, 256, 8, dtype=np.uint8).tobytes() for _ in range(100)]
    labels = [{0} | ({1} if d[0] > 127 else set()) | ({2} if d[3] < 64 else set()) for d in inputs]
    bm = bitmap_from_edge_sets(labels, [str(i) for i in range(100)])
    cfg = TrainConfig(hidden=16, epochs=30, learning_rate=3e-3, restart_period=10)
    model, _ = train(bm, inputs, cfg)
    loss = model.loss_history
    assert len(loss) == 30
    tol = 1e-3
    for epoch in range(1, 30):
        if epoch % cfg.restart_period == 0:
            continue  # a restart may bump the loss
        assert loss[epoch] <= loss[epoch - 1] + tol
    assert loss[-1] < loss[0]


def test_train_deterministic():
    inputs = [bytes([i, i * 3 % 256]) for i in range(40)]
    bm = bitmap_from_edge_sets([{0, 1} if i % 3 else {0} for i in range(40)], [str(i) for i in range(40)])
    cfg = TrainConfig(hidden=8, epochs=5, seed=9)
    a, ma = train(bm, inputs, cfg)
    b, mb = train(bm, inputs, cfg)
    assert np.array_equal(a.W1, b.W1) and np.array_equal(a.W2, b.W2)
    assert ma.as_dict() == mb.as_dict()


def test_model_outputs_equal_bitmap_columns():
    inputs = [bytes([i]) for i in range(20)]
    bm = bitmap_from_edge_sets([{0, i % 4} for i in range(20)], [str(i) for i in range(20)])
    model, _ = train(bm, inputs, TrainConfig(hidden=4, epochs=1))
    assert model.num_outputs == bm.num_columns
    assert model.edge_index == bm.edge_index


def test_cosine_schedule_restarts():
    assert cosine_restart_lr(1.0, 0, 10) == 1.0
    assert cosine_restart_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_restart_lr(1.0, 10, 10) == 1.0
    assert cosine_restart_lr(1.0, 9.99, 10) < 1e-3


def test_checkpoint_round_trip(tmp_path, rng):
    m = random_model(rng, 6, 3, 2)
    m.edge_index = ((0,), (1, 4))
    path = m.save(tmp_path / "m.npz")
    back = CoverageModel.load(path)
    assert np.array_equal(back.W1, m.W1) and np.array_equal(back.b2, m.b2)
    assert back.edge_index == ((0,), (1, 4))


def test_checkpoint_bad_version(tmp_path, rng):
    import json
    m = random_model(rng, 2, 2, 1)
    path = tmp_path / "bad.npz"
    np.savez(path, W1=m.W1, b1=m.b1, W2=m.W2, b2=m.b2,
             meta=np.array(json.dumps({"format": "npsfuzz-model", "version": 99})))
    with pytest.raises(ConfigError):
        CoverageModel.load(path)
