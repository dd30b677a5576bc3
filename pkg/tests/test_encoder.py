import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from calm_twin.encoder import (BiEncoderRetriever, ContrastiveExample, HashingEncoder, TrainConfig,
                               batch_loss_and_grads, compose_retrieval_text, featurize, info_nce,
                               info_nce_grad, retrieval_text, summarize_trends, train)
from conftest import make_traj
from oracles import central_difference, softmax_loss


def _unit(v):
    return v / np.linalg.norm(v)


# -- featurize / embed -------------------------------------------------------

def test_featurize_identical_and_empty():
    a = featurize("Time 0: x: 1")
    assert (a != featurize("Time 0: x: 1")).nnz == 0
    assert featurize("").nnz == 0
    assert featurize([]).shape == (0, 4096)


def test_featurize_one_char_change():
    a, b = featurize(["Time 0: x: 1", "Time 0: x: 2"]).toarray()
    assert math.isclose(np.linalg.norm(a), 1.0)
    assert a @ b < 1.0


def test_embed_unit_norm_and_deterministic():
    enc = HashingEncoder(32, 512)
    texts = ["Time 0: a: 1", "something else", "x" * 50]
    e = enc.embed(texts)
    assert np.allclose(np.linalg.norm(e, axis=1), 1.0)
    assert np.array_equal(e, enc.embed(texts))


def test_embed_zero_projection_falls_back_to_e0():
    enc = HashingEncoder(8, 64)
    e, flags = enc.embed(["", "abc def"], return_flags=True)
    assert flags.tolist() == [True, False]
    assert e[0].tolist() == [1.0] + [0.0] * 7


def test_identity_block_gives_truncated_features():
    W = np.vstack([np.eye(64), np.zeros((0, 64))])
    enc = HashingEncoder(64, 64, weights=W)
    text = "Time 0: x: 1, y: 2 | Time 1: x: 3"
    f = featurize(text, 64).toarray()[0]
    assert np.allclose(enc.embed([text])[0], f / np.linalg.norm(f))


def test_bad_weights_rejected():
    with pytest.raises(ValueError):
        HashingEncoder(4, 8, weights=np.zeros((8, 5)))
    with pytest.raises(ValueError):
        HashingEncoder(4, 8, weights=np.full((8, 4), np.nan))
    with pytest.raises(ValueError):
        HashingEncoder(4, 8, tower="other")


# -- InfoNCE -----------------------------------------------------------------

def _embs_with_scores(s_pos, s_negs, d=4):
    # t = e_0, each other vector has the requested dot product with it
    t = np.eye(d)[0]
    def vec(s):
        return s * t + math.sqrt(max(0.0, 1 - s * s)) * np.eye(d)[1]
    return t, vec(s_pos), np.array([vec(s) for s in s_negs])


@pytest.mark.parametrize("B", [1, 2, 5])
def test_info_nce_symmetric(B):
    t, p, n = _embs_with_scores(0.3, [0.3] * B)
    assert math.isclose(info_nce(t, p, n, 0.07), math.log(1 + B), rel_tol=1e-12)


def test_info_nce_closed_forms():
    t, p, n = _embs_with_scores(1.0, [-1.0])
    assert math.isclose(info_nce(t, p, n, 0.07), math.log1p(math.exp(-2 / 0.07)), rel_tol=1e-9)
    assert info_nce(t, p, n, 0.07) < 1e-12
    t, p, n = _embs_with_scores(0.5, [0.3])
    assert math.isclose(info_nce(t, p, n, 0.07), math.log1p(math.exp(-0.2 / 0.07)), rel_tol=1e-9)
    assert math.isclose(info_nce(t, p, n, 0.7), math.log1p(math.exp(-0.2 / 0.7)), rel_tol=1e-9)


def test_info_nce_errors():
    t, p, n = _embs_with_scores(0.5, [0.3])
    with pytest.raises(ValueError):
        info_nce(t, p, n, 0.0)
    with pytest.raises(ValueError):
        info_nce(t * np.nan, p, n, 0.07)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.floats(0.05, 2.0), st.integers(0, 2**31))
def test_info_nce_matches_direct_softmax_and_bounds(B, tau, seed):
    rng = np.random.default_rng(seed)
    t, p = _unit(rng.normal(size=6)), _unit(rng.normal(size=6))
    n = np.array([_unit(rng.normal(size=6)) for _ in range(B)])
    loss = info_nce(t, p, n, tau)
    s_pos, s_negs = float(t @ p), [float(t @ v) for v in n]
    assert math.isclose(loss, softmax_loss(s_pos, s_negs, tau), rel_tol=1e-9, abs_tol=1e-12)
    assert loss > 0
    assert loss <= math.log(1 + B) + max(0.0, max(s_negs) - s_pos) / tau + 1e-9


def test_grad_symmetric_point():
    t, p, n = _embs_with_scores(0.2, [0.2, 0.2])
    g_t, g_p, g_n = info_nce_grad(t, p, n, 0.1)
    # descent direction raises s+ and lowers each s- by the same amount
    assert -g_p @ t > 0
    assert np.allclose(-g_n @ t, -g_n[0] @ t)
    assert (-g_n[0]) @ t < 0


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        B, d = int(rng.integers(1, 4)), 5
        tau = float(rng.uniform(0.1, 1.0))
        t, p = _unit(rng.normal(size=d)), _unit(rng.normal(size=d))
        n = np.array([_unit(rng.normal(size=d)) for _ in range(B)])
        g_t, g_p, g_n = info_nce_grad(t, p, n, tau)
        fd_t = central_difference(lambda x: info_nce(x, p, n, tau), t)
        fd_p = central_difference(lambda x: info_nce(t, x, n, tau), p)
        fd_n = central_difference(lambda x: info_nce(t, p, x, tau), n)
        for a, b in ((g_t, fd_t), (g_p, fd_p), (g_n, fd_n)):
            worst = max(worst, np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))
    assert worst < 1e-4


def test_grad_vanishes_in_low_temperature_limit():
    t, p, n = _embs_with_scores(0.9, [0.1, 0.2])
    for g in info_nce_grad(t, p, n, 1e-3):
        assert np.allclose(g, 0.0, atol=1e-12)


def test_projection_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    nf, d, n, B = 12, 3, 3, 2
    F_t, F_p = sp.csr_matrix(rng.random((n, nf))), sp.csr_matrix(rng.random((n, nf)))
    F_n = sp.csr_matrix(rng.random((n * B, nf)))
    W_t, W_c = rng.normal(size=(nf, d)), rng.normal(size=(nf, d))
    _, g_t, g_c = batch_loss_and_grads(W_t, W_c, F_t, F_p, F_n, 0.5)

    def loss_t(W):
        return batch_loss_and_grads(W, W_c, F_t, F_p, F_n, 0.5)[0].mean()

    def loss_c(W):
        return batch_loss_and_grads(W_t, W, F_t, F_p, F_n, 0.5)[0].mean()

    for g, fd in ((g_t, central_difference(loss_t, W_t)), (g_c, central_difference(loss_c, W_c))):
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


# -- training ----------------------------------------------------------------

def _examples(n=24):
    rng = np.random.default_rng(3)
    out = []
    for i in range(n):
        base = f"Time 0: x: {i}, trend {'up' if i % 2 else 'down'}"
        out.append(ContrastiveExample(base, base + " match",
                                      (f"noise {rng.integers(1000)}", f"other {i * 7}"),
                                      (0.1, 0.5, 0.9)))
    return out


def test_train_lowers_loss_and_zero_lr_is_identity():
    enc_t, enc_c = HashingEncoder(16, 256, "target"), HashingEncoder(16, 256, "candidate", seed=1)
    _, _, curve = train(enc_t, enc_c, _examples(), TrainConfig(epochs=6, batch_size=8))
    assert len(curve) == 6 and curve[-1] < curve[0]

    enc_t, enc_c = HashingEncoder(16, 256, "target"), HashingEncoder(16, 256, "candidate", seed=1)
    before = enc_t.weights.copy(), enc_c.weights.copy()
    train(enc_t, enc_c, _examples(), TrainConfig(learning_rate=0.0, epochs=3))
    assert enc_t.weights.tobytes() == before[0].tobytes()
    assert enc_c.weights.tobytes() == before[1].tobytes()


def test_train_input_validation():
    enc_t, enc_c = HashingEncoder(8, 64), HashingEncoder(8, 64, "candidate")
    with pytest.raises(ValueError):
        train(enc_t, enc_c, [])
    mixed = [ContrastiveExample("a", "b", ("c",)), ContrastiveExample("a", "b", ("c", "d"))]
    with pytest.raises(ValueError):
        train(enc_t, enc_c, mixed)
    with pytest.raises(ValueError):
        TrainConfig(temperature=0)
    with pytest.raises(ValueError):
        ContrastiveExample("a", "b", ())


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.temperature) == (8, 16, 0.07)


# -- summaries and text ------------------------------------------------------

@pytest.mark.parametrize("xs, want", [([1, 2, 3], "x: [increasing]"), ([5, 5, 5], "x: [stable]"),
                                      ([1, 3, 2], "x: [increasing, decreasing]"),
                                      ([100, 100.5, 200], "x: [stable, increasing]")])
def test_rule_summaries(xs, want):
    assert summarize_trends(make_traj("t", [{"x": v} for v in xs])) == want


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=15))
def test_summary_chunks_differ_and_are_fewer_than_points(xs):
    line = summarize_trends(make_traj("t", [{"x": v} for v in xs]))
    labels = line[len("x: ["):-1].split(", ")
    assert len(labels) < len(xs)
    assert all(a != b for a, b in zip(labels, labels[1:]))
    assert set(labels) <= {"increasing", "decreasing", "stable"}


def test_summary_errors():
    with pytest.raises(ValueError):
        summarize_trends(make_traj("t", [{"x": 1}]))
    with pytest.raises(ValueError):
        summarize_trends(make_traj("t", [{"x": 1}, {"x": 2}]), mode="llm")


def test_retrieval_text_summary_is_suffix():
    traj = make_traj("t", [{"x": 1.0}, {"x": 2.0}], [{"z": 1}, {"z": 0}])
    with_s, without = retrieval_text(traj), retrieval_text(traj, use_summary=False)
    assert with_s.startswith(without + "\n") and without.startswith("Time 0:")
    assert compose_retrieval_text(traj, "") == without


# -- estimator ---------------------------------------------------------------

def test_estimator_roundtrip_and_checkpoint_bytes(tmp_path):
    est = BiEncoderRetriever(dimension=8, n_features=128, epochs=2, batch_size=8)
    est.fit(_examples(12))
    assert est.get_params()["dimension"] == 8
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    est.save(a)
    loaded = BiEncoderRetriever.load(a)
    loaded.save(b)
    assert a.read_bytes() == b.read_bytes()
    texts = ["Time 0: x: 1", "Time 0: x: 9"]
    assert np.array_equal(est.transform(texts), loaded.transform(texts))
    assert loaded.digest() == est.digest()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"nope\n{}\n")
    with pytest.raises(ValueError):
        BiEncoderRetriever.load(p)


def test_zero_epochs_equals_initialization():
    a = BiEncoderRetriever(dimension=8, n_features=64, epochs=0).fit(_examples(4))
    b = BiEncoderRetriever(dimension=8, n_features=64).initialize()
    assert a.digest() == b.digest()


def test_unfitted_raises():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        BiEncoderRetriever().transform(["x"])


def test_dimension_agnostic():
    two = [make_traj(f"t{i}", [{"a": i, "b": 2 * i}, {"a": i + 1, "b": 2 * i}]) for i in range(8)]
    exs = [ContrastiveExample(retrieval_text(two[i]), retrieval_text(two[i + 1]),
                              (retrieval_text(two[(i + 4) % 8]),)) for i in range(7)]
    est = BiEncoderRetriever(dimension=8, n_features=256, epochs=2).fit(exs)
    three = make_traj("n", [{"a": 1, "b": 2, "c": 3}, {"a": 2, "b": 2, "c": 1}])
    e = est.transform([est.text(three)])
    assert e.shape == (1, 8) and math.isclose(np.linalg.norm(e), 1.0)
