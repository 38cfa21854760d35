import logging

import numpy as np
import pytest

from swarmhead import gassl as gs
from swarmhead import mc_gassl as mc
from swarmhead import nn, sim
from swarmhead.nn import DenseNet, GruParams

SMALL = dict(kmax=6, refs=5, kmeans_restarts=4)


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def encode_oracle(W, h, speeds):
    for v in speeds:
        g_r = sig(W.W_r @ np.concatenate([h, v]))
        g_u = sig(W.W_u @ np.concatenate([h, v]))
        h = (1 - g_u) * h + g_u * np.tanh(W.W_h @ np.concatenate([v, g_r * h]))
    return h


def exact_ifsn(t0=4):
    in_dim = 3 * (t0 + 1) + 3 * t0 + 3
    W = np.zeros((3, in_dim))
    start = 3 * (t0 + 1) + 3 * (t0 - 1)
    W[:, start:start + 3] = 5.0 * np.eye(3)
    return gs.IfsnParams(DenseNet((in_dim, 3), ("identity",), [W], [np.zeros(3)]))


def line_data(xs, labels):
    xs = np.asarray(xs, dtype=float)
    anchors = np.stack([xs, np.zeros_like(xs), np.zeros_like(xs)], axis=1)
    return mc.LabeledWindows(np.arange(len(xs)), anchors, np.zeros((len(xs), 4, 3)), np.asarray(labels))


def blobs(centres, per=10, spread=0.05, seed=0):
    rng = np.random.default_rng(seed)
    return np.concatenate([c + spread * rng.normal(size=(per, len(c))) for c in np.asarray(centres, float)])


# ---------------------------------------------------------------- encoder

def test_encode_zero_weights_halves_each_step():
    enc = mc.GruEncoderParams(GruParams.zeros())
    anchor = np.array([1.6, -3.2, 0.8])
    np.testing.assert_allclose(mc.encode_feature(enc, anchor, np.ones((4, 3))), anchor * 0.5 ** 4, atol=1e-15)


def test_encode_matches_chain_oracle():
    rng = np.random.default_rng(0)
    enc = mc.GruEncoderParams.init(rng)
    for _ in range(10):
        a, V = rng.normal(size=3), rng.normal(size=(4, 3))
        np.testing.assert_allclose(mc.encode_feature(enc, a, V), encode_oracle(enc.params, a, V), atol=1e-13)


def test_encode_batch_and_graph_agree():
    rng = np.random.default_rng(1)
    enc = mc.GruEncoderParams.init(rng)
    A, V = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 4, 3))
    one = np.stack([[mc.encode_feature(enc, A[i, j], V[i, j]) for j in range(5)] for i in range(2)])
    np.testing.assert_allclose(mc.encode_batch(enc, A, V), one, atol=1e-13)
    np.testing.assert_allclose(mc.encode_graph(enc, A, V).data, one, atol=1e-13)


def test_encode_rejects_bad_shapes():
    enc = mc.GruEncoderParams.init(np.random.default_rng(0))
    with pytest.raises(ValueError):
        mc.encode_feature(enc, np.zeros(3), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        mc.encode_feature(enc, np.zeros(4), np.zeros((4, 3)))


# ---------------------------------------------------------------- triplets

def test_hard_sampling_picks_extremes():
    data = line_data([0.0, 1.0, 5.0, 3.0, 10.0], [0, 0, 0, 1, 1])
    assert mc.sample_triplet_hard(data, 0) == (0, 2, 3)
    assert mc.sample_triplet_hard(data, 4) == (4, 3, 2)


def test_hard_sampling_ties_go_low():
    data = line_data([0.0, 1.0, -1.0, 2.0, -2.0], [0, 0, 0, 1, 1])
    assert mc.sample_triplet_hard(data, 0) == (0, 1, 3)


def test_hard_sampling_errors():
    with pytest.raises(ValueError):
        mc.sample_triplet_hard(line_data([0, 1, 2], [0, 1, 1]), 0)
    with pytest.raises(ValueError):
        mc.sample_triplet_hard(line_data([0, 1, 2], [0, 0, 0]), 0)
    with pytest.raises(ValueError):
        mc.sample_triplet_hard(line_data([0, 1, 2], [-1, 0, 1]), 0)


def test_triplet_loss_examples():
    z = np.zeros(3)
    assert mc.triplet_loss(z, z, np.array([5.0, 0, 0]), 1.0) == 0.0
    assert mc.triplet_loss(z, z, z, 1.0) == 1.0
    assert mc.triplet_loss(z, np.array([1.0, 0, 0]), np.array([0, 0.5, 0]), 1.0) == 1.5
    with pytest.raises(ValueError):
        mc.triplet_loss(z, z, z, 0.0)


def test_triplet_batch_loss_is_summed():
    rng = np.random.default_rng(0)
    enc = mc.GruEncoderParams.init(rng)
    data = line_data(rng.uniform(0, 100, 8), [0, 0, 0, 0, 1, 1, 1, 1])
    batch = mc.make_triplet_batch(data, mc.McHyper(B=5), rng)
    e = mc.encode_batch(enc, batch.anchors, batch.speeds)
    total = sum(mc.triplet_loss(e[0, b], e[1, b], e[2, b], 1.0) for b in range(5))
    assert mc.triplet_batch_loss(enc, batch, 1.0) == pytest.approx(total, abs=1e-12)
    assert float(mc.triplet_batch_graph(enc, batch, 1.0).data) == pytest.approx(total, abs=1e-12)


def test_no_batch_without_two_clusters():
    data = line_data([0, 1, 2], [0, 0, 0])
    assert mc.make_triplet_batch(data, mc.McHyper(), np.random.default_rng(0)) is None
    assert len(line_data([0, 1, 2], [0, 1, 2]).eligible_anchors()) == 0


def _inactive_batch():
    a = np.zeros((3, 2, 3))
    a[2] = 0.9  # negatives far from the anchors, positives equal to them
    return mc.TripletBatch(a, np.zeros((3, 2, 4, 3)), np.zeros((2, 3), dtype=np.int64))


def test_metric_step_inactive_batch_is_noop():
    enc = mc.GruEncoderParams.init(np.random.default_rng(0))
    batch = _inactive_batch()
    assert mc.triplet_batch_loss(enc, batch, 1e-6) == 0.0
    out = mc.metric_step(enc, batch, 0.5, 1e-6)
    for k, v in enc.named_arrays().items():
        np.testing.assert_array_equal(out.named_arrays()[k], v)


def test_metric_step_zero_rate_is_noop():
    rng = np.random.default_rng(1)
    enc = mc.GruEncoderParams.init(rng)
    data = line_data(rng.uniform(0, 500, 8), [0, 1] * 4)
    out = mc.metric_step(enc, mc.make_triplet_batch(data, mc.McHyper(B=4), rng), 0.0, 1.0)
    for k, v in enc.named_arrays().items():
        np.testing.assert_array_equal(out.named_arrays()[k], v)


def test_metric_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    enc = mc.GruEncoderParams.init(rng)
    data = line_data(rng.uniform(0, 500, 8), [0, 1] * 4)
    data.speeds[:] = rng.normal(scale=5, size=data.speeds.shape)
    batch = mc.make_triplet_batch(data, mc.McHyper(B=4), rng)
    rep = nn.check_gradient(lambda w: mc.triplet_batch_graph(w, batch, 1.0), enc)
    assert rep.passed, rep


def test_metric_step_descends():
    rng = np.random.default_rng(3)
    enc = mc.GruEncoderParams.init(rng)
    data = line_data(rng.uniform(0, 500, 8), [0, 1] * 4)
    data.speeds[:] = rng.normal(scale=5, size=data.speeds.shape)
    batch = mc.make_triplet_batch(data, mc.McHyper(B=8), rng)
    before = mc.triplet_batch_loss(enc, batch, 1.0)
    after = mc.triplet_batch_loss(mc.metric_step(enc, batch, 1e-3, 1.0), batch, 1.0)
    assert before > 0 and after < before


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        mc.metric_grad(mc.GruEncoderParams.init(np.random.default_rng(0)), None, 1.0)


# ---------------------------------------------------------------- meta-learning

def test_meta_train_skips_degenerate_episode():
    one = line_data([0, 1, 2], [0, 0, 0])
    meta = mc.MetaDataset([mc.MetaEpisode("f1", sim.IfsSpec.table("f1"), one, one)])
    init = mc.GruEncoderParams.init(np.random.default_rng(0))
    W, trace = mc.meta_train(meta, mc.McHyper(M0=1), init=init)
    assert W is init and trace.query_loss == []


def test_meta_train_needs_enough_episodes():
    meta = mc.MetaDataset([])
    with pytest.raises(ValueError):
        mc.meta_train(meta, mc.McHyper(M0=1))


def test_meta_dataset_is_seeded():
    hyper = mc.McHyper(M0=2, dataset_clusters=3)
    a = mc.MetaDataset.generate(hyper, seed=4, settle=5)
    b = mc.MetaDataset.generate(hyper, seed=4, settle=5)
    assert a.F == 2
    for x, y in zip(a.episodes, b.episodes):
        assert x.kind == y.kind
        np.testing.assert_array_equal(x.support.raw, y.support.raw)
        np.testing.assert_array_equal(x.query.labels, y.query.labels)
    W1, t1 = mc.meta_train(a, hyper, seed=1)
    W2, t2 = mc.meta_train(b, hyper, seed=1)
    assert t1.query_loss == t2.query_loss
    np.testing.assert_array_equal(W1.params.W_h, W2.params.W_h)


def test_random_strategy_avoids_table_gains():
    rng = np.random.default_rng(0)
    for _ in range(20):
        ifs = mc.random_strategy(rng, ("f1", "f4"))
        assert 0.5 <= ifs.kappa0 <= 1.5 and 0.0 <= ifs.kappa_n <= 0.1


# ---------------------------------------------------------------- clustering

def test_gap_three_blobs():
    x = blobs([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    assert mc.estimate_cluster_count(x, mc.McHyper(**SMALL)) == 3


def test_gap_one_blob():
    x = np.random.default_rng(1).normal(size=(30, 3))
    assert mc.estimate_cluster_count(x, mc.McHyper(**SMALL)) == 1


def test_gap_deterministic():
    x = blobs([[0, 0, 0], [1, 1, 1]], seed=2)
    h = mc.McHyper(**SMALL)
    assert mc.estimate_cluster_count(x, h, seed=5) == mc.estimate_cluster_count(x, h, seed=5) == 2


def test_gap_identical_points():
    assert mc.estimate_cluster_count(np.ones((6, 3)), mc.McHyper(**SMALL)) == 1
    with pytest.raises(ValueError):
        mc.estimate_cluster_count(np.ones((1, 3)), mc.McHyper(**SMALL))


def test_kmeans_examples():
    x = blobs([[0, 0, 0], [5, 5, 5]], per=4)
    np.testing.assert_array_equal(mc.cluster_kmeans(x, 1), np.zeros(8))
    np.testing.assert_array_equal(mc.cluster_kmeans(x, 2), [0] * 4 + [1] * 4)
    np.testing.assert_array_equal(mc.cluster_kmeans(x, 8), np.arange(8))
    with pytest.raises(ValueError):
        mc.cluster_kmeans(x, 9)


def test_absorb_singletons():
    x = np.array([[0.0], [0.1], [5.0], [5.1], [4.0]])
    np.testing.assert_array_equal(mc.absorb_singletons(x, [2, 2, 0, 0, 1]), [0, 0, 1, 1, 1])
    np.testing.assert_array_equal(mc.absorb_singletons(x[:1], [3]), [0])


# ---------------------------------------------------------------- online scoring

@pytest.fixture(scope="module")
def two_clusters():
    state = sim.init_swarm([4, 4], ifs=sim.IfsSpec.table("f1", kappa_n=0.0), seed=3)
    sim.advance(state, 30)
    return state, sim.observe(state, t_ob=20)


def test_exact_residuals_vanish_at_true_head(two_clusters):
    state, obs = two_clusters
    R = mc.residual_matrix(exact_ifsn(), obs)
    for i, u in enumerate(obs.members):
        if state.roles[u] == sim.Role.FUAV:
            j = int(np.flatnonzero(obs.members == state.cluster_id[u])[0])
            assert R[i, j] <= 1e-12


def test_online_scores_find_heads(two_clusters):
    state, obs = two_clusters
    scored, data = mc.score_leaders_online(exact_ifsn(), obs, 2)
    assert scored.scores.sum() == len(obs.members)
    assert sorted(obs.members[scored.heads].tolist()) == sorted(state.live_huavs.tolist())
    truth = state.cluster_id[obs.members]
    assert sim.clustering_purity(data.labels, truth) == 1.0
    with pytest.raises(ValueError):
        mc.score_leaders_online(exact_ifsn(), obs, 0)


def test_online_update_descends(two_clusters):
    state, obs = two_clusters
    data = mc.observation_windows(obs, state.cluster_id[obs.members])
    hyper = mc.McHyper(beta_prime=1e-3, online_steps=5, pos_scale=100.0)
    W0 = mc.GruEncoderParams.init(np.random.default_rng(0))
    batch = mc.make_triplet_batch(data, hyper, np.random.default_rng(9))
    W1 = mc.online_update(W0, data, hyper, np.random.default_rng(1))
    assert mc.triplet_batch_loss(W1, batch, 1.0) < mc.triplet_batch_loss(W0, batch, 1.0)


def test_online_update_single_cluster_warns(two_clusters, caplog):
    _, obs = two_clusters
    data = mc.observation_windows(obs, np.zeros(len(obs.members), dtype=int))
    W0 = mc.GruEncoderParams.init(np.random.default_rng(0))
    with caplog.at_level(logging.WARNING):
        assert mc.online_update(W0, data, mc.McHyper()) is W0
    assert "unchanged" in caplog.text


# ---------------------------------------------------------------- round loop

def test_detection_single_cluster():
    state = sim.init_swarm([4], ifs=sim.IfsSpec.table("f1"), seed=0)
    hyper = mc.McHyper(R_m=3, online_steps=2, **SMALL)
    ledger = mc.run_detection(state, hyper, mc.GruEncoderParams.init(np.random.default_rng(0)), seed=0)
    ledger.verify()
    assert 1 <= ledger.R <= 3
    details = ledger.extras["round_details"]
    assert len(details) == ledger.R
    assert details[0]["m_hat"] >= 1 and len(details[0]["assignments"]) == 5


def test_hyper_validation():
    with pytest.raises(ValueError):
        mc.McHyper(gamma=0)
    with pytest.raises(ValueError):
        mc.McHyper(kmax=1)
