import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphdps import autodiff as ad, network as net
from graphdps.mesh import GraphHierarchy, GraphLevel, build_disk_mesh, build_hierarchy


def test_positional_encoding():
    pe = net.positional_encoding(np.array([0]), 8)[0]
    assert np.array_equal(pe, [0, 0, 0, 0, 1, 1, 1, 1])
    many = net.positional_encoding(np.arange(10_001), 16)
    assert len(np.unique(np.round(many, 12), axis=0)) == 10_001


def test_time_embedding_shape(tiny_net):
    _, _, cfg, p = tiny_net
    assert np.shape(net.time_embedding(np.array([3, 9]), p, cfg)) == (2, cfg.hidden_dim)


def test_zero_weights_give_zero_features(tiny_net):
    _, h, cfg, p = tiny_net
    zero = {k: np.zeros_like(v) for k, v in p.items()}
    g = net.batch_graph(h, 1)
    v, e = net.embed_inputs(np.ones((1, h.levels[0].node_count)), np.array([5]), g, zero, cfg)
    assert np.abs(v).max() == 0 and np.abs(e).max() == 0
    out = net.dgn_forward(np.ones((1, h.levels[0].node_count)), 5, h, zero, cfg)
    assert np.abs(out.eps).max() == 0


def test_edge_embedding_is_linear_in_length(tiny_net):
    _, h, _, p = tiny_net
    lv = net.batch_graph(h, 1).levels[0]
    doubled = net._LevelBatch(lv.n, lv.senders, lv.receivers, 2 * lv.lengths)
    assert np.allclose(net.edge_features(doubled, p), 2 * net.edge_features(lv, p))


def test_features_depend_on_time(tiny_net):
    _, h, cfg, p = tiny_net
    g = net.batch_graph(h, 1)
    x = np.ones((1, h.levels[0].node_count))
    v1, _ = net.embed_inputs(x, np.array([1]), g, p, cfg)
    v2, _ = net.embed_inputs(x, np.array([50]), g, p, cfg)
    assert not np.allclose(v1, v2)


def _random_graph(n, rng):
    coords = rng.uniform(-1, 1, size=(n, 2))
    pairs = set()
    for i in range(n):
        for j in rng.choice(n, 3, replace=False):
            if i != j:
                pairs.add((min(i, j), max(i, j)))
    e = np.array(sorted(pairs))
    e = np.concatenate([e, e[:, ::-1]])
    d = coords[e[:, 1]] - coords[e[:, 0]]
    return GraphLevel(n, e, np.hypot(d[:, 0], d[:, 1]), coords)


def test_graph_conv_is_equivariant(rng):
    cfg = net.ScoreNetConfig(hidden_dim=5, depth=1, time_embed_dim=4)
    p = net.init_params(cfg, 1)
    lv = _random_graph(20, rng)
    perm = rng.permutation(20)
    inv = np.argsort(perm)
    lv_p = GraphLevel(20, perm[lv.edge_list], lv.edge_lengths, lv.coords[inv])
    v = rng.normal(size=(20, 5))
    b, bp = net._stack_level(lv, 1), net._stack_level(lv_p, 1)
    out, _ = net.graph_conv(v, net.edge_features(b, p), b, p, "mid.conv0.")
    out_p, _ = net.graph_conv(v[inv], net.edge_features(bp, p), bp, p, "mid.conv0.")
    assert np.allclose(out_p[perm], out, atol=1e-12)


def test_conv_without_edges_is_defined():
    cfg = net.ScoreNetConfig(hidden_dim=4, depth=1, time_embed_dim=4)
    p = net.init_params(cfg, 0)
    lv = net._stack_level(GraphLevel(3, np.zeros((0, 2), int), np.zeros(0), np.eye(3)[:, :2]), 1)
    v, _ = net.graph_conv(np.ones((3, 4)), net.edge_features(lv, p), lv, p, "mid.conv0.")
    assert np.all(np.isfinite(v)) and v.shape == (3, 4)


def test_pool_and_unpool_basics():
    parent = np.array([0, 1, 2])
    v = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(net.pool(v, parent, np.ones((3, 1)), 3), v)
    parent = np.array([0, 0, 1, 1, 1])
    coarse = np.array([[1.0, 2.0], [3.0, 4.0]])
    copies = coarse[parent]
    inv = (1.0 / np.bincount(parent))[:, None]
    assert np.allclose(net.pool(copies, parent, inv, 2), coarse)
    const = np.ones((2, 2))
    W = np.hstack([np.eye(2), np.zeros((2, 2))])
    up = net.unpool(const, parent, np.zeros((5, 2)), W)
    assert np.allclose(up, 1.0)


def test_forward_shapes_and_determinism(mesh300):
    h = build_hierarchy(mesh300, 3)
    cfg = net.ScoreNetConfig()
    p = net.init_params(cfg, 0)
    x = np.random.default_rng(0).normal(size=(2, 300))
    a = net.dgn_forward(x, [3, 90], h, p, cfg)
    b = net.dgn_forward(x, [3, 90], h, p, cfg)
    assert a.eps.shape == (2, 300) and a.s.shape == (2, 300)
    assert np.array_equal(a.eps, b.eps)


def test_depth_one_network_runs():
    m = build_disk_mesh(40, 0)
    cfg = net.ScoreNetConfig(hidden_dim=4, depth=1, time_embed_dim=4)
    out = net.predict_eps(np.ones(m.n_vertices), 7, build_hierarchy(m, 1), net.init_params(cfg, 0), cfg)
    assert out.shape == (m.n_vertices,) and np.all(np.isfinite(out))


def test_batched_rows_match_single_evaluation(tiny_net, rng):
    _, h, cfg, p = tiny_net
    x = rng.normal(size=(3, h.levels[0].node_count))
    t = np.array([2, 40, 150])
    batch = net.dgn_forward(x, t, h, p, cfg).eps
    for i in range(3):
        assert np.allclose(batch[i], net.predict_eps(x[i], t[i], h, p, cfg), atol=1e-12)


def test_finite_outputs_for_bounded_inputs(tiny_net):
    _, h, cfg, _ = tiny_net
    rng = np.random.default_rng(5)
    for trial in range(100):
        p = net.init_params(cfg, trial)
        x = rng.uniform(-10, 10, size=(1, h.levels[0].node_count))
        assert np.all(np.isfinite(net.dgn_forward(x, int(rng.integers(1, 1001)), h, p, cfg).eps))


def test_parameter_gradients_match_fd(tiny_net, rng):
    _, h, cfg, p = tiny_net
    x = rng.normal(size=(2, h.levels[0].node_count))
    t = np.array([4, 77])

    def loss_of(params):
        e = net.dgn_forward(x, t, h, params, cfg).eps
        return float(np.sum(e * e))

    tape = ad.Tape()
    pv = net.params_to_tape(tape, p)
    e = net.dgn_forward(x, t, h, pv, cfg).eps
    g = ad.backward(ad.sum(ad.square(e)))
    for name, arr in p.items():
        d = rng.normal(size=arr.shape)
        plus = dict(p, **{name: arr + 1e-6 * d})
        minus = dict(p, **{name: arr - 1e-6 * d})
        fd = (loss_of(plus) - loss_of(minus)) / 2e-6
        got = float(np.sum(g[pv[name]] * d))
        assert abs(got - fd) <= 1e-4 * max(abs(fd), 1e-6), name


def test_checkpoint_round_trip(tmp_path, tiny_net):
    _, _, cfg, p = tiny_net
    net.save_checkpoint(tmp_path / "ck", p, cfg, {"epoch": 3}, "config_hash=x")
    back, cfg2, extra = net.load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg and extra["epoch"] == "3"
    assert all(back[k].tobytes() == p[k].tobytes() for k in p)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_network_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    m = build_disk_mesh(60, 1)
    h = build_hierarchy(m, 3)
    cfg = net.ScoreNetConfig(hidden_dim=6, depth=3, time_embed_dim=6)
    p = net.init_params(cfg, seed % 1000)
    perm = rng.permutation(m.n_vertices)
    x = rng.normal(size=(1, m.n_vertices))
    x_p = np.empty_like(x)
    x_p[:, perm] = x
    a = net.dgn_forward(x, 33, h, p, cfg).eps
    b = net.dgn_forward(x_p, 33, h.relabeled(perm), p, cfg).eps
    assert np.abs(b[:, perm] - a).max() <= 1e-10
