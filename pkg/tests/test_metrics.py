import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphdps import metrics
from graphdps.mesh import GraphLevel, build_disk_mesh, mesh_edges


def test_small_examples():
    assert metrics.rmse([1, 1], [1, 2]) == pytest.approx(1 / np.sqrt(2))
    assert metrics.rmse([1, 2], [1, 2]) == 0 and metrics.rel_err([1, 2], [1, 2]) == 0
    with pytest.raises(ValueError):
        metrics.rel_err([0, 0], [1, 1])


def test_ssim_extremes(mesh300, rng):
    g = mesh_edges(mesh300)
    x = rng.normal(size=300)
    assert metrics.graph_ssim(x, x, g) == pytest.approx(1.0)
    # two nodes joined by an edge: both windows hold the whole zero-mean field
    pair = GraphLevel(2, np.array([[0, 1], [1, 0]]), np.ones(2), np.zeros((2, 2)))
    a = np.array([1.0, -1.0])
    assert metrics.graph_ssim(a, -a, pair) <= 0


def test_ssim_by_hand_on_path():
    n = 3
    e = np.array([[0, 1], [1, 0], [1, 2], [2, 1]])
    g = GraphLevel(n, e, np.ones(4), np.zeros((3, 2)))
    a, b = np.array([0.0, 1.0, 2.0]), np.array([0.0, 2.0, 2.0])
    c1, c2 = (0.01 * 2) ** 2, (0.03 * 2) ** 2
    expect = []
    for win in ([0, 1], [0, 1, 2], [1, 2]):
        u, v = a[win], b[win]
        mu, mv = u.mean(), v.mean()
        cov = ((u - mu) * (v - mv)).mean()
        expect.append((2 * mu * mv + c1) * (2 * cov + c2) / ((mu**2 + mv**2 + c1) * (u.var() + v.var() + c2)))
    assert metrics.graph_ssim(a, b, g) == pytest.approx(np.mean(expect), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metric_identities(seed):
    rng = np.random.default_rng(seed)
    m = build_disk_mesh(40, 0)
    g = mesh_edges(m)
    a, b = 1 + rng.random(m.n_vertices), 1 + rng.random(m.n_vertices)
    cfg = metrics.MetricsConfig(data_range=1.0)
    assert metrics.graph_ssim(a, b, g, cfg) == pytest.approx(metrics.graph_ssim(b, a, g, cfg), abs=1e-14)
    n = len(a)
    assert metrics.rel_err(a, b) == pytest.approx(metrics.rmse(a, b) * np.sqrt(n) / np.linalg.norm(a), rel=1e-13)
    perm = rng.permutation(n)
    gp = GraphLevel(n, perm[g.edge_list], g.edge_lengths, g.coords)
    ap, bp = np.empty_like(a), np.empty_like(b)
    ap[perm], bp[perm] = a, b
    assert metrics.graph_ssim(ap, bp, gp, cfg) == pytest.approx(metrics.graph_ssim(a, b, g, cfg), abs=1e-13)


def test_eval_table(tmp_path):
    rows = [{"sample": 0, "rmse": 0.1, "rel_err": 0.2, "ssim": 0.9, "sampler": "ddim",
             "regularizer": "tv", "noise": "none"}]
    metrics.write_eval_table(tmp_path / "e.csv", rows, "config_hash=a")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[1] == "sample,rmse,rel_err,ssim,sampler,regularizer,noise"
    assert lines[2].startswith("0,0.1,0.2,0.9,ddim,tv,none")
