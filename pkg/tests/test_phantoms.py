import numpy as np
import pytest
from scipy import stats

from graphdps import fem, phantoms as ph
from graphdps.mesh import build_disk_mesh


def test_conductivities_within_range():
    spec = ph.DatasetSpec(count=50)
    for i in range(50):
        for inc in ph.sample_phantom(spec, ph.sample_seed(0, i)).inclusions:
            assert 0.5 <= inc.conductivity <= 1.5


def test_wide_range_blobs():
    spec = ph.DatasetSpec(family="blob", cond_range=(0.3, 1.7))
    cond = [inc.conductivity for i in range(100) for inc in ph.sample_phantom(spec, i).inclusions]
    assert min(cond) >= 0.3 and max(cond) <= 1.7 and min(cond) < 0.5 and max(cond) > 1.5


@pytest.mark.parametrize("family", ph.SHAPES)
def test_support_stays_inside_disk(family):
    spec = ph.DatasetSpec(family=family)
    theta = np.linspace(0, 2 * np.pi, 400)
    ring = np.stack([np.cos(theta), np.sin(theta)], 1) * (1 - ph.MARGIN)
    grid = np.stack(np.meshgrid(np.linspace(-1, 1, 121), np.linspace(-1, 1, 121)), -1).reshape(-1, 2)
    outside = grid[np.hypot(*grid.T) > 1 - ph.MARGIN]
    for i in range(30):
        p = ph.sample_phantom(spec, i)
        assert 1 <= len(p.inclusions) <= 3
        for inc in p.inclusions:
            assert not inc.contains(outside).any()
            assert not inc.contains(ring).any()


def test_determinism():
    spec = ph.DatasetSpec(family="circle+triangle+blob+horseshoe")
    assert ph.sample_phantom(spec, 42) == ph.sample_phantom(spec, 42)


def test_rasterize_rules():
    mesh_pts = np.array([[0.0, 0.0], [0.9, 0.0]])
    assert np.array_equal(ph.rasterize(ph.Phantom(), mesh_pts), [1.0, 1.0])
    circ = ph.Inclusion("circle", (0.0, 0.0), (0.3,), 1.5)
    assert np.array_equal(ph.rasterize(ph.Phantom((circ,)), mesh_pts), [1.5, 1.0])
    later = ph.Inclusion("circle", (0.0, 0.0), (0.1,), 0.7)
    assert ph.rasterize(ph.Phantom((circ, later)), mesh_pts)[0] == 0.7
    assert ph.rasterize(ph.Phantom((later, circ)), mesh_pts)[0] == 1.5


def test_shape_membership_oracles():
    tri = ph.Inclusion("triangle", (0.0, 0.0), (0.4, 0.0), 2.0)
    # vertices at angles 0, 120, 240 degrees; the apothem is 0.2
    assert tri.contains(np.array([[0.39, 0.0]]))[0]
    assert not tri.contains(np.array([[-0.21, 0.0]]))[0]
    assert tri.contains(np.array([[-0.19, 0.0]]))[0]
    shoe = ph.Inclusion("horseshoe", (0.0, 0.0), (0.2, 0.3, np.pi / 2, 0.0), 2.0)
    assert not shoe.contains(np.array([[0.25, 0.0]]))[0]  # inside the opening
    assert shoe.contains(np.array([[-0.25, 0.0]]))[0]
    assert not shoe.contains(np.array([[0.0, 0.0]]))[0]
    blob = ph.Inclusion("blob", (0.0, 0.0), (0.2, 0.1, 0, 0, 0, 0.0, 0, 0, 0), 2.0)
    assert blob.contains(np.array([[0.219, 0.0]]))[0] and not blob.contains(np.array([[0.221, 0.0]]))[0]


def test_fine_and_coarse_agree_at_probes():
    spec = ph.DatasetSpec(family="circle+triangle+blob+horseshoe")
    rng = np.random.default_rng(0)
    r = np.sqrt(rng.uniform(size=100)) * 0.95
    a = rng.uniform(0, 2 * np.pi, 100)
    probes = np.stack([r * np.cos(a), r * np.sin(a)], 1)
    for i in range(10):
        p = ph.sample_phantom(spec, i)
        vals = ph.rasterize(p, probes)
        oracle = np.ones(100)
        for inc in p.inclusions:
            oracle[inc.contains(probes)] = inc.conductivity
        assert np.array_equal(vals, oracle)


def test_inclusion_conductivities_are_uniform():
    spec = ph.DatasetSpec(inclusion_range=(1, 1))
    cond = [ph.sample_phantom(spec, ph.sample_seed(3, i)).inclusions[0].conductivity for i in range(1000)]
    assert stats.kstest(cond, stats.uniform(0.5, 1.0).cdf).statistic < 0.05


def test_spec_validation():
    with pytest.raises(ph.PhantomError):
        ph.DatasetSpec(count=0)
    with pytest.raises(ph.PhantomError):
        ph.DatasetSpec(cond_range=(1.5, 0.5))
    with pytest.raises(ph.PhantomError):
        ph.DatasetSpec(family="square")
    tight = ph.DatasetSpec(inclusion_range=(3, 3), size_range=(0.8, 0.9), max_tries=20)
    with pytest.raises(ph.PhantomError):
        ph.sample_phantom(tight, 0)


def test_dataset_on_disk(tmp_path):
    coarse, fine = build_disk_mesh(60, 1), build_disk_mesh(150, 2)
    el = fem.place_electrodes(fine, 8, 0.6)
    model = fem.EITModel(fine, el, fem.protocol("opposite_adjacent", 8))
    spec = ph.DatasetSpec(count=4, seed=5)
    ph.build_dataset(spec, fine, coarse, model, tmp_path, "config_hash=q")
    kv, fields, meas = ph.load_dataset(tmp_path)
    assert kv["count"] == "4" and kv["normalization"] == "none"
    assert fields.shape == (4, coarse.n_vertices)
    vals = np.unique(fields)
    assert vals.min() >= 0.5 and vals.max() <= 1.5
    for i in range(4):
        _, fc, m = ph.build_sample(spec, i, fine, coarse, model)
        assert np.array_equal(fc, fields[i]) and np.array_equal(m.y, meas[i].y)
    with pytest.raises(ph.PhantomError):
        ph.build_dataset(spec, fine, fine, model, tmp_path / "x")
