import numpy as np
import pytest

from graphdps import cli, config
from graphdps.phantoms import load_field

TINY = """# tiny end-to-end run
mesh_coarse_target=60
mesh_fine_target=150
electrodes=8
electrode_coverage=0.7
count=4
test_count=2
T=4
hidden_dim=4
time_embed_dim=4
depth=2
epochs=1
batch_size=2
grad_mode=tweedie_jacobian_approx
"""


def test_parse_rejects_unknown_key_with_line():
    with pytest.raises(config.ConfigError, match=r"cfg:2: unknown key 'bogus'"):
        config.parse_text("seed=1\nbogus=3\n", "cfg")
    with pytest.raises(config.ConfigError, match="sampler"):
        config.parse_text("sampler=euler\n")
    with pytest.raises(config.ConfigError, match="epochs"):
        config.resolve(overrides={"epochs": "many"})


def test_resolution_and_hash(tmp_path):
    (tmp_path / "a.cfg").write_text("seed=3\neta=0.25\n")
    cfg = config.resolve(tmp_path / "a.cfg", {"T": "50"})
    assert cfg["seed"] == 3 and cfg["eta"] == 0.25 and cfg["T"] == 50 and cfg["count"] == 200
    h = config.write_resolved(cfg, tmp_path / "r.cfg")
    again = config.resolve(tmp_path / "r.cfg")
    assert config.config_hash(again) == h


def test_substreams_are_independent_and_reproducible():
    a = config.substream(0, "noise").random(3)
    assert np.array_equal(a, config.substream(0, "noise").random(3))
    assert not np.array_equal(a, config.substream(0, "mesh").random(3))


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    (d / "tiny.cfg").write_text(TINY + f"out_dir={d / 'out'}\n")
    return d


def _run(run_dir, *args):
    return cli.main([args[0], "--config", str(run_dir / "tiny.cfg"), *args[1:]])


def test_pipeline_commands(run_dir, capsys):
    out = run_dir / "out"
    assert _run(run_dir, "mesh") == 0
    assert _run(run_dir, "gen") == 0
    assert (out / "dataset" / "manifest").exists() and (out / "test" / "sample_1.meas").exists()
    assert _run(run_dir, "train") == 0
    assert _run(run_dir, "sample") == 0
    assert _run(run_dir, "reconstruct", "--measurement", str(out / "test" / "sample_0.meas"), "--eta", "0") == 0
    assert np.array_equal(load_field(out / "recon.field"), load_field(out / "sample.field"))
    h = (out / "resolved.config").read_text().splitlines()[0]
    for name in ("coarse.mesh", "sample.field", "recon.field", "recon_log.csv", "dataset/manifest"):
        assert (out / name).read_text().splitlines()[0].startswith("# config_hash=")


def test_bench_rows(run_dir):
    out = run_dir / "out"
    assert _run(run_dir, "bench") == 0
    lines = [ln for ln in (out / "bench.csv").read_text().splitlines() if not ln.startswith("#")]
    assert len(lines) == 1 + 2 * 2 * 4


def test_rerun_is_idempotent(run_dir):
    out = run_dir / "out"
    assert _run(run_dir, "sample") == 0
    first = (out / "sample.field").read_bytes()
    assert _run(run_dir, "sample") == 0
    assert (out / "sample.field").read_bytes() == first


def test_errors_are_one_line(run_dir, capsys):
    assert _run(run_dir, "reconstruct") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ConfigError")
    assert cli.main(["sample", "--no_such_key", "1"]) == 1


def test_validate_exits_zero(tmp_path):
    assert cli.main(["validate", "--out_dir", str(tmp_path)]) == 0
    assert "FAIL" not in (tmp_path / "validate.txt").read_text()
