"""Command-line entry point: ``graphdps <command> [--config FILE] [--key value ...]``.

Every command resolves the configuration, writes it back to the output
directory and stamps each artifact with the configuration hash.  Failures
exit nonzero after printing one ``error: ...`` line.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import pipeline as pl
from .fem import load_measurements, save_measurements
from .mesh import save_mesh
from .metrics import evaluate, write_eval_table
from .network import load_checkpoint
from .phantoms import build_dataset, save_field
from .rdps import write_run_log

COMMANDS = ("mesh", "gen", "train", "sample", "reconstruct", "bench", "validate")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="graphdps", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", default=None, help="key=value configuration file")
    return ap


def _overrides(rest: list[str]) -> dict:
    out = {}
    it = iter(rest)
    for tok in it:
        if not tok.startswith("--"):
            raise cfgmod.ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            val = next(it, None)
            if val is None:
                raise cfgmod.ConfigError(f"missing value for --{key}")
        out[key.replace("-", "_")] = val
    return out


def _outdir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _params(cfg, exp, out: Path):
    if cfg["checkpoint"]:
        return load_checkpoint(cfg["checkpoint"])[0]
    return pl.train_or_load(exp, out)


def cmd_mesh(cfg, tag, out):
    coarse, fine = pl.build_meshes(cfg)
    save_mesh(coarse, out / "coarse.mesh", tag)
    save_mesh(fine, out / "fine.mesh", tag)
    print(f"coarse {coarse.n_vertices} nodes, fine {fine.n_vertices} nodes")


def cmd_gen(cfg, tag, out):
    exp = pl.setup(cfg)
    build_dataset(exp.spec, exp.fine, exp.coarse, exp.model_fine, out / "dataset", tag)
    test = out / "test"
    test.mkdir(exist_ok=True)
    for j, (x, meas) in enumerate(pl.test_samples(exp)):
        save_field(x, test / f"sample_{j}.field", tag)
        save_measurements(meas, test / f"sample_{j}.meas", tag)
    print(f"{exp.spec.count} training and {cfg['test_count']} test samples in {out}")


def cmd_train(cfg, tag, out):
    exp = pl.setup(cfg)
    pl.train_or_load(exp, out, log=lambda r: print(f"epoch {r[0]} loss {r[1]:.5g} ({r[2]:.1f}s)", flush=True))
    print(f"checkpoint {pl.checkpoint_dir(exp, out)}")


def cmd_sample(cfg, tag, out):
    exp = pl.setup(cfg)
    x = pl.sample(exp, _params(cfg, exp, out))
    save_field(x, out / "sample.field", tag)
    print(f"sample written to {out / 'sample.field'}")


def cmd_reconstruct(cfg, tag, out):
    if not cfg["measurement"]:
        raise cfgmod.ConfigError("reconstruct needs --measurement FILE")
    exp = pl.setup(cfg)
    meas = load_measurements(cfg["measurement"])
    res = pl.reconstruct(exp, _params(cfg, exp, out), meas)
    save_field(res.x0_star, out / "recon.field", tag)
    write_run_log(out / "recon_log.csv", res, tag)
    print(f"reconstruction written to {out / 'recon.field'}")


def cmd_bench(cfg, tag, out):
    exp = pl.setup(cfg)
    params = _params(cfg, exp, out)
    rows, _ = pl.bench(exp, params, pl.test_samples(exp), samplers=("ddim", "ddpm"),
                       regs=("none", "tik", "gtik", "tv"),
                       noise_tag=f"{cfg['noise_kind']}:{cfg['noise_level']:g}")
    write_eval_table(out / "bench.csv", rows, tag)
    for s in ("ddim", "ddpm"):
        for r in ("none", "tik", "gtik", "tv"):
            sel = [x for x in rows if x["sampler"] == s and x["regularizer"] == r]
            print(f"{s:5s} {r:5s} rmse {np.mean([x['rmse'] for x in sel]):.4f} "
                  f"relerr {np.mean([x['rel_err'] for x in sel]):.4f} ssim {np.mean([x['ssim'] for x in sel]):.4f}")


def cmd_validate(cfg, tag, out):
    from .validate import run_all

    results = run_all()
    lines = [f"{'PASS' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in results]
    (out / "validate.txt").write_text(f"# {tag}\n" + "\n".join(lines) + "\n")
    print("\n".join(lines))
    if not all(ok for _, ok, _ in results):
        raise RuntimeError("validation failed")


def main(argv=None) -> int:
    args, rest = _parser().parse_known_args(argv)
    try:
        cfg = cfgmod.resolve(args.config, _overrides(rest))
        out = _outdir(cfg)
        h = cfgmod.write_resolved(cfg, out / "resolved.config")
        globals()[f"cmd_{args.command}"](cfg, f"config_hash={h}", out)
    except Exception as exc:  # one machine-readable line, nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
