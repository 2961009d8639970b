"""Experiment assembly from a resolved run configuration.

Shared by the command line, the demos and the end-to-end tests so all of
them build meshes, data and checkpoints the same way.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .diffusion import NoiseSchedule, make_schedule, sample_unconditional
from .fem import EITModel, ElectrodeConfig, MeasurementSet, add_noise, place_electrodes, protocol
from .mesh import GraphHierarchy, TriMesh, build_disk_mesh, build_hierarchy
from .metrics import evaluate
from .network import ScoreNetConfig, load_checkpoint, read_kv
from .phantoms import DatasetSpec, rasterize, sample_phantom, sample_seed
from .rdps import GuidanceConfig, ReconResult, Regularizer, ddim_rdps, ddpm_rdps
from .training import TrainConfig, train

# keys that determine a trained checkpoint
TRAIN_KEYS = ("seed", "mesh_coarse_target", "family", "count", "cond_min", "cond_max",
              "inclusions_min", "inclusions_max", "size_min", "size_max", "T", "beta_start",
              "beta_end", "hidden_dim", "depth", "convs_per_block", "time_embed_dim", "knn_k",
              "learning_rate", "epochs", "batch_size", "adam_beta1", "adam_beta2", "adam_eps")


@dataclass
class Experiment:
    cfg: dict
    coarse: TriMesh
    fine: TriMesh
    hierarchy: GraphHierarchy
    electrodes_coarse: ElectrodeConfig
    electrodes_fine: ElectrodeConfig
    model_coarse: EITModel
    model_fine: EITModel
    schedule: NoiseSchedule
    net_config: ScoreNetConfig
    train_config: TrainConfig
    spec: DatasetSpec

    @property
    def hash(self) -> str:
        return cfgmod.config_hash(self.cfg)

    @property
    def train_hash(self) -> str:
        return cfgmod.config_hash(self.cfg, TRAIN_KEYS)


def net_config(cfg: dict) -> ScoreNetConfig:
    return ScoreNetConfig(cfg["hidden_dim"], cfg["depth"], cfg["convs_per_block"],
                          cfg["time_embed_dim"], cfg["knn_k"])


def dataset_spec(cfg: dict) -> DatasetSpec:
    return DatasetSpec(
        family=cfg["family"], count=cfg["count"], cond_range=(cfg["cond_min"], cfg["cond_max"]),
        inclusion_range=(cfg["inclusions_min"], cfg["inclusions_max"]),
        size_range=(cfg["size_min"], cfg["size_max"]), seed=cfgmod.substream_seed(cfg["seed"], "phantom"),
        fine_mesh=f"disk{cfg['mesh_fine_target']}", coarse_mesh=f"disk{cfg['mesh_coarse_target']}")


def build_meshes(cfg: dict) -> tuple[TriMesh, TriMesh]:
    coarse = build_disk_mesh(cfg["mesh_coarse_target"], seed=cfgmod.substream_seed(cfg["seed"], "mesh"))
    fine = build_disk_mesh(cfg["mesh_fine_target"], seed=cfgmod.substream_seed(cfg["seed"], "mesh_fine"))
    return coarse, fine


def setup(cfg: dict, meshes: tuple[TriMesh, TriMesh] | None = None) -> Experiment:
    coarse, fine = meshes if meshes is not None else build_meshes(cfg)
    hier = build_hierarchy(coarse, cfg["depth"], cfg["knn_k"])
    proto = protocol(cfg["protocol"], cfg["electrodes"], cfg["current"])
    el_c = place_electrodes(coarse, cfg["electrodes"], cfg["electrode_coverage"], cfg["contact_impedance"])
    el_f = place_electrodes(fine, cfg["electrodes"], cfg["electrode_coverage"], cfg["contact_impedance"])
    tc = TrainConfig(cfg["learning_rate"], cfg["epochs"], cfg["batch_size"], cfg["adam_beta1"],
                     cfg["adam_beta2"], cfg["adam_eps"], cfgmod.substream_seed(cfg["seed"], "init"),
                     cfg["checkpoint_every"])
    return Experiment(cfg, coarse, fine, hier, el_c, el_f, EITModel(coarse, el_c, proto),
                      EITModel(fine, el_f, proto),
                      make_schedule(cfg["T"], "linear", cfg["beta_start"], cfg["beta_end"]),
                      net_config(cfg), tc, dataset_spec(cfg))


def training_fields(exp: Experiment) -> np.ndarray:
    """Coarse-mesh fields of the training indices 0..count-1."""
    return np.array([rasterize(sample_phantom(exp.spec, sample_seed(exp.spec.seed, i)), exp.coarse)
                     for i in range(exp.spec.count)])


def test_samples(exp: Experiment, noise_kind: str | None = None, noise_level: float | None = None,
                 count: int | None = None, offset: int = 0):
    """Held-out phantoms (indices after the training set): coarse field and fine-mesh data.

    ``offset`` skips that many held-out indices, so tuning sets stay disjoint
    from test sets.  Noise uses one stream per sample index, shared by all
    noise levels.
    """
    kind = exp.cfg["noise_kind"] if noise_kind is None else noise_kind
    level = exp.cfg["noise_level"] if noise_level is None else noise_level
    out = []
    for j in range(offset, offset + (exp.cfg["test_count"] if count is None else count)):
        i = exp.spec.count + j
        ph = sample_phantom(exp.spec, sample_seed(exp.spec.seed, i))
        meas = MeasurementSet(exp.model_fine.forward(rasterize(ph, exp.fine)))
        if kind != "none":
            meas = add_noise(meas, kind, level, cfgmod.substream(exp.cfg["seed"], f"noise{j}"))
        out.append((rasterize(ph, exp.coarse), meas))
    return out


def checkpoint_dir(exp: Experiment, root) -> Path:
    return Path(root) / f"ckpt_{exp.train_hash}"


def train_or_load(exp: Experiment, root, log=None) -> dict:
    """Train unless a checkpoint for the same training configuration exists under ``root``."""
    d = checkpoint_dir(exp, root)
    if (d / "config").exists() and read_kv(d / "config").get("train_hash") == exp.train_hash:
        return load_checkpoint(d)[0]
    params, _ = train(training_fields(exp), exp.hierarchy, exp.schedule, exp.net_config,
                      exp.train_config, d, header_comment=f"config_hash={exp.train_hash}", log=log)
    with (d / "config").open("a") as fh:
        fh.write(f"train_hash={exp.train_hash}\n")
    return params


def regularizer(cfg: dict, kind: str | None = None) -> Regularizer:
    return Regularizer(cfg["regularizer"] if kind is None else kind, cfg["tv_delta"])


def guidance(cfg: dict, **over) -> GuidanceConfig:
    g = dict(eta=cfg["eta"], eps_floor=cfg["eps_floor"], lam=cfg["lambda"],
             adaptive_lambda=cfg["lambda_mode"] == "adaptive", lambda_min=cfg["lambda_min"],
             lambda_max=cfg["lambda_max"], lambda_scale=cfg["lambda_scale"], grad_mode=cfg["grad_mode"])
    g.update(over)
    return GuidanceConfig(**g)


def reconstruct(exp: Experiment, params: dict, meas: MeasurementSet, sampler: str | None = None,
                reg: Regularizer | None = None, guide: GuidanceConfig | None = None, seed=None) -> ReconResult:
    sampler = exp.cfg["sampler"] if sampler is None else sampler
    reg = regularizer(exp.cfg) if reg is None else reg
    guide = guidance(exp.cfg) if guide is None else guide
    seed = cfgmod.substream_seed(exp.cfg["seed"], "sampling") if seed is None else seed
    fn = ddim_rdps if sampler == "ddim" else ddpm_rdps
    return fn(meas, params, exp.hierarchy, exp.schedule, exp.model_coarse, reg, guide, exp.net_config, seed)


def sample(exp: Experiment, params: dict, sampler: str | None = None, seed=None) -> np.ndarray:
    sampler = exp.cfg["sampler"] if sampler is None else sampler
    seed = cfgmod.substream_seed(exp.cfg["seed"], "sampling") if seed is None else seed
    return sample_unconditional(params, exp.hierarchy, exp.schedule, exp.net_config, sampler, seed)


# --- batch evaluation -------------------------------------------------------------

_WORKER: dict = {}


def _bench_init(cfg, meshes, params):
    _WORKER["exp"] = setup(cfg, meshes)
    _WORKER["params"] = params


def _bench_one(job):
    j, x_gt, meas, sampler, reg_kind, noise_tag = job
    exp = _WORKER["exp"]
    res = reconstruct(exp, _WORKER["params"], meas, sampler, regularizer(exp.cfg, reg_kind))
    row = {"sample": j, "sampler": sampler, "regularizer": reg_kind, "noise": noise_tag}
    row.update(evaluate(x_gt, res.x0_star, exp.hierarchy.levels[0]))
    return row, res.x0_star


def thread_count() -> int:
    raw = os.environ.get("GRAPHDPS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def bench(exp: Experiment, params: dict, samples, samplers=("ddim",), regs=("tv",), noise_tag="none"):
    """One row per (sample, sampler, regularizer); parallel over jobs when allowed."""
    jobs = [(j, x, m, s, r, noise_tag) for j, (x, m) in enumerate(samples) for s in samplers for r in regs]
    n = min(thread_count(), len(jobs))
    if n <= 1:
        _bench_init(exp.cfg, (exp.coarse, exp.fine), params)
        out = [_bench_one(job) for job in jobs]
    else:
        with ProcessPoolExecutor(n, initializer=_bench_init,
                                 initargs=(exp.cfg, (exp.coarse, exp.fine), params)) as pool:
            out = list(pool.map(_bench_one, jobs))
    return [r for r, _ in out], [x for _, x in out]
