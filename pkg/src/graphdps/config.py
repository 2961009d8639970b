"""Flat key=value run configuration with typed defaults and a content hash."""

from __future__ import annotations

import hashlib
import zlib
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


# key -> default; the default's type is the parse type
DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "runs/desk",
    # meshes
    "mesh_coarse_target": 300,
    "mesh_fine_target": 1200,
    # electrodes and protocol
    "electrodes": 16,
    "electrode_coverage": 0.5,
    "contact_impedance": 1e-2,
    "current": 1e-3,
    "protocol": "opposite_adjacent",
    # dataset
    "family": "circle",
    "count": 200,
    "test_count": 10,
    "cond_min": 0.5,
    "cond_max": 1.5,
    "inclusions_min": 1,
    "inclusions_max": 3,
    "size_min": 0.12,
    "size_max": 0.3,
    # diffusion
    "T": 200,
    "beta_start": 1e-4,
    "beta_end": 2e-2,
    # network
    "hidden_dim": 16,
    "depth": 3,
    "convs_per_block": 2,
    "time_embed_dim": 16,
    "knn_k": 6,
    # training
    "learning_rate": 2.5e-3,
    "epochs": 300,
    "batch_size": 10,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "checkpoint_every": 0,
    # reconstruction
    "sampler": "ddim",
    "regularizer": "tv",
    "tv_delta": 1e-6,
    "eta": 0.05,
    "eps_floor": 1e-3,
    "lambda": 4e-3,
    "lambda_mode": "fixed",
    "lambda_min": 0.15,
    "lambda_max": 0.5,
    "lambda_scale": 1.0,
    "grad_mode": "full_backprop",
    "noise_kind": "none",
    "noise_level": 0.0,
    # inputs for single commands
    "checkpoint": "",
    "measurement": "",
    "dataset": "",
}

CHOICES = {
    "protocol": ("opposite_adjacent", "adjacent_adjacent"),
    "sampler": ("ddim", "ddpm"),
    "regularizer": ("none", "tik", "gtik", "tv"),
    "lambda_mode": ("fixed", "adaptive"),
    "grad_mode": ("full_backprop", "tweedie_jacobian_approx"),
    "noise_kind": ("none", "gaussian", "laplace"),
}


def _parse(key: str, raw: str, where: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            val = raw.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            val = int(raw)
        elif isinstance(default, float):
            val = float(raw)
        else:
            val = raw
    except ValueError:
        raise ConfigError(f"{where}: bad value {raw!r} for key {key!r}") from None
    if key in CHOICES and val not in CHOICES[key]:
        raise ConfigError(f"{where}: key {key!r} must be one of {', '.join(CHOICES[key])}")
    return val


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse key=value lines; ``#`` starts a comment.  Unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _parse(key, raw, f"{source}:{lineno}")
    return out


def resolve(path=None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        cfg.update(parse_text(Path(path).read_text(), str(path)))
    for key, raw in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"override: unknown key {key!r}")
        cfg[key] = _parse(key, str(raw), "override")
    return cfg


def dump(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


def config_hash(cfg: dict, keys=None) -> str:
    """Hash of the canonical text of ``cfg`` (restricted to ``keys`` if given)."""
    sub = cfg if keys is None else {k: cfg[k] for k in keys}
    return hashlib.sha256(dump(sub).encode()).hexdigest()[:16]


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent named generator derived from the base seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2**31))


def write_resolved(cfg: dict, path) -> str:
    h = config_hash(cfg)
    Path(path).write_text(f"# config_hash={h}\n" + dump(cfg))
    return h
