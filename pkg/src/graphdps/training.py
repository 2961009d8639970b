"""Adam and the noise-prediction training loop."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule, training_loss
from .mesh import GraphHierarchy
from .network import (ScoreNetConfig, init_params, load_checkpoint, params_to_tape, read_arrays,
                      save_checkpoint, write_arrays)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2.5e-3
    epochs: int = 300
    batch_size: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 saves only at the end

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new dictionaries."""
    if params.keys() != grads.keys():
        raise ValueError("parameter and gradient names differ")
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1 - b1**step, 1 - b2**step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        new_p[k] = p - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(step, new_m, new_v)


def loss_and_grads(params: dict, x0_batch, schedule: NoiseSchedule, rng, hierarchy: GraphHierarchy,
                   config: ScoreNetConfig) -> tuple[float, dict]:
    tape = ad.Tape()
    pv = params_to_tape(tape, params)
    loss = training_loss(pv, x0_batch, schedule, rng, hierarchy, config)
    g = ad.backward(loss)
    return float(loss.value), {k: g[v] for k, v in pv.items()}


def _save(out_dir: Path, params, state: AdamState, net_config, epoch, rng, header):
    save_checkpoint(out_dir, params, net_config,
                    {"epoch": epoch, "adam_step": state.step, "rng_state": rng.bit_generator.state},
                    header)
    write_arrays(out_dir / "adam_m", state.m, header)
    write_arrays(out_dir / "adam_v", state.v, header)


def train(fields: np.ndarray, hierarchy: GraphHierarchy, schedule: NoiseSchedule,
          net_config: ScoreNetConfig, config: TrainConfig, out_dir=None, resume: bool = False,
          header_comment: str | None = None, log=None) -> tuple[dict, list]:
    """Train on ``fields`` (count, N) for ``config.epochs``; returns params and the epoch log.

    Randomness: one generator seeded with ``config.seed`` drives the
    initialization, the shuffles, the time steps and the noise.  With
    ``resume`` the parameters, Adam moments, epoch and generator state are
    restored from ``out_dir``.
    """
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim != 2 or len(fields) == 0:
        raise TrainingError("need a nonempty (count, N) array of fields")
    out_dir = Path(out_dir) if out_dir is not None else None
    rng = np.random.default_rng(config.seed)
    start = 0
    if resume:
        if out_dir is None:
            raise TrainingError("resume needs an output directory")
        params, _, extra = load_checkpoint(out_dir)
        state = AdamState(int(extra["adam_step"]), read_arrays(out_dir / "adam_m"), read_arrays(out_dir / "adam_v"))
        rng.bit_generator.state = json.loads(extra["rng_state"])
        start = int(extra["epoch"])
    else:
        params = init_params(net_config, int(rng.integers(2**31)))
        state = AdamState.zeros(params)
    history = []
    n = len(fields)
    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for b in range(0, n, config.batch_size):
            batch = fields[order[b:b + config.batch_size]]
            loss, grads = loss_and_grads(params, batch, schedule, rng, hierarchy, net_config)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b // config.batch_size}")
            params, state = adam_step(params, grads, state, config)
            losses.append(loss)
        row = (epoch + 1, float(np.mean(losses)), time.perf_counter() - t0)
        history.append(row)
        if log is not None:
            log(row)
        if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            _save(out_dir, params, state, net_config, epoch + 1, rng, header_comment)
    if out_dir is not None:
        _save(out_dir, params, state, net_config, config.epochs, rng, header_comment)
        write_train_log(out_dir / "train_log.csv", history, header_comment, append=resume)
    return params, history


def write_train_log(path, history, header_comment: str | None = None, append: bool = False) -> None:
    path = Path(path)
    exists = append and path.exists()
    with path.open("a" if exists else "w", newline="") as fh:
        w = csv.writer(fh)
        if not exists:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w.writerow(["epoch", "mean_loss", "wall_seconds"])
        for e, loss, sec in history:
            w.writerow([e, f"{loss:.10g}", f"{sec:.4f}"])
