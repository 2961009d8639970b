"""Reconstruction error measures on mesh node fields."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import GraphLevel


@dataclass(frozen=True)
class MetricsConfig:
    k1: float = 0.01
    k2: float = 0.03
    data_range: float | None = None  # default: range of the ground truth

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("SSIM stabilizers must be positive")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def rmse(x_gt, x_star) -> float:
    a, b = _pair(x_gt, x_star)
    return float(np.sqrt(np.sum((a - b) ** 2) / a.size))


def rel_err(x_gt, x_star) -> float:
    a, b = _pair(x_gt, x_star)
    nrm = np.linalg.norm(a)
    if nrm == 0:
        raise ValueError("ground truth has zero norm")
    return float(np.linalg.norm(a - b) / nrm)


def one_ring_operator(graph: GraphLevel) -> sp.csr_matrix:
    """Row-normalized averaging over each node and its neighbours."""
    n = graph.node_count
    ij = graph.undirected_edges()
    rows = np.concatenate([np.arange(n), ij[:, 0], ij[:, 1]])
    cols = np.concatenate([np.arange(n), ij[:, 1], ij[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    size = np.asarray(adj.sum(axis=1)).ravel()
    return sp.diags(1.0 / size) @ adj


def graph_ssim(x_gt, x_star, graph: GraphLevel, config: MetricsConfig = MetricsConfig()) -> float:
    """Mean SSIM over one-ring windows, population statistics."""
    a, b = _pair(x_gt, x_star)
    if a.shape != (graph.node_count,):
        raise ValueError("field length does not match the graph")
    rng = config.data_range if config.data_range is not None else float(a.max() - a.min())
    if rng <= 0:
        rng = 1.0
    c1, c2 = (config.k1 * rng) ** 2, (config.k2 * rng) ** 2
    W = one_ring_operator(graph)
    mu_a, mu_b = W @ a, W @ b
    var_a = W @ (a * a) - mu_a**2
    var_b = W @ (b * b) - mu_b**2
    cov = W @ (a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


EVAL_COLUMNS = ("sample", "rmse", "rel_err", "ssim", "sampler", "regularizer", "noise")


def evaluate(x_gt, x_star, graph: GraphLevel) -> dict:
    return {"rmse": rmse(x_gt, x_star), "rel_err": rel_err(x_gt, x_star),
            "ssim": graph_ssim(x_gt, x_star, graph)}


def write_eval_table(path, rows, header_comment: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
