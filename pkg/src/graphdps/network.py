"""Multi-scale denoising graph network predicting the diffusion noise.

The network follows an encoder / coarsest / decoder layout over a
:class:`~graphdps.mesh.GraphHierarchy`:

* input embedding of the node values, the diffusion step and edge lengths;
* two message-passing layers per block, with mean pooling between levels on
  the way down and parent-to-child unpooling plus skip concatenation on the
  way up;
* a linear output head producing two channels per node (noise and an unused
  variance-interpolation channel).

A batch of ``B`` fields is processed by stacking the ``B`` copies of every
graph level into one disconnected graph, so every tape operation stays 2-D.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .mesh import GraphHierarchy, GraphLevel


@dataclass(frozen=True)
class ScoreNetConfig:
    hidden_dim: int = 16
    depth: int = 3
    convs_per_block: int = 2
    time_embed_dim: int = 16
    knn_k: int = 6

    def __post_init__(self):
        if self.hidden_dim < 4:
            raise ValueError("hidden_dim must be >= 4")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")


@dataclass
class ScoreNetOutput:
    eps: object  # Var or ndarray, shape (B, N)
    s: object


CONV_WEIGHTS = ("W_e", "W_v", "We1", "be1", "We2", "be2", "Wv1", "bv1", "Wv2", "bv2")


def _conv_shapes(F: int) -> dict:
    return {
        "W_e": (F, F), "W_v": (F, F),
        "We1": (F, 3 * F), "be1": (F,), "We2": (F, F), "be2": (F,),
        "Wv1": (F, 2 * F), "bv1": (F,), "Wv2": (F, F), "bv2": (F,),
    }


def block_names(config: ScoreNetConfig) -> list[tuple[str, int]]:
    """(prefix, level index) for each conv block, in execution order."""
    L = config.depth
    names = [(f"enc{k}", k) for k in range(L - 1)]
    names.append(("mid", L - 1))
    names += [(f"dec{k}", k) for k in range(L - 2, -1, -1)]
    return names


def param_shapes(config: ScoreNetConfig) -> dict[str, tuple]:
    F, d = config.hidden_dim, config.time_embed_dim
    shapes = {
        "t_embed.W_t": (F, d),
        "t_embed.W_proj": (F, F),
        "node_embed.W_n": (F, 1),
        "node_embed.W_proj": (F, 2 * F),
        "edge_embed.W_proj": (F, 1),
    }
    for prefix, _ in block_names(config):
        if prefix.startswith("dec"):
            shapes[f"{prefix}.unpool.W"] = (F, 2 * F)
        for c in range(config.convs_per_block):
            for name, shp in _conv_shapes(F).items():
                shapes[f"{prefix}.conv{c}.{name}"] = shp
    shapes["out.W"] = (2, F)
    shapes["out.b"] = (2,)
    return shapes


def init_params(config: ScoreNetConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform weight matrices, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def positional_encoding(t, dim: int) -> np.ndarray:
    """Sinusoidal encoding ``[sin(t w_k) ..., cos(t w_k) ...]``, one row per ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# --- batched graph structure -------------------------------------------------


@dataclass(frozen=True)
class _LevelBatch:
    n: int
    senders: np.ndarray
    receivers: np.ndarray
    lengths: np.ndarray  # (E, 1)


@dataclass(frozen=True)
class _BatchGraph:
    levels: tuple
    parents: tuple  # parent maps in stacked numbering
    inv_counts: tuple  # (n_coarse, 1) reciprocal child counts
    batch_of_node: np.ndarray


def _stack_level(level: GraphLevel, B: int) -> _LevelBatch:
    n = level.node_count
    off = (np.arange(B) * n)[:, None]
    s = (level.senders[None, :] + off).ravel()
    r = (level.receivers[None, :] + off).ravel()
    lengths = np.tile(level.edge_lengths, B)[:, None]
    return _LevelBatch(n * B, s, r, lengths)


_batch_cache: dict = {}


def batch_graph(hierarchy: GraphHierarchy, B: int) -> _BatchGraph:
    key = (id(hierarchy), B)
    hit = _batch_cache.get(key)
    if hit is not None and hit[0] is hierarchy:
        return hit[1]
    levels = tuple(_stack_level(lv, B) for lv in hierarchy.levels)
    parents, inv_counts = [], []
    for k, pm in enumerate(hierarchy.parent_of):
        nc = hierarchy.levels[k + 1].node_count
        nf = hierarchy.levels[k].node_count
        stacked = (pm[None, :] + (np.arange(B) * nc)[:, None]).ravel()
        parents.append(stacked)
        counts = np.bincount(stacked, minlength=nc * B).astype(np.float64)
        inv_counts.append((1.0 / counts)[:, None])
        assert len(stacked) == nf * B
    bg = _BatchGraph(levels, tuple(parents), tuple(inv_counts),
                     np.repeat(np.arange(B), hierarchy.levels[0].node_count))
    if len(_batch_cache) > 32:
        _batch_cache.clear()
    _batch_cache[key] = (hierarchy, bg)
    return bg


# --- building blocks ---------------------------------------------------------


def _linear(x, W, b=None):
    y = ad.matmul(x, ad.transpose(W) if isinstance(W, ad.Var) else np.asarray(W).T)
    return y if b is None else ad.add(y, b)


def time_embedding(t, params, config: ScoreNetConfig):
    """Per-sample time embedding, shape (B, F_h)."""
    pe = positional_encoding(t, config.time_embed_dim)
    return _linear(ad.selu(_linear(pe, params["t_embed.W_t"])), params["t_embed.W_proj"])


def embed_inputs(x_t, t, graph: _BatchGraph, params, config: ScoreNetConfig):
    """Node features ``V`` (B*N, F_h) and level-1 edge features ``E``."""
    temb = time_embedding(t, params, config)
    x_col = ad.reshape(x_t, (-1, 1)) if isinstance(x_t, ad.Var) else np.reshape(x_t, (-1, 1))
    h = _linear(x_col, params["node_embed.W_n"])
    v = _linear(ad.selu(ad.concat([h, ad.gather(temb, graph.batch_of_node)], axis=1)), params["node_embed.W_proj"])
    e = edge_features(graph.levels[0], params)
    return v, e


def edge_features(level: _LevelBatch, params):
    return _linear(level.lengths, params["edge_embed.W_proj"])


def _kernel(y, W1, b1, W2, b2):
    return ad.selu(_linear(ad.selu(_linear(ad.layer_norm(y), W1, b1)), W2, b2))


def graph_conv(v, e, level: _LevelBatch, p: dict, prefix: str):
    """One message-passing layer: edge update, sum aggregation, node update."""
    s, r = level.senders, level.receivers
    y_e = ad.concat([e, ad.gather(v, s), ad.gather(v, r)], axis=1)
    e = ad.add(_linear(e, p[prefix + "W_e"]),
               _kernel(y_e, p[prefix + "We1"], p[prefix + "be1"], p[prefix + "We2"], p[prefix + "be2"]))
    e_bar = ad.scatter_add(e, r, level.n)
    y_v = ad.concat([e_bar, v], axis=1)
    v = ad.add(_linear(v, p[prefix + "W_v"]),
               _kernel(y_v, p[prefix + "Wv1"], p[prefix + "bv1"], p[prefix + "Wv2"], p[prefix + "bv2"]))
    return v, e


def pool(v, parent: np.ndarray, inv_counts: np.ndarray, n_coarse: int):
    """Mean of child features per coarse node."""
    return ad.mul(ad.scatter_add(v, parent, n_coarse), inv_counts)


def unpool(v_coarse, parent: np.ndarray, skip, W):
    """Copy parent features to children, concatenate the skip, project to F_h."""
    return _linear(ad.concat([ad.gather(v_coarse, parent), skip], axis=1), W)


def dgn_forward(x_t, t, hierarchy: GraphHierarchy, params: dict, config: ScoreNetConfig) -> ScoreNetOutput:
    """Predict the noise for a batch of fields ``x_t`` of shape (B, N).

    ``params`` may hold tape variables (for gradients) or plain arrays.
    """
    xv = x_t.value if isinstance(x_t, ad.Var) else np.asarray(x_t)
    if xv.ndim == 1:
        raise ValueError("x_t must have shape (B, N)")
    B, N = xv.shape
    if N != hierarchy.levels[0].node_count:
        raise ValueError(f"x_t has {N} nodes, graph has {hierarchy.levels[0].node_count}")
    t = np.broadcast_to(np.asarray(t), (B,))
    if config.depth != hierarchy.depth:
        raise ValueError(f"network depth {config.depth} != hierarchy depth {hierarchy.depth}")
    plain = not isinstance(x_t, ad.Var) and not any(isinstance(p, ad.Var) for p in params.values())
    if plain:
        params = params_to_tape(ad.Tape(), params)
    g = batch_graph(hierarchy, B)
    v, e = embed_inputs(x_t, t, g, params, config)
    skips = []
    for i, (prefix, k) in enumerate(block_names(config)):
        level = g.levels[k]
        if prefix.startswith("dec"):
            v = unpool(v, g.parents[k], skips.pop(), params[f"{prefix}.unpool.W"])
        if i > 0:
            e = edge_features(level, params)
        for c in range(config.convs_per_block):
            v, e = graph_conv(v, e, level, params, f"{prefix}.conv{c}.")
        if prefix.startswith("enc"):
            skips.append(v)
            v = pool(v, g.parents[k], g.inv_counts[k], g.levels[k + 1].n)
    out = _linear(v, params["out.W"], params["out.b"])
    eps = ad.reshape(ad.getitem(out, (slice(None), 0)), (B, N))
    s = ad.reshape(ad.getitem(out, (slice(None), 1)), (B, N))
    if plain:
        return ScoreNetOutput(eps.value, s.value)
    return ScoreNetOutput(eps, s)


def predict_eps(x_t: np.ndarray, t, hierarchy, params, config) -> np.ndarray:
    """Noise prediction for plain arrays; a 1-D field is treated as a batch of one."""
    x = np.asarray(x_t, dtype=np.float64)
    out = dgn_forward(np.atleast_2d(x), t, hierarchy, params, config).eps
    return out.reshape(x.shape)


def params_to_tape(tape: ad.Tape, params: dict) -> dict:
    return {k: tape.var(v) for k, v in params.items()}


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params: dict, config: ScoreNetConfig, extra: dict | None = None,
                    header_comment: str | None = None) -> None:
    """Directory with ``params.index``, one ``<name>.bin`` per array, and ``config``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    write_arrays(root, params, header_comment)
    lines = [f"# {header_comment}"] if header_comment else []
    lines += [f"{k}={v}" for k, v in asdict(config).items()]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={json.dumps(v) if not isinstance(v, str) else v}")
    (root / "config").write_text("\n".join(lines) + "\n")


def write_arrays(root: Path, arrays: dict, header_comment: str | None = None) -> None:
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"# {header_comment}"] if header_comment else []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        lines.append(f"{name} {' '.join(str(s) for s in arr.shape) or 'scalar'}")
        arr.tofile(root / f"{name}.bin")
    (root / "params.index").write_text("\n".join(lines) + "\n")


def read_arrays(root: Path) -> dict:
    out = {}
    for ln in (Path(root) / "params.index").read_text().splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        name, *dims = ln.split()
        shape = () if dims == ["scalar"] else tuple(int(d) for d in dims)
        out[name] = np.fromfile(Path(root) / f"{name}.bin", dtype="<f8").reshape(shape)
    return out


def read_kv(path) -> dict:
    out = {}
    for ln in Path(path).read_text().splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        k, _, v = ln.partition("=")
        out[k.strip()] = v.strip()
    return out


def load_checkpoint(path) -> tuple[dict, ScoreNetConfig, dict]:
    root = Path(path)
    params = read_arrays(root)
    kv = read_kv(root / "config")
    fields = ScoreNetConfig.__dataclass_fields__
    config = ScoreNetConfig(**{k: int(kv[k]) for k in fields if k in kv})
    extra = {k: v for k, v in kv.items() if k not in fields}
    return params, config, extra
