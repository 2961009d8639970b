"""Triangular unit-disk meshes and their multi-resolution graph views.

A :class:`TriMesh` is the geometric object (vertices, triangles, boundary
loop).  The score network never sees triangles directly; it works on a
:class:`GraphHierarchy`, a list of :class:`GraphLevel` objects going from the
mesh graph down to progressively decimated KNN graphs, linked by parent maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, cKDTree


class MeshError(ValueError):
    """Raised when a mesh or graph cannot be built or is malformed."""


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (nv, 2)
    triangles: np.ndarray  # (nt, 3), counter-clockwise
    boundary_loop: np.ndarray  # (nb,), counter-clockwise

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        b = np.ascontiguousarray(self.boundary_loop, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise MeshError("vertices must have shape (nv, 2)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("triangles must have shape (nt, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        for name, arr in (("vertices", v), ("triangles", t), ("boundary_loop", b)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def max_edge_length(self) -> float:
        lv = mesh_edges(self)
        return float(lv.edge_lengths.max())

    def permuted(self, perm: np.ndarray) -> "TriMesh":
        """Relabel vertices so that old vertex ``i`` becomes ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return TriMesh(self.vertices[inv], perm[self.triangles], perm[self.boundary_loop])


@dataclass(frozen=True)
class GraphLevel:
    node_count: int
    edge_list: np.ndarray  # (E, 2) directed pairs (i, j), both directions present
    edge_lengths: np.ndarray  # (E,)
    coords: np.ndarray  # (node_count, 2)

    def __post_init__(self):
        for name in ("edge_list", "edge_lengths", "coords"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def senders(self) -> np.ndarray:
        return self.edge_list[:, 0]

    @property
    def receivers(self) -> np.ndarray:
        return self.edge_list[:, 1]

    def undirected_edges(self) -> np.ndarray:
        """One row ``(i, j)`` with ``i < j`` per undirected edge."""
        e = self.edge_list
        return e[e[:, 0] < e[:, 1]]

    def neighbors(self) -> list[np.ndarray]:
        order = np.argsort(self.edge_list[:, 1], kind="stable")
        recv = self.edge_list[order, 1]
        send = self.edge_list[order, 0]
        splits = np.searchsorted(recv, np.arange(1, self.node_count))
        return np.split(send, splits)

    def degree(self) -> np.ndarray:
        return np.bincount(self.edge_list[:, 1], minlength=self.node_count)


@dataclass(frozen=True)
class GraphHierarchy:
    levels: list[GraphLevel]
    parent_of: list[np.ndarray] = field(default_factory=list)  # len(levels) - 1 maps

    @property
    def depth(self) -> int:
        return len(self.levels)

    def child_counts(self, k: int) -> np.ndarray:
        return np.bincount(self.parent_of[k], minlength=self.levels[k + 1].node_count)

    def relabeled(self, perm: np.ndarray) -> "GraphHierarchy":
        """Fine node ``i`` renamed ``perm[i]``; coarse levels keep their numbering."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        lv = self.levels[0]
        fine = GraphLevel(lv.node_count, perm[lv.edge_list], lv.edge_lengths, lv.coords[inv])
        parents = [self.parent_of[0][inv]] + list(self.parent_of[1:]) if self.parent_of else []
        return GraphHierarchy([fine] + list(self.levels[1:]), parents)

    def coarsest_ancestor(self) -> np.ndarray:
        idx = np.arange(self.levels[0].node_count)
        for pm in self.parent_of:
            idx = pm[idx]
        return idx


def _level_from_pairs(pairs: np.ndarray, coords: np.ndarray) -> GraphLevel:
    """Symmetrize, deduplicate and sort undirected pairs into a GraphLevel."""
    n = len(coords)
    if len(pairs) == 0:
        edges = np.zeros((0, 2), dtype=np.int64)
    else:
        pairs = np.asarray(pairs, dtype=np.int64)
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        both = np.concatenate([pairs, pairs[:, ::-1]])
        keys = np.unique(both[:, 0] * n + both[:, 1])
        edges = np.stack([keys // n, keys % n], axis=1)
    d = coords[edges[:, 1]] - coords[edges[:, 0]]
    lengths = np.sqrt((d**2).sum(axis=1))
    if np.any(lengths <= 0):
        raise MeshError("coincident nodes produce a zero-length edge")
    return GraphLevel(n, edges, lengths, np.asarray(coords, dtype=np.float64))


def mesh_edges(mesh: TriMesh) -> GraphLevel:
    """Directed edge view of a triangulation (each undirected edge twice)."""
    t = mesh.triangles
    pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    return _level_from_pairs(pairs, mesh.vertices)


def knn_level(coords: np.ndarray, k: int) -> GraphLevel:
    n = len(coords)
    kk = min(k, n - 1)
    if kk < 1:
        return _level_from_pairs(np.zeros((0, 2), dtype=np.int64), coords)
    _, nbr = cKDTree(coords).query(coords, k=kk + 1)
    nbr = np.atleast_2d(nbr)[:, 1:]
    src = np.repeat(np.arange(n), kk)
    return _level_from_pairs(np.stack([src, nbr.ravel()], axis=1), coords)


def greedy_decimation(level: GraphLevel) -> tuple[np.ndarray, np.ndarray]:
    """Independent-set decimation in ascending node order.

    Returns the sorted kept node indices and, for every fine node, the index
    (in the fine numbering) of the kept node that represents it.
    """
    n = level.node_count
    nbrs = level.neighbors()
    deleted = np.zeros(n, dtype=bool)
    visited = np.zeros(n, dtype=bool)
    owner = np.arange(n)
    kept = []
    for i in range(n):
        visited[i] = True
        if deleted[i]:
            continue
        kept.append(i)
        for j in nbrs[i]:
            if not visited[j] and not deleted[j]:
                deleted[j] = True
                owner[j] = i
    return np.asarray(kept, dtype=np.int64), owner


def coarsen(level: GraphLevel, knn_k: int = 6) -> tuple[GraphLevel, np.ndarray]:
    """Decimate ``level`` and connect the survivors with a KNN graph.

    The returned parent map sends each fine node to its coarse node index.
    """
    if level.node_count < 2:
        raise MeshError("cannot coarsen a level with fewer than 2 nodes")
    kept, owner = greedy_decimation(level)
    if len(kept) < 2:
        raise MeshError(f"coarsening leaves {len(kept)} node(s); need at least 2")
    coarse_index = np.full(level.node_count, -1, dtype=np.int64)
    coarse_index[kept] = np.arange(len(kept))
    parent = coarse_index[owner]
    coarse = knn_level(level.coords[kept], knn_k)
    return coarse, parent


def build_hierarchy(mesh: TriMesh, depth: int, knn_k: int = 6) -> GraphHierarchy:
    if depth < 1:
        raise MeshError("depth must be >= 1")
    levels = [mesh_edges(mesh)]
    parents = []
    for ell in range(1, depth):
        try:
            coarse, parent = coarsen(levels[-1], knn_k)
        except MeshError as exc:
            raise MeshError(f"hierarchy level {ell + 1} of {depth} failed: {exc}") from exc
        levels.append(coarse)
        parents.append(parent)
    return GraphHierarchy(levels, parents)


# --- mesh generation --------------------------------------------------------


def _spacing_for(target: int) -> float:
    # nv ~ nb + n_int with nb = 2*pi/h and n_int = pi / (sqrt(3)/2 h^2)
    a = np.pi / (np.sqrt(3) / 2)
    b = 2 * np.pi
    return (b + np.sqrt(b * b + 4 * target * a)) / (2 * target)


def _best_candidate_points(n: int, radius: float, fixed: np.ndarray, rng, candidates: int = 12):
    """Mitchell best-candidate sampling of ``n`` points in the disk of ``radius``."""
    pts = np.empty((len(fixed) + n, 2))
    pts[: len(fixed)] = fixed
    m = len(fixed)
    for _ in range(n):
        c = np.empty((0, 2))
        while len(c) < candidates:
            raw = rng.uniform(-radius, radius, size=(2 * candidates, 2))
            c = np.concatenate([c, raw[(raw**2).sum(axis=1) <= radius * radius]])
        c = c[:candidates]
        d2 = ((c[:, None, :] - pts[None, :m, :]) ** 2).sum(axis=2).min(axis=1)
        pts[m] = c[np.argmax(d2)]
        m += 1
    return pts[len(fixed):]


def _triangulate(points: np.ndarray, nb: int) -> np.ndarray:
    tri = Delaunay(points).simplices.astype(np.int64)
    # drop triangles spanning the boundary chord region (all-boundary slivers)
    p = points[tri]
    cent = p.mean(axis=1)
    keep = (cent**2).sum(axis=1) < 1.0
    tri = tri[keep]
    p = points[tri]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    flip = area < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return tri


def _lloyd(points: np.ndarray, tri: np.ndarray, nb: int) -> np.ndarray:
    """Move interior points to the area-weighted centroid of their star."""
    p = points[tri]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    cent = p.mean(axis=1)
    acc = np.zeros_like(points)
    wsum = np.zeros(len(points))
    for k in range(3):
        np.add.at(acc, tri[:, k], cent * area[:, None])
        np.add.at(wsum, tri[:, k], area)
    new = points.copy()
    inner = np.arange(nb, len(points))
    ok = wsum[inner] > 0
    new[inner[ok]] = acc[inner[ok]] / wsum[inner[ok], None]
    return new


def build_disk_mesh(
    target_vertex_count: int,
    seed: int = 0,
    boundary_count: int | None = None,
    boundary_refinement: float = 1.5,
    lloyd_passes: int = 2,
    max_retries: int = 5,
) -> TriMesh:
    """Approximately uniform Delaunay mesh of the unit disk.

    Boundary nodes sit on an equally spaced ring on ``|v| = 1``; interior
    nodes come from best-candidate rejection sampling and are relaxed by a
    couple of Lloyd passes.  Vertex 0..nb-1 are the boundary loop.  The ring
    is ``boundary_refinement`` times denser than the interior so that
    electrodes resolve on coarse meshes.
    """
    if target_vertex_count < 16:
        raise MeshError("target_vertex_count must be >= 16")
    h = _spacing_for(target_vertex_count)
    if boundary_count is None:
        boundary_count = max(8, int(round(boundary_refinement * 2 * np.pi / h)))
    nb = boundary_count
    n_int = target_vertex_count - nb
    if n_int < 1:
        raise MeshError("boundary_count leaves no interior vertices")
    theta = 2 * np.pi * np.arange(nb) / nb
    ring = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    h_b = 2 * np.sin(np.pi / nb)
    seq = np.random.SeedSequence(seed)
    for attempt in range(max_retries):
        rng = np.random.default_rng(seq.spawn(attempt + 1)[-1])
        interior = _best_candidate_points(n_int, 1.0 - 0.5 * h_b, ring, rng)
        pts = np.concatenate([ring, interior])
        tri = _triangulate(pts, nb)
        for _ in range(lloyd_passes):
            pts = _lloyd(pts, tri, nb)
            tri = _triangulate(pts, nb)
        mesh = TriMesh(pts, tri, np.arange(nb))
        used = np.zeros(len(pts), dtype=bool)
        used[tri.ravel()] = True
        if used.all() and mesh.signed_areas().min() > 1e-12:
            return mesh
    raise MeshError(f"degenerate triangulation after {max_retries} attempts")


# --- text format -----------------------------------------------------------


def save_mesh(mesh: TriMesh, path, header_comment: str | None = None) -> None:
    lines = []
    if header_comment:
        lines.append(f"# {header_comment}")
    lines.append(f"MESH {mesh.n_vertices} {mesh.n_triangles}")
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles]
    lines.append(f"BOUNDARY {len(mesh.boundary_loop)}")
    lines += [str(int(i)) for i in mesh.boundary_loop]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> TriMesh:
    tokens = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    head = tokens[0].split()
    if head[0] != "MESH" or len(head) != 3:
        raise MeshError(f"{path}: bad header {tokens[0]!r}")
    nv, nt = int(head[1]), int(head[2])
    verts = np.array([[float(a) for a in ln.split()] for ln in tokens[1 : 1 + nv]])
    tris = np.array([[int(a) for a in ln.split()] for ln in tokens[1 + nv : 1 + nv + nt]], dtype=np.int64)
    bhead = tokens[1 + nv + nt].split()
    if bhead[0] != "BOUNDARY":
        raise MeshError(f"{path}: missing BOUNDARY section")
    nb = int(bhead[1])
    bnd = np.array([int(ln) for ln in tokens[2 + nv + nt : 2 + nv + nt + nb]], dtype=np.int64)
    return TriMesh(verts.reshape(nv, 2), tris.reshape(nt, 3), bnd)
