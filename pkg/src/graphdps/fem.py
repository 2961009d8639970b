"""Complete-electrode-model EIT forward solver with P1 elements.

The unknowns of one current-pattern solve are the nodal potentials ``u``
(one per mesh vertex) and the electrode voltages ``U`` (one per electrode).
Grounding is imposed with a Lagrange multiplier enforcing ``sum(U) = 0``.
Conductivity is a nodal P1 field; its element average multiplies the
constant-gradient stiffness of each triangle.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import autodiff as ad
from .mesh import TriMesh

NodeField = np.ndarray

SIGMA_FLOOR = 1e-3
DEFAULT_CONTACT_IMPEDANCE = 1e-2
DEFAULT_CURRENT = 1e-3
NOISE_KINDS = ("none", "gaussian", "laplace")


class FEMError(RuntimeError):
    """Raised for invalid EIT setups or failed solves."""


@dataclass(frozen=True)
class ElectrodeConfig:
    count: int
    coverage: float
    contact_impedances: np.ndarray  # (p,)
    electrode_nodes: tuple  # p arrays of boundary vertex indices
    arcs: np.ndarray  # (p, 2) start/end angle, radians, counter-clockwise


@dataclass(frozen=True)
class CurrentProtocol:
    name: str
    patterns: np.ndarray  # (n_patterns, p) currents in A
    measurement_pairs: np.ndarray  # (m, 3) rows (pattern, electrode_a, electrode_b)

    @property
    def m(self) -> int:
        return len(self.measurement_pairs)


@dataclass(frozen=True)
class MeasurementSet:
    y: np.ndarray
    sigma_y: float = 0.0
    noise_kind: str = "none"

    def __post_init__(self):
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")


def place_electrodes(
    mesh: TriMesh,
    p: int,
    coverage: float = 0.5,
    contact_impedance=DEFAULT_CONTACT_IMPEDANCE,
) -> ElectrodeConfig:
    """Put ``p`` equally spaced electrode arcs on the boundary.

    Electrode ``l`` is centred at angle ``2*pi*l/p`` and spans
    ``coverage * 2*pi/p`` radians.  A boundary node belongs to an electrode
    when its angle lies in the half-open arc ``[start, end)``.
    """
    nb = len(mesh.boundary_loop)
    if p < 1:
        raise FEMError("electrode count must be positive")
    if not 0 < coverage < 1:
        raise FEMError("coverage must lie in (0, 1)")
    if nb < 2 * p:
        raise FEMError(f"boundary has {nb} nodes; {p} electrodes need at least {2 * p}")
    z = np.broadcast_to(np.asarray(contact_impedance, dtype=np.float64), (p,)).copy()
    if np.any(z <= 0):
        raise FEMError("contact impedances must be positive")
    width = coverage * 2 * np.pi / p
    centres = 2 * np.pi * np.arange(p) / p
    arcs = np.stack([centres - width / 2, centres + width / 2], axis=1)
    bverts = mesh.vertices[mesh.boundary_loop]
    ang = np.arctan2(bverts[:, 1], bverts[:, 0])
    tol = 1e-9
    nodes = []
    for a0, _ in arcs:
        rel = np.mod(ang - a0 + tol, 2 * np.pi) - tol
        own = mesh.boundary_loop[(rel >= -tol) & (rel < width - tol)]
        if len(own) < 2:
            raise FEMError(f"electrode arc of width {width:.4g} rad covers fewer than 2 boundary nodes")
        nodes.append(np.sort(own))
    return ElectrodeConfig(p, float(coverage), z, tuple(nodes), arcs)


def protocol(name: str, p: int, amplitude: float = DEFAULT_CURRENT) -> CurrentProtocol:
    """Standard injection/measurement protocols.

    ``opposite_adjacent`` drives ``(k, k + p/2)``; ``adjacent_adjacent``
    drives ``(k, k + 1)``.  Both measure ``U_j - U_{j+1}`` on every adjacent
    pair that does not touch a driven electrode.
    """
    if name == "opposite_adjacent":
        if p % 2:
            raise FEMError("opposite injection needs an even electrode count")
        drive = [(k, (k + p // 2) % p) for k in range(p)]
    elif name == "adjacent_adjacent":
        drive = [(k, (k + 1) % p) for k in range(p)]
    else:
        raise FEMError(f"unknown protocol {name!r}")
    patterns = np.zeros((p, p))
    pairs = []
    for k, (a, b) in enumerate(drive):
        patterns[k, a] += amplitude
        patterns[k, b] -= amplitude
        for j in range(p):
            jj = (j + 1) % p
            if {j, jj} & {a, b}:
                continue
            pairs.append((k, j, jj))
    return CurrentProtocol(name, patterns, np.asarray(pairs, dtype=np.int64).reshape(-1, 3))


def _segment_integrals(s0, s1, length):
    """Exact P1 boundary integrals over the parameter range [s0, s1] of an edge."""
    def F_a(s):
        return s - s * s / 2

    def F_b(s):
        return s * s / 2

    def F_ab(s):
        return s * s / 2 - s**3 / 3

    ia = length * (F_a(s1) - F_a(s0))
    ib = length * (F_b(s1) - F_b(s0))
    iaa = length * ((1 - s0) ** 3 - (1 - s1) ** 3) / 3
    ibb = length * (s1**3 - s0**3) / 3
    iab = length * (F_ab(s1) - F_ab(s0))
    return ia, ib, iaa, ibb, iab


class EITModel:
    """Assembled geometry for repeated CEM solves on one mesh.

    This is the "fem context": everything here is independent of the
    conductivity, so it is built once and shared between forward and adjoint
    solves.
    """

    def __init__(self, mesh: TriMesh, electrodes: ElectrodeConfig, proto: CurrentProtocol | None = None):
        self.mesh = mesh
        self.electrodes = electrodes
        self.protocol = proto
        n = mesh.n_vertices
        p = electrodes.count
        self.n = n
        self.p = p
        tri = mesh.triangles
        xy = mesh.vertices[tri]
        # basis gradients: grad phi_k = rot90(opposite edge) / (2 area)
        e0 = xy[:, 2] - xy[:, 1]
        e1 = xy[:, 0] - xy[:, 2]
        e2 = xy[:, 1] - xy[:, 0]
        area2 = e2[:, 0] * (-e1[:, 1]) - e2[:, 1] * (-e1[:, 0])
        if np.any(area2 <= 0):
            raise FEMError("mesh has non-positive triangle area")
        self.area = area2 / 2
        edges = np.stack([e0, e1, e2], axis=1)  # (nt, 3, 2)
        self.grads = np.stack([-edges[..., 1], edges[..., 0]], axis=2) / area2[:, None, None]
        self.k_local = self.area[:, None, None] * np.einsum("tid,tjd->tij", self.grads, self.grads)
        self.rows = np.repeat(tri, 3, axis=1).ravel()
        self.cols = np.tile(tri, (1, 3)).ravel()
        self._electrode_blocks()

    def _electrode_blocks(self):
        mesh, el = self.mesh, self.electrodes
        n, p = self.n, self.p
        loop = mesh.boundary_loop
        a_idx = loop
        b_idx = np.roll(loop, -1)
        va = mesh.vertices[a_idx]
        vb = mesh.vertices[b_idx]
        lengths = np.linalg.norm(vb - va, axis=1)
        th_a = np.arctan2(va[:, 1], va[:, 0])
        dth = np.mod(np.arctan2(vb[:, 1], vb[:, 0]) - th_a, 2 * np.pi)
        rows, cols, vals = [], [], []
        b_rows, b_cols, b_vals = [], [], []
        e_len = np.zeros(p)
        zinv = 1.0 / el.contact_impedances
        for l, (a0, a1) in enumerate(el.arcs):
            # overlap of each edge angle interval [th_a, th_a + dth] with the arc
            start = np.mod(a0 - th_a + np.pi, 2 * np.pi) - np.pi
            s0 = np.clip(start / dth, 0.0, 1.0)
            s1 = np.clip((start + (a1 - a0)) / dth, 0.0, 1.0)
            hit = s1 > s0
            ia, ib, iaa, ibb, iab = _segment_integrals(s0[hit], s1[hit], lengths[hit])
            ai, bi = a_idx[hit], b_idx[hit]
            e_len[l] = np.sum(lengths[hit] * (s1[hit] - s0[hit]))
            rows += [ai, bi, ai, bi]
            cols += [ai, bi, bi, ai]
            vals += [zinv[l] * iaa, zinv[l] * ibb, zinv[l] * iab, zinv[l] * iab]
            b_rows += [ai, bi]
            b_cols += [np.full(len(ai), l), np.full(len(bi), l)]
            b_vals += [ia, ib]
        self.electrode_length = e_len
        self.m_el = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()
        # B[i, l] = int_{e_l} phi_i ds
        self.b_el = sp.coo_matrix(
            (np.concatenate(b_vals), (np.concatenate(b_rows), np.concatenate(b_cols))), shape=(n, p)
        ).tocsr()
        if np.any(e_len <= 0):
            raise FEMError("an electrode has zero length")

    # --- assembly and solves ------------------------------------------------

    def stiffness(self, sigma: NodeField) -> sp.csr_matrix:
        sig_t = sigma[self.mesh.triangles].mean(axis=1)
        data = (sig_t[:, None, None] * self.k_local).ravel()
        return sp.coo_matrix((data, (self.rows, self.cols)), shape=(self.n, self.n)).tocsr()

    def system_matrix(self, sigma: NodeField) -> sp.csc_matrix:
        n, p = self.n, self.p
        zinv = 1.0 / self.electrodes.contact_impedances
        a_uu = self.stiffness(sigma) + self.m_el
        a_uU = -self.b_el.multiply(zinv[None, :])
        a_UU = sp.diags(self.electrode_length * zinv)
        ground = sp.csr_matrix(np.concatenate([np.zeros(n), np.ones(p)])[None, :])
        top = sp.hstack([a_uu, a_uU])
        mid = sp.hstack([a_uU.T, a_UU])
        core = sp.vstack([top, mid])
        return sp.bmat([[core, ground.T], [ground, None]]).tocsc()

    def check_sigma(self, sigma) -> NodeField:
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.shape != (self.n,):
            raise FEMError(f"conductivity has shape {sigma.shape}, expected ({self.n},)")
        if not np.all(np.isfinite(sigma)) or sigma.min() <= 0:
            raise FEMError(f"conductivity must be finite and positive (min {sigma.min():.3g})")
        return sigma

    def factorize(self, sigma: NodeField):
        sigma = self.check_sigma(sigma)
        mat = self.system_matrix(sigma)
        try:
            lu = splu(mat)
        except RuntimeError as exc:
            raise FEMError(f"singular CEM system: {exc}") from exc
        return mat, lu

    def _rhs(self, currents: np.ndarray) -> np.ndarray:
        currents = np.atleast_2d(currents)
        rhs = np.zeros((self.n + self.p + 1, currents.shape[0]))
        rhs[self.n : self.n + self.p] = currents.T
        return rhs

    def solve_patterns(self, sigma: NodeField, currents: np.ndarray, factor=None):
        """Solve for every row of ``currents``; returns (u (k, n), U (k, p))."""
        currents = np.atleast_2d(np.asarray(currents, dtype=np.float64))
        if np.any(np.abs(currents.sum(axis=1)) > 1e-12 * max(1.0, np.abs(currents).max())):
            raise FEMError("current pattern does not sum to zero")
        mat, lu = factor if factor is not None else self.factorize(sigma)
        rhs = self._rhs(currents)
        sol = lu.solve(rhs)
        res = np.linalg.norm(mat @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300)
        if res > 1e-10 and np.linalg.norm(rhs) > 0:
            raise FEMError(f"CEM solve residual {res:.2e} exceeds 1e-10")
        return sol[: self.n].T, sol[self.n : self.n + self.p].T

    def electrode_currents(self, u: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Currents through each electrode implied by a solved state."""
        zinv = 1.0 / self.electrodes.contact_impedances
        return zinv * (self.electrode_length * U - self.b_el.T @ u)

    def _measure_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        pairs = self.protocol.measurement_pairs
        g = np.zeros((len(pairs), self.p))
        g[np.arange(len(pairs)), pairs[:, 1]] = 1.0
        g[np.arange(len(pairs)), pairs[:, 2]] = -1.0
        return pairs[:, 0], g

    def forward(self, sigma: NodeField, factor=None) -> np.ndarray:
        if self.protocol is None:
            raise FEMError("model has no measurement protocol")
        if self.protocol.m == 0:
            return np.zeros(0)
        _, U = self.solve_patterns(sigma, self.protocol.patterns, factor)
        pat, g = self._measure_matrix()
        return np.einsum("kp,kp->k", U[pat], g)

    def forward_and_vjp(self, sigma: NodeField, weights: np.ndarray | None = None):
        """Measurements and, if ``weights`` is given, ``sum_k w_k dy_k/dsigma``."""
        factor = self.factorize(sigma)
        if self.protocol.m == 0:
            return np.zeros(0), (np.zeros(self.n) if weights is not None else None)
        u, U = self.solve_patterns(sigma, self.protocol.patterns, factor)
        pat, g = self._measure_matrix()
        y = np.einsum("kp,kp->k", U[pat], g)
        if weights is None:
            return y, None
        return y, self._vjp_from_states(factor, u, pat, g, weights)

    def linearize(self, sigma: NodeField):
        """Measurements at ``sigma`` and a closure ``weights -> sum_k w_k dy_k/dsigma``.

        The factorization and forward states are reused by the closure.
        """
        factor = self.factorize(sigma)
        if self.protocol.m == 0:
            return np.zeros(0), lambda w: np.zeros(self.n)
        u, U = self.solve_patterns(sigma, self.protocol.patterns, factor)
        pat, g = self._measure_matrix()
        y = np.einsum("kp,kp->k", U[pat], g)
        return y, lambda w: self._vjp_from_states(factor, u, pat, g, w)

    def vjp(self, sigma: NodeField, weights: np.ndarray) -> NodeField:
        factor = self.factorize(sigma)
        if self.protocol.m == 0:
            return np.zeros(self.n)
        u, _ = self.solve_patterns(sigma, self.protocol.patterns, factor)
        pat, g = self._measure_matrix()
        return self._vjp_from_states(factor, u, pat, g, weights)

    def _vjp_from_states(self, factor, u, pat, g, weights) -> NodeField:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (self.protocol.m,):
            raise FEMError(f"weights have shape {weights.shape}, expected ({self.protocol.m},)")
        n_pat = self.protocol.patterns.shape[0]
        adj_el = np.zeros((n_pat, self.p))
        np.add.at(adj_el, pat, weights[:, None] * g)
        mat, lu = factor
        rhs = self._rhs(adj_el)
        u_adj = lu.solve(rhs)[: self.n].T
        tri = self.mesh.triangles
        gu = np.einsum("tid,kti->ktd", self.grads, u[:, tri])
        ga = np.einsum("tid,kti->ktd", self.grads, u_adj[:, tri])
        per_tri = -(self.area / 3.0) * np.einsum("ktd,ktd->t", gu, ga)
        out = np.zeros(self.n)
        for k in range(3):
            np.add.at(out, tri[:, k], per_tri)
        return out


# --- functional surface -------------------------------------------------------


def solve_cem(mesh: TriMesh, electrodes: ElectrodeConfig, sigma: NodeField, pattern) -> tuple[np.ndarray, np.ndarray]:
    u, U = EITModel(mesh, electrodes).solve_patterns(sigma, np.asarray(pattern)[None, :])
    return u[0], U[0]


def forward(mesh, electrodes, proto: CurrentProtocol, sigma: NodeField) -> MeasurementSet:
    return MeasurementSet(EITModel(mesh, electrodes, proto).forward(sigma))


def adjoint_jacobian_vjp(mesh, electrodes, proto, sigma, residual_weights) -> NodeField:
    return EITModel(mesh, electrodes, proto).vjp(sigma, residual_weights)


def forward_var(model: EITModel, sigma):
    """Forward map on a tape variable, differentiated by the adjoint method."""
    if not isinstance(sigma, ad.Var):
        return model.forward(sigma)
    y, vjp = model.linearize(sigma.value)
    return ad.custom_vjp(sigma, y, vjp)


def jacobian(model: EITModel, sigma: NodeField) -> np.ndarray:
    """Dense measurement Jacobian, one adjoint solve per measurement row."""
    m = model.protocol.m
    rows = [model.vjp(sigma, np.eye(m)[k]) for k in range(m)]
    return np.array(rows).reshape(m, model.n)


def add_noise(y_clean: MeasurementSet, kind: str, level: float, seed) -> MeasurementSet:
    """Additive white noise with ``sigma_y = level * max|y|``.

    Laplace noise uses scale ``sigma_y / sqrt(2)`` so both kinds have the
    same variance.
    """
    if level <= 0:
        raise ValueError("noise level must be positive")
    y = np.asarray(y_clean.y, dtype=np.float64)
    sigma_y = float(level * np.abs(y).max())
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        eta = rng.normal(0.0, sigma_y, size=y.shape)
    elif kind == "laplace":
        eta = rng.laplace(0.0, sigma_y / np.sqrt(2.0), size=y.shape)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return MeasurementSet(y + eta, sigma_y, kind)


# --- continuum validation mode ------------------------------------------------


def solve_neumann(mesh: TriMesh, sigma: NodeField, flux) -> np.ndarray:
    """P1 solution of div(sigma grad u) = 0 with sigma du/dn = flux(theta).

    No electrodes are involved; the boundary data is interpolated onto the
    boundary nodes and integrated with the exact edge mass matrix.  The
    solution is normalised to zero mean (Lagrange multiplier on int u).
    """
    return _neumann(mesh, sigma, flux)


def _neumann(mesh: TriMesh, sigma: NodeField, flux) -> np.ndarray:
    n = mesh.n_vertices
    tri = mesh.triangles
    xy = mesh.vertices[tri]
    e = np.stack([xy[:, 2] - xy[:, 1], xy[:, 0] - xy[:, 2], xy[:, 1] - xy[:, 0]], axis=1)
    area2 = e[:, 2, 0] * (-e[:, 1, 1]) + e[:, 2, 1] * e[:, 1, 0]
    grads = np.stack([-e[..., 1], e[..., 0]], axis=2) / area2[:, None, None]
    kl = (area2 / 2)[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
    sig_t = np.asarray(sigma)[tri].mean(axis=1)
    k = sp.coo_matrix(
        ((sig_t[:, None, None] * kl).ravel(), (np.repeat(tri, 3, axis=1).ravel(), np.tile(tri, (1, 3)).ravel())),
        shape=(n, n),
    ).tocsr()
    loop = mesh.boundary_loop
    a, b = loop, np.roll(loop, -1)
    length = np.linalg.norm(mesh.vertices[b] - mesh.vertices[a], axis=1)
    th = np.arctan2(mesh.vertices[:, 1], mesh.vertices[:, 0])
    g = np.zeros(n)
    g[loop] = flux(th[loop])
    rhs = np.zeros(n + 1)
    # exact edge mass matrix applied to the nodal interpolant of the flux
    np.add.at(rhs, a, length * (2 * g[a] + g[b]) / 6)
    np.add.at(rhs, b, length * (g[a] + 2 * g[b]) / 6)
    lumped = np.zeros(n)
    for j in range(3):
        np.add.at(lumped, tri[:, j], area2 / 6)
    mat = sp.bmat([[k, sp.csr_matrix(lumped[:, None])], [sp.csr_matrix(lumped[None, :]), None]]).tocsc()
    sol = splu(mat).solve(rhs)
    return sol[:n]


def mass_matrix(mesh: TriMesh) -> sp.csr_matrix:
    tri = mesh.triangles
    area = mesh.signed_areas()
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    data = (area[:, None, None] * local[None]).ravel()
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return sp.coo_matrix((data, (rows, cols)), shape=(mesh.n_vertices,) * 2).tocsr()


# --- text format -----------------------------------------------------------


def save_measurements(meas: MeasurementSet, path, header_comment: str | None = None) -> None:
    lines = [f"# {header_comment}"] if header_comment else []
    lines.append(f"MEAS {len(meas.y)} {meas.sigma_y:.17g} {meas.noise_kind}")
    lines += [f"{v:.17g}" for v in meas.y]
    Path(path).write_text("\n".join(lines) + "\n")


def load_measurements(path) -> MeasurementSet:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    head = lines[0].split()
    if head[0] != "MEAS" or len(head) != 4:
        raise ValueError(f"{path}: bad header {lines[0]!r}")
    m = int(head[1])
    y = np.array([float(v) for v in lines[1 : 1 + m]])
    if len(y) != m:
        raise ValueError(f"{path}: expected {m} values, found {len(y)}")
    return MeasurementSet(y, float(head[2]), head[3])
