"""Random conductivity phantoms on the unit disk and dataset assembly.

Data are simulated on a fine mesh and stored on a coarse mesh so the
reconstruction never uses the discretization that produced its data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import EITModel, MeasurementSet, add_noise, save_measurements, load_measurements
from .mesh import TriMesh

SHAPES = ("circle", "triangle", "blob", "horseshoe")
BACKGROUND = 1.0
MARGIN = 0.05
BLOB_MODES = 4


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Inclusion:
    """One inclusion.  ``params`` depends on the shape:

    circle: (radius,); triangle: (circumradius, rotation);
    blob: (r0, a_1..a_K, phi_1..phi_K); horseshoe: (r_in, r_out, opening, rotation).
    """

    shape: str
    center: tuple
    params: tuple
    conductivity: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        d = pts - np.asarray(self.center)
        r = np.hypot(d[:, 0], d[:, 1])
        th = np.arctan2(d[:, 1], d[:, 0])
        if self.shape == "circle":
            return r <= self.params[0]
        if self.shape == "triangle":
            R, rot = self.params
            # inside iff the projection on each of the three apothem directions is <= R/2
            inside = np.ones(len(pts), dtype=bool)
            for k in range(3):
                ang = rot + np.pi / 3 + 2 * np.pi * k / 3
                inside &= d[:, 0] * np.cos(ang) + d[:, 1] * np.sin(ang) <= R / 2
            return inside
        if self.shape == "blob":
            return r <= blob_radius(self.params, th)
        r_in, r_out, opening, rot = self.params
        gap = np.abs(np.angle(np.exp(1j * (th - rot))))
        return (r >= r_in) & (r <= r_out) & (gap >= opening / 2)

    def extent(self) -> float:
        """Largest distance from the centre to the support."""
        if self.shape == "circle":
            return self.params[0]
        if self.shape == "triangle":
            return self.params[0]
        if self.shape == "blob":
            K = (len(self.params) - 1) // 2
            return self.params[0] * (1 + np.sum(np.abs(self.params[1:1 + K])))
        return self.params[1]


def blob_radius(params, theta):
    r0 = params[0]
    K = (len(params) - 1) // 2
    a, phi = np.asarray(params[1:1 + K]), np.asarray(params[1 + K:])
    k = np.arange(1, K + 1)
    return r0 * (1 + np.cos(np.multiply.outer(theta, k) + phi) @ a)


@dataclass(frozen=True)
class Phantom:
    inclusions: tuple = ()
    background: float = BACKGROUND


@dataclass(frozen=True)
class DatasetSpec:
    family: str = "circle"
    count: int = 200
    cond_range: tuple = (0.5, 1.5)
    inclusion_range: tuple = (1, 3)
    size_range: tuple = (0.12, 0.3)
    seed: int = 0
    fine_mesh: str = "fine"
    coarse_mesh: str = "coarse"
    max_tries: int = 1000
    noise_kind: str = "none"
    noise_level: float = 0.0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        fams = self.family.split("+")
        if any(f not in SHAPES for f in fams):
            raise PhantomError(f"unknown shape family {self.family!r}")
        if self.count < 1:
            raise PhantomError("count must be at least 1")
        lo, hi = self.cond_range
        if not 0 < lo <= hi:
            raise PhantomError(f"invalid conductivity range {self.cond_range}")
        a, b = self.inclusion_range
        if not 0 <= a <= b:
            raise PhantomError(f"invalid inclusion count range {self.inclusion_range}")
        s0, s1 = self.size_range
        if not 0 < s0 <= s1 < 1 - MARGIN:
            raise PhantomError(f"invalid size range {self.size_range}")

    @property
    def families(self) -> tuple:
        return tuple(self.family.split("+"))


def sample_seed(base_seed: int, index: int) -> np.random.Generator:
    """Per-sample stream, identical for serial and parallel builds."""
    return np.random.default_rng([int(base_seed), int(index)])


def _draw_inclusion(shape: str, spec: DatasetSpec, rng) -> Inclusion:
    s0, s1 = spec.size_range
    size = rng.uniform(s0, s1)
    if shape == "circle":
        params = (size,)
    elif shape == "triangle":
        params = (size * 1.3, rng.uniform(0, 2 * np.pi))
    elif shape == "blob":
        amp = rng.uniform(0, 0.35 / BLOB_MODES, BLOB_MODES) * rng.choice([-1, 1], BLOB_MODES)
        phase = rng.uniform(0, 2 * np.pi, BLOB_MODES)
        params = (size, *amp, *phase)
    else:
        width = rng.uniform(0.3, 0.5) * size
        params = (size, size + width, rng.uniform(0.6, 1.6), rng.uniform(0, 2 * np.pi))
    ext = Inclusion(shape, (0.0, 0.0), params, 1.0).extent()
    rmax = 1 - MARGIN - ext
    if rmax <= 0:
        raise PhantomError("inclusion too large for the disk")
    # uniform over the admissible disk of centres, so containment always holds
    rc = rmax * np.sqrt(rng.uniform())
    ang = rng.uniform(0, 2 * np.pi)
    cond = rng.uniform(*spec.cond_range)
    return Inclusion(shape, (rc * np.cos(ang), rc * np.sin(ang)), params, float(cond))


def _overlaps(a: Inclusion, b: Inclusion) -> bool:
    return np.hypot(*np.subtract(a.center, b.center)) < a.extent() + b.extent() + MARGIN


def sample_phantom(spec: DatasetSpec, seed) -> Phantom:
    """Draw 1-3 (configurable) inclusions placed without overlap.

    Placement is rejection-sampled; a spent budget raises :class:`PhantomError`.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo, hi = spec.inclusion_range
    k = int(rng.integers(lo, hi + 1))
    incs: list[Inclusion] = []
    tries = 0
    while len(incs) < k:
        if tries >= spec.max_tries:
            raise PhantomError(f"rejection budget of {spec.max_tries} exhausted")
        tries += 1
        shape = spec.families[int(rng.integers(len(spec.families)))]
        inc = _draw_inclusion(shape, spec, rng)
        if all(not _overlaps(inc, other) for other in incs):
            incs.append(inc)
    return Phantom(tuple(incs))


def rasterize(phantom: Phantom, mesh_or_points) -> np.ndarray:
    """Nodal conductivity; later inclusions overwrite earlier ones."""
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, TriMesh) else np.atleast_2d(mesh_or_points)
    out = np.full(len(pts), float(phantom.background))
    for inc in phantom.inclusions:
        out[inc.contains(pts)] = inc.conductivity
    return out


# --- dataset on disk ------------------------------------------------------------


def save_field(x, path, header_comment: str | None = None) -> None:
    x = np.asarray(x, dtype=np.float64)
    with Path(path).open("w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write(f"FIELD {len(x)}\n")
        fh.writelines(f"{v:.17g}\n" for v in x)


def load_field(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    tag, n = lines[0].split()
    if tag != "FIELD" or len(lines) - 1 != int(n):
        raise ValueError(f"{path}: malformed field file")
    return np.array([float(v) for v in lines[1:]])


def spec_to_kv(spec: DatasetSpec) -> dict:
    return {
        "family": spec.family, "count": spec.count,
        "cond_min": spec.cond_range[0], "cond_max": spec.cond_range[1],
        "inclusions_min": spec.inclusion_range[0], "inclusions_max": spec.inclusion_range[1],
        "size_min": spec.size_range[0], "size_max": spec.size_range[1],
        "seed": spec.seed, "fine_mesh": spec.fine_mesh, "coarse_mesh": spec.coarse_mesh,
        "noise_kind": spec.noise_kind, "noise_level": spec.noise_level,
        "normalization": "none",
    }


def write_kv(path, kv: dict, header_comment: str | None = None) -> None:
    with Path(path).open("w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.writelines(f"{k}={v}\n" for k, v in kv.items())


def build_sample(spec: DatasetSpec, index: int, fine_mesh: TriMesh, coarse_mesh: TriMesh,
                 fine_model: EITModel):
    """Phantom, coarse field, clean-or-noisy measurements for one index."""
    rng = sample_seed(spec.seed, index)
    ph = sample_phantom(spec, rng)
    meas = MeasurementSet(fine_model.forward(rasterize(ph, fine_mesh)))
    if spec.noise_kind != "none":
        meas = add_noise(meas, spec.noise_kind, spec.noise_level, rng)
    return ph, rasterize(ph, coarse_mesh), meas


def build_dataset(spec: DatasetSpec, fine_mesh: TriMesh, coarse_mesh: TriMesh, fine_model: EITModel,
                  out_dir, header_comment: str | None = None) -> Path:
    if fine_mesh is coarse_mesh or (fine_mesh.n_vertices == coarse_mesh.n_vertices
                                    and np.array_equal(fine_mesh.vertices, coarse_mesh.vertices)):
        raise PhantomError("fine and coarse meshes must differ")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kv = spec_to_kv(spec)
    kv["coarse_nodes"] = coarse_mesh.n_vertices
    kv["fine_nodes"] = fine_mesh.n_vertices
    kv["measurements"] = fine_model.protocol.m
    for i in range(spec.count):
        _, field_c, meas = build_sample(spec, i, fine_mesh, coarse_mesh, fine_model)
        save_field(field_c, out / f"sample_{i}.field", header_comment)
        save_measurements(meas, out / f"sample_{i}.meas", header_comment)
    write_kv(out / "manifest", kv, header_comment)
    return out


def load_dataset(root) -> tuple[dict, np.ndarray, list]:
    """Manifest, coarse fields (count, N) and measurement sets."""
    root = Path(root)
    kv = {}
    for ln in (root / "manifest").read_text().splitlines():
        if ln and not ln.startswith("#"):
            k, v = ln.split("=", 1)
            kv[k] = v
    n = int(kv["count"])
    fields = np.array([load_field(root / f"sample_{i}.field") for i in range(n)])
    meas = [load_measurements(root / f"sample_{i}.meas") for i in range(n)]
    return kv, fields, meas
