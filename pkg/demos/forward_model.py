"""
Simulating boundary voltages on a disk
======================================

Build a mesh, place electrodes, push a conductivity with one inclusion through
the complete electrode model and check the adjoint gradient by finite differences.
"""

import numpy as np

from graphdps import fem
from graphdps.mesh import build_disk_mesh
from graphdps.phantoms import Inclusion, Phantom, rasterize

# a ~300 node mesh of the unit disk, refined towards the boundary
mesh = build_disk_mesh(300, seed=0)
print(f"{mesh.n_vertices} vertices, {len(mesh.triangles)} triangles, "
      f"h_max = {mesh.max_edge_length():.3f}")

# sixteen electrodes covering half the circumference, opposite injection
electrodes = fem.place_electrodes(mesh, 16, 0.5)
model = fem.EITModel(mesh, electrodes, fem.protocol("opposite_adjacent", 16))
print(f"{model.protocol.m} measurements per frame")

# a conductive disk off centre in a unit background
phantom = Phantom([Inclusion("circle", np.array([0.35, 0.1]), (0.25,), 1.5)])
sigma = rasterize(phantom, mesh)
y_ref = model.forward(np.ones(mesh.n_vertices))
y = model.forward(sigma)
print(f"max |y| = {np.abs(y).max():.3e}, change from inclusion = {np.abs(y - y_ref).max():.3e}")

# gradient of a weighted misfit: one adjoint solve against two forward solves per direction
rng = np.random.default_rng(1)
w = rng.normal(size=model.protocol.m)
d = rng.normal(size=mesh.n_vertices)
g = model.vjp(sigma, w)
h = 1e-5
fd = (w @ model.forward(sigma + h * d) - w @ model.forward(sigma - h * d)) / (2 * h)
print(f"adjoint {g @ d:.8e}  finite difference {fd:.8e}")

# measurement noise at the two levels used in the noisy experiments
for kind in ("gaussian", "laplace"):
    for level in (2e-3, 1e-2):
        noisy = fem.add_noise(fem.MeasurementSet(y), kind, level, seed=0)
        print(f"{kind:8s} {level:.0e}: relative perturbation "
              f"{np.linalg.norm(noisy.y - y) / np.linalg.norm(y):.2e}")
