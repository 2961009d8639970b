"""Fast oracle checks used by ``graphdps validate``.

Each check returns ``(name, passed, detail)``.
"""

from __future__ import annotations

import numpy as np

from . import fem
from .diffusion import (conditional_tweedie, ddim_coefficients, ddpm_coefficients, forward_corrupt,
                        gaussian_toy_scores, make_schedule, tweedie_x0)
from .mesh import build_disk_mesh


def neumann_convergence(sizes=(150, 600, 2400), seed=3):
    """L2 error of u = x (unit conductivity, flux cos(theta)) and observed order in h."""
    errs, hs = [], []
    for n in sizes:
        m = build_disk_mesh(n, seed)
        u = fem.solve_neumann(m, np.ones(m.n_vertices), np.cos)
        M = fem.mass_matrix(m)
        d = u - m.vertices[:, 0]
        one = np.ones(m.n_vertices)
        d -= (one @ M @ d) / (one @ M @ one)
        errs.append(float(np.sqrt(d @ M @ d)))
        hs.append(m.max_edge_length())
    orders = [np.log(errs[i] / errs[i + 1]) / np.log(hs[i] / hs[i + 1]) for i in range(len(sizes) - 1)]
    return errs, orders


def check_fem():
    errs, orders = neumann_convergence()
    return "fem_neumann_order", min(orders) >= 1.8, f"orders {', '.join(f'{o:.2f}' for o in orders)}"


def check_adjoint(trials=5, seed=0):
    rng = np.random.default_rng(seed)
    m = build_disk_mesh(50, 2)
    model = fem.EITModel(m, fem.place_electrodes(m, 8, 0.7), fem.protocol("opposite_adjacent", 8))
    s = 1 + 0.3 * rng.random(m.n_vertices)
    worst = 0.0
    for _ in range(trials):
        w = rng.normal(size=model.protocol.m)
        d = rng.normal(size=m.n_vertices)
        h = 1e-5
        fd = (w @ model.forward(s + h * d) - w @ model.forward(s - h * d)) / (2 * h)
        worst = max(worst, abs(model.vjp(s, w) @ d - fd) / abs(fd))
    return "adjoint_vs_fd", worst <= 1e-4, f"max relative error {worst:.2e}"


def check_schedule():
    sch = make_schedule(1000)
    ab, b = sch.alpha_bar, sch.beta
    worst = 0.0
    for t in range(1, sch.T + 1):
        prod = np.prod(1 - b[1:t + 1])
        c1, c2 = ddpm_coefficients(t, sch), ddim_coefficients(t, sch)
        ref = (np.sqrt(ab[t - 1]) * b[t] / (1 - prod), np.sqrt(1 - b[t]) * (1 - ab[t - 1]) / (1 - prod),
               np.sqrt(ab[t - 1]) - np.sqrt((1 - ab[t - 1]) * prod / (1 - prod)),
               np.sqrt((1 - ab[t - 1]) / (1 - prod)))
        worst = max(worst, abs(ab[t] - prod), abs(c1.A - ref[0]), abs(c1.B - ref[1]),
                    abs(c2.A - ref[2]), abs(c2.B - ref[3]))
    return "schedule_identities", worst <= 1e-12, f"max deviation {worst:.1e}"


def check_tweedie(seed=0):
    sch = make_schedule(1000)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        x0 = rng.normal(size=50)
        t = int(rng.integers(1, 1001))
        xt, eps = forward_corrupt(x0, t, sch, rng)
        worst = max(worst, np.abs(tweedie_x0(xt, t, eps, sch) - x0).max())
    return "tweedie_round_trip", worst <= 1e-10, f"max error {worst:.1e}"


def gaussian_posterior_mean(x_t, y, ab, s2, lam):
    """Mean of x0 under the Tikhonov-tilted Gaussian posterior, by precision algebra.

    p(x_t|y) is N(m, v) with the tilt exp(-lam x_t^2) multiplying it; the
    x0 mean then follows from E[x0 | x_t, y] using the tilted score.
    """
    # joint of (x_t, y) is zero-mean Gaussian with this covariance
    cov = np.array([[1.0, np.sqrt(ab)], [np.sqrt(ab), 1.0 + s2]])
    # conditional x_t | y, then multiply by exp(-lam x_t^2)
    m = cov[0, 1] / cov[1, 1] * y
    v = cov[0, 0] - cov[0, 1] ** 2 / cov[1, 1]
    # score of p(x_t) p(y|x_t) exp(-lam x^2) in x_t
    prec = 1.0 / v + 2.0 * lam
    score = -prec * x_t + m / v
    return (x_t + (1 - ab) * score) / np.sqrt(ab)


def check_gaussian_toy(seed=0, trials=50):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        ab, s2, lam = rng.uniform(0.05, 0.95), rng.uniform(0.05, 2.0), rng.uniform(0, 2.0)
        x_t, y = rng.normal(size=2)
        prior, lik, reg = gaussian_toy_scores(x_t, y, ab, s2, lam)
        got = conditional_tweedie(x_t, ab, prior + lik + reg)
        worst = max(worst, abs(got - gaussian_posterior_mean(x_t, y, ab, s2, lam)))
    return "gaussian_toy_posterior_mean", worst <= 1e-10, f"max deviation {worst:.1e}"


def run_all():
    return [check_schedule(), check_tweedie(), check_gaussian_toy(), check_adjoint(), check_fem()]
