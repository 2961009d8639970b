"""
The regularized posterior mean in one dimension
===============================================

With a standard normal prior, a Gaussian likelihood and a quadratic penalty,
every score is linear and the composite denoiser can be compared with the
posterior mean obtained by conditioning the joint Gaussian directly.
"""

import numpy as np

from graphdps.diffusion import conditional_tweedie, gaussian_toy_scores
from graphdps.validate import gaussian_posterior_mean

ab, s2 = 0.6, 0.3  # alpha_bar at the current step and the measurement variance
y = 0.8
for lam in (0.0, 0.5, 2.0):
    for x_t in (-1.0, 0.0, 1.5):
        prior, lik, reg = gaussian_toy_scores(x_t, y, ab, s2, lam)
        composite = conditional_tweedie(x_t, ab, prior + lik + reg)
        direct = gaussian_posterior_mean(x_t, y, ab, s2, lam)
        print(f"lambda={lam:3.1f} x_t={x_t:+.1f}  composite {composite:+.12f}  direct {direct:+.12f}")

