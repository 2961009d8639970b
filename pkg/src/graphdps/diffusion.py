"""Noise schedules, forward corruption, the Tweedie denoiser and reverse steps.

States are indexed 0..T and the schedule arrays carry a leading entry for
t = 0 with ``alpha_bar[0] = 1`` so that ``alpha_bar[t - 1]`` is always valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mesh import GraphHierarchy
from .network import ScoreNetConfig, dgn_forward, predict_eps

ALPHA_BAR_FLOOR = 1e-12


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays of length T + 1; index 0 is the clean state."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ScheduleError(f"t={t} outside 1..{self.T}")
        return t


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) == 0:
        raise ScheduleError("betas must be a nonempty vector")
    if np.any(betas < 0) or np.any(betas >= 1):
        raise ScheduleError("betas must lie in [0, 1)")
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    beta_tilde = np.zeros_like(beta)
    denom = 1.0 - alpha_bar[1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        bt = np.where(denom > 0, (1.0 - alpha_bar[:-1]) / denom * beta[1:], 0.0)
    beta_tilde[1:] = bt
    for arr in (beta, alpha, alpha_bar, beta_tilde):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar, beta_tilde)


def make_schedule(T: int = 1000, kind: str = "linear", beta_start: float = 1e-4,
                  beta_end: float = 2e-2) -> NoiseSchedule:
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ScheduleError("T must be at least 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def forward_corrupt(x0, t, schedule: NoiseSchedule, seed=None, eps=None):
    """Sample ``x_t`` given ``x0``; returns ``(x_t, eps)``.

    ``t`` may be a scalar or one step per row of a 2-D ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ScheduleError(f"t outside 1..{schedule.T}")
    if eps is None:
        eps = _rng(seed).standard_normal(x0.shape)
    ab = schedule.alpha_bar[t]
    if ab.ndim == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def tweedie_x0(x_t, t, eps_pred, schedule: NoiseSchedule):
    """Posterior-mean estimate of the clean field from a noise prediction.

    Works on plain arrays and on tape variables.
    """
    ab = schedule.alpha_bar[schedule.check_t(t)]
    if ab < ALPHA_BAR_FLOOR:
        raise ScheduleError(f"alpha_bar[{t}] = {ab:g} is too small to invert")
    if isinstance(x_t, ad.Var) or isinstance(eps_pred, ad.Var):
        return ad.mul(ad.sub(x_t, ad.mul(eps_pred, np.sqrt(1.0 - ab))), 1.0 / np.sqrt(ab))
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * np.asarray(eps_pred)) / np.sqrt(ab)


def score_from_eps(eps_pred, t, schedule: NoiseSchedule):
    return -np.asarray(eps_pred) / np.sqrt(1.0 - schedule.alpha_bar[schedule.check_t(t)])


@dataclass(frozen=True)
class StepCoefficients:
    A: float
    B: float
    C_std: float  # standard deviation of the added noise; zero for DDIM


def ddpm_coefficients(t: int, schedule: NoiseSchedule) -> StepCoefficients:
    t = schedule.check_t(t)
    ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
    beta, alpha = schedule.beta[t], schedule.alpha[t]
    A = np.sqrt(ab_prev) * beta / (1.0 - ab)
    B = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    return StepCoefficients(float(A), float(B), float(np.sqrt(schedule.beta_tilde[t])))


def ddim_coefficients(t: int, schedule: NoiseSchedule) -> StepCoefficients:
    t = schedule.check_t(t)
    ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
    ratio = np.sqrt(1.0 - ab_prev) / np.sqrt(1.0 - ab)
    A = np.sqrt(ab_prev) - ratio * np.sqrt(ab)
    return StepCoefficients(float(A), float(ratio), 0.0)


def ddpm_step(x_t, t, eps_pred, schedule: NoiseSchedule, seed=None, z=None):
    """One ancestral step; the noise is suppressed at ``t = 1``."""
    c = ddpm_coefficients(t, schedule)
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = tweedie_x0(x_t, t, eps_pred, schedule)
    out = c.A * x0_hat + c.B * x_t
    if int(t) > 1:
        if z is None:
            z = _rng(seed).standard_normal(x_t.shape)
        out = out + c.C_std * z
    return out


def ddim_step(x_t, t, eps_pred, schedule: NoiseSchedule):
    c = ddim_coefficients(t, schedule)
    x_t = np.asarray(x_t, dtype=np.float64)
    return c.A * tweedie_x0(x_t, t, eps_pred, schedule) + c.B * x_t


def training_loss(params, x0_batch, schedule: NoiseSchedule, seed, hierarchy: GraphHierarchy,
                  config: ScoreNetConfig, eps_fn=None):
    """Mean over the batch of the squared noise-prediction error.

    ``params`` may hold tape variables, in which case a :class:`autodiff.Var`
    is returned.  ``eps_fn(x_t, t)`` replaces the network when given.
    """
    x0_batch = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    if x0_batch.shape[0] == 0:
        raise ValueError("empty batch")
    rng = _rng(seed)
    B = x0_batch.shape[0]
    t = rng.integers(1, schedule.T + 1, size=B)
    x_t, eps = forward_corrupt(x0_batch, t, schedule, rng)
    if eps_fn is not None:
        pred = eps_fn(x_t, t)
    else:
        pred = dgn_forward(x_t, t, hierarchy, params, config).eps
    diff = ad.sub(pred, eps) if isinstance(pred, ad.Var) else pred - eps
    if isinstance(diff, ad.Var):
        return ad.mul(ad.sum(ad.square(diff)), 1.0 / B)
    return float(np.sum(diff * diff) / B)


def sample_unconditional(params, hierarchy: GraphHierarchy, schedule: NoiseSchedule,
                         config: ScoreNetConfig, sampler: str = "ddim", seed=0, x_T=None,
                         eps_fn=None):
    """Full reverse pass from Gaussian noise.

    Randomness: ``x_T`` is drawn first from the generator, then one noise
    vector per DDPM step with ``t > 1``.
    """
    if sampler not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler {sampler!r}")
    rng = _rng(seed)
    if x_T is None:
        x = rng.standard_normal(hierarchy.levels[0].node_count)
    else:
        x = np.array(x_T, dtype=np.float64)
    if eps_fn is None:
        def eps_fn(xx, tt):
            return predict_eps(xx, tt, hierarchy, params, config)
    for t in range(schedule.T, 0, -1):
        eps = eps_fn(x, t)
        if sampler == "ddim":
            x = ddim_step(x, t, eps, schedule)
        else:
            x = ddpm_step(x, t, eps, schedule, rng)
    return x


# --- Gaussian toy for the conditional Tweedie identity ------------------------


def gaussian_toy_scores(x_t, y, alpha_bar, s2, lam):
    """Analytic scores for x0 ~ N(0,1), y = x0 + N(0, s2), Tikhonov weight ``lam``.

    Returns ``(prior, likelihood, regularizer)`` scores with respect to x_t,
    the regularizer being -lam * d/dx_t (x_t**2).
    """
    prior = -x_t
    lik = np.sqrt(alpha_bar) * (y - np.sqrt(alpha_bar) * x_t) / (1.0 - alpha_bar + s2)
    reg = -2.0 * lam * x_t
    return prior, lik, reg


def conditional_tweedie(x_t, alpha_bar, score):
    """Composite posterior mean from the total score at x_t."""
    return (x_t + (1.0 - alpha_bar) * score) / np.sqrt(alpha_bar)
