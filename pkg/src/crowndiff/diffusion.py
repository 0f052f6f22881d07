"""Denoising-diffusion machinery for tooth point clouds.

Implements the linear variance schedule and its derived tables, stepwise
and closed-form forward corruption, the Gaussian posterior quantities, the
noise-prediction training loss (masked to target teeth), the VLB building
block (diagonal Gaussian KL), the reverse sampler, and the cylinder-local
coordinate maps that keep each target's generation inside its spatial
prior.

Conventions: timesteps run t = 1..T; all tables are indexed by t (index 0
unused aside from the cumulative-product base case alpha_bar(0) = 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boundary import MIN_EXTENT_MM, CylBound


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule tables for T steps, each array of length T+1.

    Index t in 1..T; entry 0 is a placeholder except for ``alpha_bar``
    where alpha_bar[0] = 1 (empty product).
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray  # beta-tilde

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 2e-2) -> DiffusionSchedule:
    """Linear schedule: beta_t = beta_min + (beta_max - beta_min)(t-1)/(T-1)."""
    if T < 2:
        raise ValueError("schedule needs at least 2 steps")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})")
    t = np.arange(T + 1, dtype=np.float64)
    beta = beta_min + (beta_max - beta_min) * (t - 1.0) / (T - 1.0)
    beta[0] = np.nan  # t=0 is not a transition
    alpha = 1.0 - beta
    alpha_bar = np.empty(T + 1)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(alpha[1:])
    posterior_var = np.empty(T + 1)
    posterior_var[0] = np.nan
    posterior_var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return DiffusionSchedule(
        T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, posterior_var=posterior_var
    )


def forward_step(schedule: DiffusionSchedule, x_prev, t: int, noise):
    """One forward transition: x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) eps."""
    t = schedule.check_t(t)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    return np.sqrt(schedule.alpha[t]) * x_prev + np.sqrt(schedule.beta[t]) * noise


def forward_closed(schedule: DiffusionSchedule, x_0, t: int, noise):
    """Direct corruption: x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps."""
    t = schedule.check_t(t)
    x_0 = np.asarray(x_0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x_0 + np.sqrt(1.0 - ab) * noise


def posterior_mean(schedule: DiffusionSchedule, x_t, x_0, t: int):
    """Mean of the Gaussian forward posterior q(x_{t-1} | x_t, x_0)."""
    t = schedule.check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    x_0 = np.asarray(x_0, dtype=np.float64)
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t - 1]
    beta_t = schedule.beta[t]
    alpha_t = schedule.alpha[t]
    c0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = np.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0 * x_0 + ct * x_t


def mu_theta(schedule: DiffusionSchedule, x_t, eps_pred, t: int):
    """Reverse-process mean parameterized by the predicted noise."""
    t = schedule.check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if x_t.shape != eps_pred.shape:
        raise ValueError("x_t and eps_pred shapes must agree")
    ab_t = schedule.alpha_bar[t]
    return (x_t - schedule.beta[t] / np.sqrt(1.0 - ab_t) * eps_pred) / np.sqrt(
        schedule.alpha[t]
    )


def simple_loss(eps_true, eps_pred, target_mask) -> float:
    """Noise-matching MSE over target points only.

    Inputs are (K, N, 3); ``target_mask`` is (K,) booleans.  The loss is the
    squared 3-vector error summed per point and averaged over all masked
    points, so i.i.d. standard-normal truth against a zero prediction gives
    about 3.  Context rows never contribute.
    """
    eps_true = np.asarray(eps_true, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if eps_true.shape != eps_pred.shape:
        raise ValueError("eps shapes must agree")
    mask = np.asarray(target_mask, dtype=bool)
    if not mask.any():
        raise ValueError("simple_loss: empty target mask")
    diff = eps_true[mask] - eps_pred[mask]
    return float((diff**2).sum(axis=-1).mean())


def gaussian_kl(mean1, var1, mean2, var2) -> float:
    """KL(N(mean1, var1 I) || N(mean2, var2 I)), summed over dimensions."""
    mean1 = np.asarray(mean1, dtype=np.float64)
    mean2 = np.asarray(mean2, dtype=np.float64)
    var1 = np.asarray(var1, dtype=np.float64)
    var2 = np.asarray(var2, dtype=np.float64)
    if np.any(var1 <= 0) or np.any(var2 <= 0):
        raise ValueError("variances must be positive")
    term = 0.5 * (np.log(var2 / var1) + (var1 + (mean1 - mean2) ** 2) / var2 - 1.0)
    term = np.broadcast_arrays(term, mean1)[0]
    return float(np.sum(term))


# ---------------------------------------------------------------------------
# Cylinder-local coordinates
# ---------------------------------------------------------------------------

def cyl_normalize(points, bound: CylBound) -> np.ndarray:
    """World -> cylinder-local map: unit radius in xy, z in [-1, 1]."""
    if bound.r < MIN_EXTENT_MM or bound.h < MIN_EXTENT_MM:
        raise ValueError(f"degenerate bound: {bound}")
    pts = np.asarray(points, dtype=np.float64)
    local = pts - np.array([bound.c_x, bound.c_y, bound.c_z])
    return local * np.array([1.0 / bound.r, 1.0 / bound.r, 2.0 / bound.h])


def cyl_denormalize(local, bound: CylBound) -> np.ndarray:
    """Exact inverse of :func:`cyl_normalize`."""
    if bound.r < MIN_EXTENT_MM or bound.h < MIN_EXTENT_MM:
        raise ValueError(f"degenerate bound: {bound}")
    pts = np.asarray(local, dtype=np.float64)
    return pts * np.array([bound.r, bound.r, bound.h / 2.0]) + np.array(
        [bound.c_x, bound.c_y, bound.c_z]
    )


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def noise_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent RNG stream for (seed, keys), stable across runs and
    evaluation order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def oracle_eps_fn(x0_local: np.ndarray, schedule: DiffusionSchedule):
    """Noise predictor that knows the clean targets (testing aid).

    Returns the exact noise consistent with x_t and x_0, which makes the
    reverse sampler walk the true forward posterior back to x_0.
    """
    x0 = np.asarray(x0_local, dtype=np.float64)

    def eps_fn(x_t: np.ndarray, t: int) -> np.ndarray:
        ab = schedule.alpha_bar[schedule.check_t(t)]
        return (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)

    return eps_fn


def reverse_sample(
    eps_fn,
    bounds,
    n_points: int,
    schedule: DiffusionSchedule,
    seed: int,
    stream_keys=None,
) -> np.ndarray:
    """Generate target point clouds by iterative denoising.

    Starts from standard normal noise in each target's cylinder-local frame,
    runs x_{t-1} = mu_theta + sqrt(beta_tilde_t) eta for t = T..1 (eta = 0 at
    the final step), and maps the result back to world coordinates.

    Parameters
    ----------
    eps_fn : callable (x_local (K, N, 3), t) -> (K, N, 3)
        Noise predictor over the stacked target clouds.
    bounds : sequence of CylBound
        One spatial prior per target; defines the local frames.
    n_points : int
        Points per generated cloud.
    seed, stream_keys :
        Noise is drawn from one independent stream per target, keyed by
        (seed, stream_keys[i]); defaults to the target's position.
    """
    bounds = list(bounds)
    k = len(bounds)
    if k == 0:
        raise ValueError("reverse_sample needs at least one target bound")
    keys = list(range(k)) if stream_keys is None else [int(s) for s in stream_keys]
    if len(keys) != k:
        raise ValueError("one stream key per target required")
    rngs = [noise_stream(seed, key) for key in keys]

    x = np.stack([rng.standard_normal((n_points, 3)) for rng in rngs])
    for t in range(schedule.T, 0, -1):
        eps = np.asarray(eps_fn(x, t), dtype=np.float64)
        if eps.shape != x.shape:
            raise ValueError("eps_fn returned wrong shape")
        if not np.isfinite(eps).all():
            raise FloatingPointError(f"non-finite noise prediction at t={t}")
        x = mu_theta(schedule, x, eps, t)
        if t > 1:
            sigma = np.sqrt(schedule.posterior_var[t])
            x = x + sigma * np.stack(
                [rng.standard_normal((n_points, 3)) for rng in rngs]
            )
    return np.stack(
        [cyl_denormalize(x[i], bounds[i]) for i in range(k)]
    )


def initial_noise(bounds, n_points: int, seed: int, stream_keys=None) -> np.ndarray:
    """The world-frame prior sample the reverse sampler would start from."""
    bounds = list(bounds)
    keys = list(range(len(bounds))) if stream_keys is None else list(stream_keys)
    out = []
    for bound, key in zip(bounds, keys):
        rng = noise_stream(seed, key)
        out.append(cyl_denormalize(rng.standard_normal((n_points, 3)), bound))
    return np.stack(out)
