"""Reverse-process machinery: guidance, DDIM steps, inversion.

The eta=0 sampler and its inverse traverse the same deterministic flow in
opposite directions, so invert-then-reverse round trips reproduce the
input up to discretization error; refining the step grid (substeps > 1)
shrinks that error. eta=0 runs are bit-reproducible and never touch the
seed; eta=1 gives the ancestral (stochastic) sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics.tensor import NonFiniteError, ShapeError, Tensor
from .schedule import NoiseSchedule

__all__ = ["SamplerConfig", "cfg_combine", "ddim_step", "reverse", "ddim_invert"]


@dataclass(frozen=True)
class SamplerConfig:
    eta: float = 0.0
    guidance_scale: float = 7.5
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.eta <= 1.0):
            raise ShapeError(f"eta must be in [0,1], got {self.eta}")
        if self.guidance_scale < 0.0:
            raise ShapeError(f"guidance scale must be >= 0, got {self.guidance_scale}")


def _wrap(out: np.ndarray, what: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{what}: non-finite values")
    return Tensor._wrap(out)


def cfg_combine(eps_u: Tensor, eps_c: Tensor, scale: float) -> Tensor:
    """eps_u + scale * (eps_c - eps_u). scale 0/1 return the branch bitwise."""
    if eps_u.shape != eps_c.shape:
        raise ShapeError(f"cfg_combine: shape {eps_u.shape} vs {eps_c.shape}")
    scale = float(scale)
    if scale == 0.0:
        return eps_u
    if scale == 1.0:
        return eps_c
    return _wrap(eps_u.data + scale * (eps_c.data - eps_u.data), "cfg_combine")


def _ddim_update(z: np.ndarray, ab_from: float, ab_to: float, eps: np.ndarray) -> np.ndarray:
    """Shared deterministic flow update between any two alpha_bar levels."""
    z0_hat = (z - math.sqrt(1.0 - ab_from) * eps) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * z0_hat + math.sqrt(1.0 - ab_to) * eps


def ddim_step(
    z_t: Tensor,
    t_from: float,
    t_to: float,
    eps_hat: Tensor,
    eta: float,
    sched: NoiseSchedule,
    noise: Tensor | None = None,
) -> Tensor:
    """One reverse step t_from -> t_to (t_to < t_from).

    Predicted-clean form: z0_hat = (z_t - sqrt(1-ab_t) eps) / sqrt(ab_t),
    then z_to = sqrt(ab_to) z0_hat + sqrt(1-ab_to-sigma^2) eps + sigma*noise
    with sigma = eta * sqrt((1-ab_to)/(1-ab_t)) * sqrt(1-ab_t/ab_to).
    """
    if not (0 <= t_to < t_from <= sched.steps):
        raise ShapeError(f"ddim_step: need 0 <= t_to < t_from <= T, got {t_from}->{t_to}")
    if eps_hat.shape != z_t.shape:
        raise ShapeError(f"ddim_step: eps {eps_hat.shape} vs z {z_t.shape}")
    ab_f = sched.alpha_bar_at(t_from)
    ab_t = sched.alpha_bar_at(t_to)
    if eta == 0.0:
        return _wrap(_ddim_update(z_t.data, ab_f, ab_t, eps_hat.data), "ddim_step")
    sigma = (
        eta
        * math.sqrt((1.0 - ab_t) / (1.0 - ab_f))
        * math.sqrt(max(0.0, 1.0 - ab_f / ab_t))
    )
    if noise is None:
        raise ShapeError("ddim_step: eta > 0 requires a noise tensor")
    if noise.shape != z_t.shape:
        raise ShapeError(f"ddim_step: noise {noise.shape} vs z {z_t.shape}")
    z0_hat = (z_t.data - math.sqrt(1.0 - ab_f) * eps_hat.data) / math.sqrt(ab_f)
    out = (
        math.sqrt(ab_t) * z0_hat
        + math.sqrt(max(0.0, 1.0 - ab_t - sigma**2)) * eps_hat.data
        + sigma * noise.data
    )
    return _wrap(out, "ddim_step")


def _time_grid(k: int, substeps: int) -> list[float]:
    """Descending times k -> 0 with `substeps` sub-intervals per unit step."""
    n = k * substeps
    return [k - i / substeps for i in range(n + 1)]


def _guided_eps(denoiser, z, t, cond, cond_u, scale):
    eps_u = denoiser.predict_noise(z, t, cond_u)
    eps_c = denoiser.predict_noise(z, t, cond)
    return cfg_combine(eps_u, eps_c, scale)


def reverse(
    z_k: Tensor,
    k: int,
    cond,
    sampler_cfg: SamplerConfig,
    sched: NoiseSchedule,
    denoiser,
    substeps: int = 1,
) -> Tensor:
    """Guided reverse chain from step k down to 0.

    Every step queries the denoiser twice (null and given condition) and
    combines via classifier-free guidance before the DDIM update.
    """
    if not (0 < k <= sched.steps):
        raise ShapeError(f"reverse: k={k} outside (0, {sched.steps}]")
    if substeps < 1:
        raise ShapeError(f"reverse: substeps={substeps}")
    cond_u = denoiser.unconditional()
    rng = np.random.default_rng(sampler_cfg.seed)
    times = _time_grid(k, substeps)
    z = z_k
    for t_hi, t_lo in zip(times[:-1], times[1:]):
        eps = _guided_eps(denoiser, z, t_hi, cond, cond_u, sampler_cfg.guidance_scale)
        noise = None
        if sampler_cfg.eta > 0.0:
            noise = Tensor._wrap(rng.standard_normal(z.shape, dtype=np.float32))
        z = ddim_step(z, t_hi, t_lo, eps, sampler_cfg.eta, sched, noise)
    return z


def ddim_invert(z_0: Tensor, k: int, cond, sched: NoiseSchedule, denoiser, substeps: int = 1) -> Tensor:
    """Deterministic inversion 0 -> k riding the same flow as reverse (eta 0).

    Each sub-interval [t_lo, t_hi] evaluates the noise prediction at t_hi
    on the current (lower) state, mirroring the reverse step that would
    evaluate at t_hi on the higher state; the mismatch is the
    discretization error that shrinks as the grid refines.
    """
    if not (0 <= k <= sched.steps):
        raise ShapeError(f"ddim_invert: k={k} outside [0, {sched.steps}]")
    if substeps < 1:
        raise ShapeError(f"ddim_invert: substeps={substeps}")
    if k == 0:
        return z_0
    times = list(reversed(_time_grid(k, substeps)))  # ascending 0 -> k
    z = z_0
    for t_lo, t_hi in zip(times[:-1], times[1:]):
        eps = denoiser.predict_noise(z, t_hi, cond)
        ab_lo = sched.alpha_bar_at(t_lo)
        ab_hi = sched.alpha_bar_at(t_hi)
        z = _wrap(_ddim_update(z.data, ab_lo, ab_hi, eps.data), "ddim_invert")
    return z
