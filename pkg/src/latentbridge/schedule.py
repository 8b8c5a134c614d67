"""Noise schedules and closed-form forward-process math.

The default schedule is linear over 100 steps with beta_end rescaled so
the terminal cumulative signal (alpha_bar) is about 4e-3: comparable
terminal SNR to the common 1000-step linear convention, so the fully
noised latent is near-Gaussian while 100 steps stay cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics.tensor import ShapeError, Tensor

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "step_from_fraction",
    "forward_diffuse",
    "DEFAULT_STEPS",
    "DEFAULT_BETA_START",
    "DEFAULT_BETA_END",
]

DEFAULT_STEPS = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.1063  # terminal alpha_bar ~= 4.00e-3 at 100 steps


class ScheduleError(ValueError):
    """Invalid schedule parameters."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance increments beta[t] and cumulative products alpha_bar.

    beta has length `steps` (beta[i] governs step i+1); alpha_bar has
    length steps+1 with alpha_bar[0] = 1 (the clean slot), so "k forward
    steps" indexes alpha_bar[k] without off-by-one ambiguity.
    """

    kind: str
    steps: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.shape != (self.steps + 1,) or self.beta.shape != (self.steps,):
            raise ScheduleError(
                f"schedule arrays {self.beta.shape}/{ab.shape} for T={self.steps}"
            )
        if ab[0] != 1.0 or not (0.0 < ab[-1] < 1.0):
            raise ScheduleError("alpha_bar must start at 1 and end in (0,1)")
        if not np.all(np.diff(ab) < 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        self.beta.flags.writeable = False
        ab.flags.writeable = False

    def alpha_bar_at(self, t: float) -> float:
        """alpha_bar at a (possibly fractional) diffusion time in [0, T].

        Integer times read the table exactly; fractional times use
        log-linear interpolation, which preserves strict monotonicity.
        """
        if t < 0 or t > self.steps:
            raise ScheduleError(f"time {t} outside [0, {self.steps}]")
        lo = math.floor(t)
        if lo == t:
            return float(self.alpha_bar[int(t)])
        hi = lo + 1
        frac = t - lo
        la, lb = math.log(self.alpha_bar[lo]), math.log(self.alpha_bar[hi])
        return math.exp((1.0 - frac) * la + frac * lb)

    def snr(self, t: float) -> float:
        ab = self.alpha_bar_at(t)
        return ab / (1.0 - ab)


def make_schedule(
    kind: str = "linear",
    steps: int = DEFAULT_STEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Build a noise schedule. kind is "linear" or "cosine".

    The cosine schedule derives beta from the squared-cosine alpha_bar
    curve (offset 0.008, beta clipped at 0.999) and ignores beta_start /
    beta_end.
    """
    if steps < 2:
        raise ScheduleError(f"steps must be >= 2, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        ts = np.arange(steps + 1, dtype=np.float64) / steps
        curve = np.cos((ts + s) / (1.0 + s) * np.pi / 2.0) ** 2
        curve /= curve[0]
        beta = np.clip(1.0 - curve[1:] / curve[:-1], 1e-8, 0.999)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - beta)))
    return NoiseSchedule(kind=kind, steps=steps, beta=beta, alpha_bar=alpha_bar)


def step_from_fraction(fraction: float, steps: int) -> int:
    """Map an encoding fraction in (0,1] to a forward step count.

    round(fraction * steps), clamped to [1, steps]; halves round up.
    """
    if fraction <= 0.0:
        raise ScheduleError(f"fraction must be positive, got {fraction}")
    if fraction > 1.0:
        raise ScheduleError(f"fraction must be <= 1, got {fraction}")
    k = math.floor(fraction * steps + 0.5)
    return max(1, min(steps, k))


def forward_diffuse(z0: Tensor, k: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Closed-form forward process: sqrt(ab_k) * z0 + sqrt(1 - ab_k) * eps.

    k = 0 returns z0 unchanged (bitwise).
    """
    if not (0 <= k <= sched.steps):
        raise ScheduleError(f"k={k} outside [0, {sched.steps}]")
    if k == 0:
        return z0
    if eps.shape != z0.shape:
        raise ShapeError(f"forward_diffuse: noise {eps.shape} vs latent {z0.shape}")
    ab = float(sched.alpha_bar[k])
    out = math.sqrt(ab) * z0.data + math.sqrt(1.0 - ab) * eps.data
    return Tensor._wrap(out.astype(z0.data.dtype, copy=False))
