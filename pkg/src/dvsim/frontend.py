"""Photoelectron sampling and noisy log-signal generation.

Noise enters the signal chain before the pixel low-pass, so reducing the
buffer cutoff genuinely trades bandwidth for noise.  The per-step noise is
calibrated such that after first-order filtering with coefficient
alpha = 1 - exp(-2*pi*f_cut*dt) the variance of the filtered log signal is

    Var(ell_filt) = noise_floor_factor / N,   N = rate * tau,  tau = 1/(2*pi*f_cut)

(the photoreceptor noise floor, a fixed multiple of the photon shot level).
A white per-step variance s2 filters to s2 * alpha/(2-alpha), so the required
per-step total is k_total/lam with

    k_total = noise_floor_factor * (dt/tau) * (2-alpha)/alpha      (~= 2*factor)

In poisson_plus_buffer mode the sampled counts already contribute 1/lam of
that per-step variance (delta method on ln of a Poisson count), and the
buffer adds the remaining (k_total-1)/lam as an independent Gaussian.  In
analytic_gaussian mode count sampling is skipped and the full k_total/lam is
injected.  Both modes therefore converge to the same filtered variance, which
is what the Poisson-mode oracle tests pin down.
"""

from __future__ import annotations

import math

from .config import NoiseMode, SensorConfig
from .rng import PixelStream

__all__ = [
    "log_signal",
    "per_step_noise_scale",
    "sample_photoelectrons",
    "COUNT_FLOOR",
    "LAMBDA_NOISE_FLOOR",
]

# keeps ln finite at zero photons; only matters far below the operating range
COUNT_FLOOR = 0.5
# caps the analytic/buffer noise variance as the mean count approaches zero
LAMBDA_NOISE_FLOOR = 0.25


def sample_photoelectrons(rate_eps: float, dt_us: float, stream: PixelStream) -> int:
    """Photoelectron count in one step: Poisson with mean rate*dt.

    Exact sampling below a mean of 1000; above that a rounded, zero-clamped
    Gaussian is used (relative moment error < 0.1% there).
    """
    if rate_eps < 0:
        raise ValueError("rate must be >= 0")
    return stream.poisson(rate_eps * (dt_us / 1e6))


def per_step_noise_scale(noise_floor_factor: float, f_cut_hz: float, dt_us: float) -> float:
    """k_total: per-step noise variance times lambda needed to hit the floor."""
    dt_s = dt_us / 1e6
    tau = 1.0 / (2.0 * math.pi * f_cut_hz)
    alpha = 1.0 - math.exp(-dt_s / tau)
    return noise_floor_factor * (dt_s / tau) * (2.0 - alpha) / alpha


def log_signal(
    count: float,
    lam_ref: float,
    noise_mode: NoiseMode,
    stream: PixelStream | None,
    *,
    lam: float | None = None,
    k_total: float | None = None,
) -> float:
    """Instantaneous log-intensity sample relative to a reference mean count.

    count    sampled photoelectrons this step (poisson_plus_buffer mode)
    lam_ref  reference mean count per step (rate_ref * dt), > 0
    lam      mean count this step; required for the noise terms and for the
             deterministic modes, where it replaces the sampled count
    """
    if lam_ref <= 0:
        raise ValueError("lam_ref must be > 0")
    inv_ref = 1.0 / lam_ref
    if noise_mode == NoiseMode.OFF:
        base = lam if lam is not None else count
        eff = base if base > COUNT_FLOOR else COUNT_FLOOR
        return math.log(eff * inv_ref)
    if lam is None or k_total is None:
        raise ValueError("lam and k_total are required in noisy modes")
    if noise_mode == NoiseMode.ANALYTIC_GAUSSIAN:
        eff = lam if lam > COUNT_FLOOR else COUNT_FLOOR
        ell = math.log(eff * inv_ref)
        if lam > 0.0:
            lam_eff = lam if lam > LAMBDA_NOISE_FLOOR else LAMBDA_NOISE_FLOOR
            ell = ell + stream.normal() * math.sqrt(k_total / lam_eff)
        return ell
    # poisson_plus_buffer
    eff = count if count > COUNT_FLOOR else COUNT_FLOOR
    ell = math.log(eff * inv_ref)
    if lam > 0.0:
        lam_eff = lam if lam > LAMBDA_NOISE_FLOOR else LAMBDA_NOISE_FLOOR
        scale = k_total - 1.0
        if scale < 0.0:
            scale = 0.0
        ell = ell + stream.normal() * math.sqrt(scale / lam_eff)
    return ell


def reference_rate(cfg: SensorConfig) -> float:
    """Reference photoelectron rate (1 lux at the configured binning mode).

    With this reference the noise-free log signal equals ln(L/lux).
    """
    from .stimulus import photoelectron_rate

    return photoelectron_rate(1.0, cfg, cfg.binning_enabled)
