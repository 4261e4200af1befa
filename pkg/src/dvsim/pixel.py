"""Per-pixel signal chain and the array simulator.

Chain order per step: photoelectron sampling (optionally binned 2x2) ->
noisy log signal -> first-order low-pass -> auto-centering preamp ->
change detector with refractory.  Noise is injected before the low-pass so
the buffer cutoff trades bandwidth against noise.

The array simulator drives the selected kernel backend in chunks.  Pixel
state only interacts through the shared binned photocurrent, so the array
can be partitioned into row bands and stepped concurrently; per-pixel
counter-based random streams make the result independent of the partition.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import backend, frontend, readout, rng
from .config import NoiseMode, SensorConfig, build_mismatch_map, validate_config
from .stimulus import Scene, photoelectron_rate

__all__ = [
    "ArraySimulator",
    "PixelState",
    "bin_photons",
    "change_detect",
    "auto_center",
    "lowpass_step",
    "preamp_output",
]

_MODE_CODE = {
    NoiseMode.OFF: 0,
    NoiseMode.POISSON_PLUS_BUFFER: 1,
    NoiseMode.ANALYTIC_GAUSSIAN: 2,
}

# chunking targets: bound event-buffer memory and time-varying field blocks
_MAX_EVENT_SLOTS = 2_000_000
_MAX_VARYING_STEPS = 256


def lowpass_step(prev: float, x: float, dt_us: float, f_cut_hz: float) -> float:
    """One first-order IIR update with the exact coefficient 1 - exp(-2*pi*f*dt)."""
    alpha = 1.0 - math.exp(-2.0 * math.pi * f_cut_hz * (dt_us / 1e6))
    return prev + alpha * (x - prev)


def preamp_output(ell: float, center: float, cfg: SensorConfig) -> float:
    """Detector input: gain*(ell - center) clamped to +-preamp_sat, or ell when bypassed."""
    if not cfg.preamp_enabled:
        return ell
    u = cfg.preamp_gain * (ell - center)
    if u > cfg.preamp_sat:
        return cfg.preamp_sat
    if u < -cfg.preamp_sat:
        return -cfg.preamp_sat
    return u


@dataclass
class PixelState:
    """Scalar per-pixel dynamic state (the kernels hold these as arrays)."""

    ell_filt: float = 0.0
    ell_center: float = 0.0
    v_mem: float = 0.0
    refractory_until_us: int = 0
    theta_on_px: float = 0.119
    theta_off_px: float = 0.119


def auto_center(state: PixelState, cfg: SensorConfig) -> None:
    """Re-center the preamp on the current filtered signal (no-op when bypassed)."""
    if cfg.preamp_enabled and cfg.auto_center_enabled:
        state.ell_center = state.ell_filt
        state.v_mem = 0.0


def change_detect(state: PixelState, v: float, t_us: int, cfg: SensorConfig):
    """Threshold comparison against the memorized level; returns 1 (ON), 0 (OFF) or None.

    On an event the memorized level resets to the current detector input and,
    with the preamp active, the auto-centering fires, leaving the pixel
    re-referenced at zero displacement.
    """
    if t_us < state.refractory_until_us:
        return None
    dv = v - state.v_mem
    if dv >= state.theta_on_px:
        pol = 1
    elif -dv >= state.theta_off_px:
        pol = 0
    else:
        return None
    state.v_mem = v
    state.refractory_until_us = t_us + cfg.refractory_us
    auto_center(state, cfg)
    return pol


def bin_photons(counts) -> int:
    """Shared photoelectron count of a 2x2 bin (photodiodes shorted together)."""
    c = list(counts)
    if len(c) != 4:
        raise ValueError("a bin group has exactly 4 pixel counts")
    return int(sum(c))


class ArraySimulator:
    """Stateful simulator of the full pixel array.

    A simulation is a pure function of (config, scene, run_key): identical
    inputs give bit-identical event streams for any worker count and either
    kernel backend.
    """

    def __init__(self, cfg: SensorConfig, run_key: int = 0):
        validate_config(cfg)
        self.cfg = cfg
        self.run_key = run_key
        mm = build_mismatch_map(cfg)
        self.th_on = np.ascontiguousarray(cfg.theta_on * mm.factor_on)
        self.th_off = np.ascontiguousarray(cfg.theta_off * mm.factor_off)
        self.rate_ref = frontend.reference_rate(cfg)
        self.lam_ref = self.rate_ref * cfg.dt_s
        self.inv_lam_ref = 1.0 / self.lam_ref
        self.alpha = cfg.lowpass_alpha
        self.k_total = frontend.per_step_noise_scale(cfg.noise_floor_factor, cfg.f_cut_hz, cfg.dt_us)
        h, w = cfg.height, cfg.width
        self._ys, self._xs = np.mgrid[0:h, 0:w]
        self.ell_filt = np.zeros((h, w))
        self.ell_center = np.zeros((h, w))
        self.v_mem = np.zeros((h, w))
        self.refr_until = np.zeros((h, w), dtype=np.int64)
        self.rng_state = rng.grid_keys(cfg.seed, w, h, run_key)
        h2, w2 = max(1, h // 2), max(1, w // 2)
        self._sh_ell = np.zeros((h2, w2))
        self._sh_lam = np.zeros((h2, w2))
        self._moments = np.zeros((2, h, w))
        self._moment_steps = 0
        self.t_us = 0
        self._initialized = False

    # -- state management ---------------------------------------------------

    def _lam_field(self, scene: Scene, t_us: int) -> np.ndarray:
        # per-pixel mean counts; the kernel's 2x2 group sum supplies the binning factor 4
        lux = scene.field(t_us, self._xs, self._ys)
        rate = photoelectron_rate(1.0, self.cfg, False)
        return np.ascontiguousarray(lux * (rate * self.cfg.dt_s))

    def _noiseless_ell(self, lam: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if cfg.binning_enabled:
            h, w = cfg.height, cfg.width
            lam_g = lam.reshape(h // 2, 2, w // 2, 2).sum(axis=(1, 3))
            lam = np.repeat(np.repeat(lam_g, 2, axis=0), 2, axis=1)
        return np.log(np.maximum(lam, frontend.COUNT_FLOOR) * self.inv_lam_ref)

    def reset(self, scene: Scene, t0_us: int = 0) -> None:
        """Settle the array on the scene at t0: converged filter, centered preamp."""
        ell0 = self._noiseless_ell(self._lam_field(scene, t0_us))
        self.ell_filt[:] = ell0
        self.ell_center[:] = ell0
        self.v_mem[:] = 0.0 if self.cfg.preamp_enabled else ell0
        self.refr_until[:] = t0_us
        self._moments[:] = 0.0
        self._moment_steps = 0
        self.t_us = t0_us
        self._initialized = True

    def rearm(self) -> None:
        """Re-reference every pixel at its current signal (memorized level and center).

        Equivalent to the settled state reached after leak/noise events have
        re-memorized the detector input; used by step-response protocols to
        start a measurement window from a known state.
        """
        cfg = self.cfg
        if cfg.preamp_enabled and cfg.auto_center_enabled:
            self.ell_center[:] = self.ell_filt
            self.v_mem[:] = 0.0
        elif cfg.preamp_enabled:
            self.v_mem[:] = np.clip(
                cfg.preamp_gain * (self.ell_filt - self.ell_center), -cfg.preamp_sat, cfg.preamp_sat
            )
        else:
            self.v_mem[:] = self.ell_filt
        self.refr_until[:] = self.t_us

    def clear_moments(self) -> None:
        self._moments[:] = 0.0
        self._moment_steps = 0

    def filtered_mean_var(self):
        """Per-pixel time mean and variance of the filtered log signal."""
        n = self._moment_steps
        if n == 0:
            raise RuntimeError("no moments accumulated; run with moments=True")
        mean = self._moments[0] / n
        var = self._moments[1] / n - mean * mean
        return mean, np.maximum(var, 0.0)

    # -- stepping -----------------------------------------------------------

    def _bands(self, workers: int):
        unit = 2 if self.cfg.binning_enabled else 1
        n_units = self.cfg.height // unit
        workers = max(1, min(workers, n_units))
        bounds = [round(i * n_units / workers) * unit for i in range(workers + 1)]
        return [(bounds[i], bounds[i + 1]) for i in range(workers) if bounds[i + 1] > bounds[i]]

    def run(
        self,
        scene: Scene,
        t_end_us: int,
        *,
        collect_events: bool = True,
        moments: bool = False,
        workers: int = 1,
    ) -> np.ndarray:
        """Advance the array to t_end_us; returns the (t, y, x)-ordered event stream."""
        if not self._initialized:
            self.reset(scene, self.t_us)
        cfg = self.cfg
        dt = cfg.dt_us
        n_total = (t_end_us - self.t_us) // dt
        if n_total <= 0:
            return readout.empty_events()

        kern = backend.kernel().run_steps
        bands = self._bands(workers)
        h, w = cfg.height, cfg.width
        mode = _MODE_CODE[cfg.noise_mode]
        chunk_cap = max(1, _MAX_EVENT_SLOTS // (h * w))
        bufs = [
            (
                np.empty(chunk_cap * (y1 - y0) * w, dtype=np.uint64),
                np.empty(chunk_cap * (y1 - y0) * w, dtype=np.uint16),
                np.empty(chunk_cap * (y1 - y0) * w, dtype=np.uint16),
                np.empty(chunk_cap * (y1 - y0) * w, dtype=np.uint8),
            )
            for (y0, y1) in bands
        ]
        pool = ThreadPoolExecutor(max_workers=len(bands)) if len(bands) > 1 else None

        chunks: list[np.ndarray] = []
        try:
            changes = scene.change_times(self.t_us, t_end_us)
            if changes is None:
                seg_edges = None
            else:
                # segment boundaries snapped up to the step grid
                seg_edges = [self.t_us]
                for c in changes:
                    snapped = self.t_us + -(-(c - self.t_us) // dt) * dt
                    if seg_edges[-1] < snapped < t_end_us:
                        seg_edges.append(snapped)
                seg_edges.append(t_end_us)

            def run_chunk(lam_block: np.ndarray, t0: int, n_steps: int):
                results = []

                def one_band(idx: int):
                    y0, y1 = bands[idx]
                    et, ex, ey, ep = bufs[idx]
                    n = kern(
                        lam_block, t0, dt, n_steps, y0, y1,
                        self.alpha, self.inv_lam_ref, mode, self.k_total,
                        1 if cfg.binning_enabled else 0,
                        1 if cfg.force_reset else 0,
                        1 if cfg.preamp_enabled else 0,
                        cfg.preamp_gain, cfg.preamp_sat,
                        1 if cfg.auto_center_enabled else 0,
                        cfg.refractory_us,
                        self.th_on, self.th_off,
                        self.ell_filt, self.ell_center, self.v_mem,
                        self.refr_until, self.rng_state,
                        self._sh_ell, self._sh_lam,
                        et, ex, ey, ep,
                        self._moments, 1 if moments else 0,
                    )
                    return readout.make_events(et[:n], ex[:n], ey[:n], ep[:n])

                if pool is None:
                    results = [one_band(0)]
                else:
                    results = list(pool.map(one_band, range(len(bands))))
                if moments:
                    self._moment_steps += n_steps
                if collect_events:
                    merged = np.concatenate(results) if len(results) > 1 else results[0]
                    if len(results) > 1:
                        merged = merged[np.argsort(merged["t"], kind="stable")]
                    chunks.append(merged)

            if seg_edges is not None:
                for s0, s1 in zip(seg_edges[:-1], seg_edges[1:]):
                    n_seg = (s1 - s0) // dt
                    lam = self._lam_field(scene, s0)[None, :, :]
                    done = 0
                    while done < n_seg:
                        n_steps = min(chunk_cap, n_seg - done)
                        run_chunk(lam, s0 + done * dt, n_steps)
                        done += n_steps
            else:
                done = 0
                step_cap = min(chunk_cap, _MAX_VARYING_STEPS)
                while done < n_total:
                    n_steps = min(step_cap, n_total - done)
                    t0 = self.t_us + done * dt
                    lam = np.empty((n_steps, h, w))
                    for i in range(n_steps):
                        lam[i] = self._lam_field(scene, t0 + i * dt)
                    run_chunk(lam, t0, n_steps)
                    done += n_steps
        finally:
            if pool is not None:
                pool.shutdown()

        self.t_us += n_total * dt
        if not collect_events:
            return readout.empty_events()
        if not chunks:
            return readout.empty_events()
        return np.concatenate(chunks)

    def step(self, scene: Scene) -> np.ndarray:
        """Advance a single step; returns the events emitted at the current time."""
        return self.run(scene, self.t_us + self.cfg.dt_us)
