"""Characterization experiments: S-curves and contrast thresholds, rotating-chart
edge detection, noise-rate sweeps, stochastic-resonance probes, and the photon
budget arithmetic.

Experiment conventions:

* S-curve protocol: a high-contrast reset pulse, a settle phase, then a test
  step of contrast C; a pixel responds if it emits a correct-polarity event
  within the response window (default 200 ms) after the step.  A zero-contrast
  control row is always measured alongside, since noisy settings inflate the
  apparent sensitivity (noise pushes sub-threshold steps across threshold).
* The nominal contrast threshold (NCT) is the contrast at which 50% of pixels
  respond, linearly interpolated on the measured curve.
* Noise rates are per active pixel (the quarter of generators left enabled
  when force_reset is on) over a static scene, after a settling run.
* Nothing here tunes itself: operating-point optimization is an explicit
  grid_search over config values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import SensorConfig, NoiseMode, validate_config
from .pixel import ArraySimulator
from .stimulus import Constant, RotatingChart, StepProtocol, photoelectron_rate

__all__ = [
    "BudgetReport",
    "ChartDetectionResult",
    "ChartEdge",
    "NoiseSweepResult",
    "PreconditionError",
    "ResonanceProbe",
    "SCurve",
    "SCurvePoint",
    "chart_detection",
    "estimate_nct",
    "grid_search",
    "measure_s_curve",
    "noise_sweep_fcut",
    "noise_sweep_illuminance",
    "photon_budget",
    "rose_required_photons",
    "stochastic_resonance_probe",
]

# run-key nonces so distinct experiments never share pixel streams
_NONCE_SCURVE = 0x51
_NONCE_NOISE = 0x52
_NONCE_CHART = 0x53
_NONCE_PROBE = 0x54


class PreconditionError(RuntimeError):
    """An experiment precondition does not hold (bad sweep list, no crossing, ...)."""


def _run_key(nonce: int, point: int, trial: int) -> int:
    return (nonce << 48) | ((point & 0xFFFFFF) << 24) | (trial & 0xFFFFFF)


# ---------------------------------------------------------------------------
# Photon budget (pure arithmetic, no simulation)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BudgetReport:
    lux: float
    f_cut_hz: float
    tau_s: float
    n_electrons: float
    sigma_over_n: float | None
    k_sigma_contrasts: dict[int, float]

    def to_dict(self) -> dict:
        return {
            "lux": self.lux,
            "f_cut_hz": self.f_cut_hz,
            "tau_s": self.tau_s,
            "n_electrons": self.n_electrons,
            "sigma_over_n": self.sigma_over_n,
            "k_sigma_contrasts": {str(k): v for k, v in self.k_sigma_contrasts.items()},
        }


def photon_budget(lux: float, f_cut_hz: float, cfg: SensorConfig, binned: bool) -> BudgetReport:
    """Photoelectrons collected in one integration time and the noise-floor contrast.

    N = rate(L) * tau with tau = 1/(2*pi*f_cut); the relative noise floor is
    sigma/N = sqrt(noise_floor_factor/N), and the k-sigma contrasts are
    k * sigma/N.  For L = 0 the relative noise is undefined.
    """
    if lux < 0:
        raise PreconditionError("lux must be >= 0")
    if f_cut_hz <= 0:
        raise PreconditionError("f_cut_hz must be > 0")
    tau = 1.0 / (2.0 * math.pi * f_cut_hz)
    n_e = photoelectron_rate(lux, cfg, binned) * tau
    if n_e > 0:
        son = math.sqrt(cfg.noise_floor_factor / n_e)
        ks = {k: k * son for k in (1, 2, 4)}
    else:
        son = None
        ks = {}
    return BudgetReport(lux, f_cut_hz, tau, n_e, son, ks)


def rose_required_photons(contrast: float, snr_k: float, noise_floor_factor: float = 2.0) -> float:
    """Photons needed to resolve a contrast at k-sigma under the noise floor.

    Inverts k*sqrt(factor/N) = C, giving N = factor * k^2 / C^2 (the 1/C^2
    scaling of reliable edge detection).
    """
    if not (0.0 < contrast < 1.0):
        raise PreconditionError(f"contrast must be in (0, 1), got {contrast}")
    if snr_k <= 0:
        raise PreconditionError("snr_k must be > 0")
    return noise_floor_factor * snr_k**2 / contrast**2


# ---------------------------------------------------------------------------
# S-curves and NCT
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SCurvePoint:
    contrast: float
    fraction: float
    n: int


@dataclass(frozen=True)
class SCurve:
    """Fraction of (pixel, trial) pairs responding per test contrast.

    points[0] is always the zero-contrast control; contrasts are magnitudes
    and strictly increasing; polarity is +1 (ON steps) or -1 (OFF steps).
    """

    points: tuple[SCurvePoint, ...]
    polarity: int
    base_lux: float
    control_wrong_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {
            "polarity": "ON" if self.polarity > 0 else "OFF",
            "base_lux": self.base_lux,
            "control_wrong_fraction": self.control_wrong_fraction,
            "points": [
                {"contrast": p.contrast, "fraction": p.fraction, "n": p.n} for p in self.points
            ],
        }

    def to_csv(self) -> str:
        rows = ["contrast,fraction,n"]
        rows += [f"{p.contrast!r},{p.fraction!r},{p.n}" for p in self.points]
        return "\n".join(rows) + "\n"


def _protocol_times(cfg: SensorConfig, window_us: int) -> tuple[int, int, int]:
    """(t_reset, t_test, window) aligned to the step grid, with settle >= 12 tau."""
    dt = cfg.dt_us
    half = max(100_000, int(math.ceil(12.0 * cfg.tau_s * 1e6)))
    half = -(-half // dt) * dt
    t_reset = 10 * dt
    return t_reset, t_reset + 2 * half, window_us


def _step_response(
    cfg: SensorConfig,
    base_lux: float,
    signed_contrast: float,
    target_pol: int,
    window_us: int,
    run_key: int,
) -> tuple[int, int, int]:
    """(n responding correct, n responding wrong, n active) for one step trial.

    The array settles through the reset pulse, is re-referenced one window
    ahead of the test step (the settled state the physical protocol reaches
    once leak/noise events have re-memorized the input), then the test step
    is applied and events in the response window are counted.
    """
    t_reset, t_test, window = _protocol_times(cfg, window_us)
    scene = StepProtocol(
        base_lux,
        signed_contrast,
        t_reset_us=t_reset,
        t_test_us=t_test,
        t_window_us=window,
    )
    sim = ArraySimulator(cfg, run_key=run_key)
    sim.reset(scene, 0)
    sim.run(scene, t_test, collect_events=False)
    sim.rearm()
    ev = sim.run(scene, t_test + window)
    active = cfg.active_pixel_count
    if len(ev) == 0:
        return 0, 0, active
    addr = ev["y"].astype(np.int64) * cfg.width + ev["x"].astype(np.int64)
    want = 1 if target_pol > 0 else 0
    n_ok = len(np.unique(addr[ev["p"] == want]))
    n_wrong = len(np.unique(addr[ev["p"] != want]))
    return n_ok, n_wrong, active


def measure_s_curve(
    cfg: SensorConfig,
    contrasts: Sequence[float],
    base_lux: float = 40.0,
    trials: int = 1,
    polarity: int = 1,
    window_us: int = 200_000,
) -> SCurve:
    """Step-response S-curve over contrast magnitudes, plus the C=0 control row."""
    validate_config(cfg)
    mags = [float(c) for c in contrasts]
    if not mags or trials < 1:
        raise PreconditionError("need a nonempty contrast list and trials >= 1")
    if any(c <= 0 or c >= 1 for c in mags):
        raise PreconditionError("contrasts must be magnitudes in (0, 1)")
    if sorted(mags) != mags or len(set(mags)) != len(mags):
        raise PreconditionError("contrasts must be strictly increasing")
    sign = 1 if polarity > 0 else -1
    points = []
    wrong_control = 0
    for idx, mag in enumerate([0.0] + mags):
        ok_total = 0
        wrong_total = 0
        n_total = 0
        for trial in range(trials):
            key = _run_key(_NONCE_SCURVE, 2 * idx + (sign > 0), trial)
            n_ok, n_wrong, active = _step_response(cfg, base_lux, sign * mag, sign, window_us, key)
            ok_total += n_ok
            wrong_total += n_wrong
            n_total += active
        points.append(SCurvePoint(mag, ok_total / n_total, n_total))
        if idx == 0:
            wrong_control = wrong_total
    return SCurve(tuple(points), sign, base_lux, wrong_control / points[0].n)


def estimate_nct(curve: SCurve) -> float | None:
    """Contrast at the 50% response point (linear interpolation), or None if not reached."""
    pts = curve.points
    if pts[0].fraction >= 0.5:
        return pts[0].contrast
    for lo, hi in zip(pts[:-1], pts[1:]):
        if lo.fraction < 0.5 <= hi.fraction:
            span = hi.fraction - lo.fraction
            return lo.contrast + (0.5 - lo.fraction) * (hi.contrast - lo.contrast) / span
    return None


# ---------------------------------------------------------------------------
# Noise sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSweepResult:
    swept: str  # "lux" or "f_cut_hz"
    points: tuple[tuple[float, float, float], ...]  # (value, rate Hz/px, duration s)

    def rates(self) -> list[float]:
        return [p[1] for p in self.points]

    def to_dict(self) -> dict:
        return {
            "swept": self.swept,
            "points": [
                {self.swept: v, "rate_hz_per_px": r, "duration_s": d} for v, r, d in self.points
            ],
        }

    def to_csv(self) -> str:
        rows = [f"{self.swept},rate_hz_per_px,duration_s"]
        rows += [f"{v!r},{r!r},{d!r}" for v, r, d in self.points]
        return "\n".join(rows) + "\n"


def _noise_rate(cfg: SensorConfig, lux: float, duration_s: float, run_key: int) -> float:
    """Mean event rate per active pixel on a static scene (all events are noise)."""
    sim = ArraySimulator(cfg, run_key=run_key)
    scene = Constant(lux)
    sim.reset(scene, 0)
    settle_us = max(int(20 * cfg.tau_s * 1e6), 100_000)
    settle_us = -(-settle_us // cfg.dt_us) * cfg.dt_us
    sim.run(scene, settle_us, collect_events=False)
    span_us = int(duration_s * 1e6)
    ev = sim.run(scene, settle_us + span_us)
    return len(ev) / (cfg.active_pixel_count * span_us * 1e-6)


def noise_sweep_illuminance(
    cfg: SensorConfig, lux_list: Sequence[float], duration_s: float = 5.0
) -> tuple[NoiseSweepResult, NoiseSweepResult]:
    """Noise rate vs illuminance, measured with binning+force_reset on and off."""
    if not lux_list or any(l <= 0 for l in lux_list):
        raise PreconditionError("lux_list must be nonempty and positive")
    cfg_on = validate_config(cfg.replace(binning_enabled=True, force_reset=True))
    cfg_off = validate_config(cfg.replace(binning_enabled=False, force_reset=False))
    results = []
    for variant, c in enumerate((cfg_on, cfg_off)):
        pts = []
        for i, lux in enumerate(lux_list):
            rate = _noise_rate(c, lux, duration_s, _run_key(_NONCE_NOISE, i, variant))
            pts.append((float(lux), rate, duration_s))
        results.append(NoiseSweepResult("lux", tuple(pts)))
    return results[0], results[1]


def noise_sweep_fcut(
    cfg: SensorConfig, fcut_list: Sequence[float], lux: float, duration_s: float = 5.0
) -> NoiseSweepResult:
    """Noise rate vs low-pass cutoff at fixed illuminance.

    Cutoffs whose bandwidth budget is finer than the configured step rerun
    with a reduced dt so the filter stays well sampled.
    """
    if not fcut_list or any(f <= 0 for f in fcut_list):
        raise PreconditionError("fcut_list must be nonempty and positive")
    pts = []
    for i, f in enumerate(fcut_list):
        dt = min(cfg.dt_us, int(1e6 / (20.0 * f)))
        c = validate_config(cfg.replace(f_cut_hz=float(f), dt_us=max(dt, 1)))
        rate = _noise_rate(c, lux, duration_s, _run_key(_NONCE_NOISE, 0x1000 + i, 0))
        pts.append((float(f), rate, duration_s))
    return NoiseSweepResult("f_cut_hz", tuple(pts))


# ---------------------------------------------------------------------------
# Rotating-chart edge detection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChartEdge:
    index: int
    contrast: float  # magnitude
    polarity: int  # +1 ON, -1 OFF
    fraction: float
    detected: bool
    n_observations: int


@dataclass(frozen=True)
class ChartDetectionResult:
    edges: tuple[ChartEdge, ...]
    noise_rate_hz_px: float
    noise_limit_hz: float
    n_rotations: int
    span_us: int

    @property
    def noise_ok(self) -> bool:
        return self.noise_rate_hz_px < self.noise_limit_hz

    def min_detected_contrast(self, polarity: int | None = None) -> float | None:
        """Smallest edge magnitude flagged detected (optionally per polarity)."""
        mags = [
            e.contrast
            for e in self.edges
            if e.detected and (polarity is None or e.polarity == polarity)
        ]
        return min(mags) if mags else None

    def to_dict(self) -> dict:
        return {
            "noise_rate_hz_px": self.noise_rate_hz_px,
            "noise_limit_hz": self.noise_limit_hz,
            "noise_ok": self.noise_ok,
            "n_rotations": self.n_rotations,
            "span_us": self.span_us,
            "edges": [
                {
                    "index": e.index,
                    "contrast": e.contrast,
                    "polarity": "ON" if e.polarity > 0 else "OFF",
                    "fraction": e.fraction,
                    "detected": e.detected,
                    "n_observations": e.n_observations,
                }
                for e in self.edges
            ],
        }

    def to_csv(self) -> str:
        rows = ["index,contrast,polarity,fraction,detected"]
        rows += [
            f"{e.index},{e.contrast!r},{1 if e.polarity > 0 else 0},{e.fraction!r},{int(e.detected)}"
            for e in self.edges
        ]
        return "\n".join(rows) + "\n"


def chart_detection(
    cfg: SensorConfig,
    chart: RotatingChart,
    duration_us: int,
    noise_limit_hz: float = 6.0,
    run_key: int = _run_key(_NONCE_CHART, 0, 0),
) -> tuple[ChartDetectionResult, np.ndarray]:
    """Detect chart edges: an edge counts as detected when at least half of the
    swept pixels emit a correct-polarity event while the wedge behind that edge
    covers them.  Returns the result and the raw measured event stream.
    """
    validate_config(cfg)
    if chart.width != cfg.width or chart.height != cfg.height:
        raise PreconditionError("chart geometry does not match the sensor dimensions")
    period = chart.period_us
    n_rot = int(duration_us / period)
    if n_rot < 1:
        raise PreconditionError("duration must cover at least one rotation")
    dt = cfg.dt_us
    span_us = int(round(n_rot * period / dt)) * dt
    settle_us = int(round(period / dt)) * dt

    sim = ArraySimulator(cfg, run_key=run_key)
    sim.reset(chart, 0)
    sim.run(chart, settle_us, collect_events=False)
    sim.rearm()
    ev = sim.run(chart, settle_us + span_us)

    phi_g, _, annulus = chart.geometry()
    active = np.ones((cfg.height, cfg.width), dtype=bool)
    if cfg.binning_enabled and cfg.force_reset:
        active[:] = False
        active[0::2, 0::2] = True

    # quiet pixels must not share a binned photocurrent with swept pixels
    if cfg.binning_enabled:
        h2, w2 = cfg.height // 2, cfg.width // 2
        ann_groups = annulus.reshape(h2, 2, w2, 2).any(axis=(1, 3))
        stimulated = np.repeat(np.repeat(ann_groups, 2, axis=0), 2, axis=1)
    else:
        stimulated = annulus
    quiet_px = active & ~stimulated

    n_wedges = chart.n_wedges
    sector = 2.0 * math.pi / n_wedges
    wedges = np.asarray(chart.wedges)
    edges: list[ChartEdge] = []

    if len(ev):
        exi = ev["x"].astype(np.int64)
        eyi = ev["y"].astype(np.int64)
        in_ann = annulus[eyi, exi]
        n_quiet_events = int(quiet_px[eyi, exi].sum())
    else:
        in_ann = np.zeros(0, dtype=bool)
        n_quiet_events = 0

    n_quiet = int(quiet_px.sum())
    noise_rate = n_quiet_events / (n_quiet * span_us * 1e-6) if n_quiet else 0.0

    n_swept = int((active & annulus).sum())
    t_meas0 = settle_us
    if len(ev):
        sel = ev[in_ann]
        xs = sel["x"].astype(np.int64)
        ys = sel["y"].astype(np.int64)
        phi_e = phi_g[ys, xs]
        t_s = sel["t"].astype(np.float64) * 1e-6
        k = chart.wedge_index(phi_e, sel["t"].astype(np.float64))
        omega = 2.0 * math.pi * chart.rotation_hz
        s_phase = omega * t_s + phi_e - k * sector
        crossing = np.floor(s_phase / (2.0 * math.pi)).astype(np.int64)
        # keep only responses to edges that crossed inside the measured span
        t_cross_us = (2.0 * math.pi * crossing + k * sector - phi_e) / omega * 1e6
        valid = (t_cross_us >= t_meas0) & (t_cross_us < t_meas0 + span_us)
        correct = (np.where(wedges[k] > 0, 1, 0) == sel["p"]) & valid
        addr = ys * cfg.width + xs
        rows = np.stack([k[correct], addr[correct], crossing[correct]], axis=1)
        uniq = np.unique(rows, axis=0)
        counts = np.bincount(uniq[:, 0], minlength=n_wedges)
    else:
        counts = np.zeros(n_wedges, dtype=np.int64)

    denom = n_swept * n_rot
    for i in range(n_wedges):
        frac = counts[i] / denom if denom else 0.0
        edges.append(
            ChartEdge(
                index=i,
                contrast=abs(float(wedges[i])),
                polarity=1 if wedges[i] > 0 else -1,
                fraction=float(frac),
                detected=bool(frac >= 0.5),
                n_observations=denom,
            )
        )
    return ChartDetectionResult(tuple(edges), noise_rate, noise_limit_hz, n_rot, span_us), ev


# ---------------------------------------------------------------------------
# Stochastic resonance probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResonanceProbe:
    contrast: float
    p_noise_on: float
    p_noise_off: float
    trials: int
    n_per_trial: int

    def to_dict(self) -> dict:
        return {
            "contrast": self.contrast,
            "p_noise_on": self.p_noise_on,
            "p_noise_off": self.p_noise_off,
            "trials": self.trials,
            "n_per_trial": self.n_per_trial,
        }


def stochastic_resonance_probe(
    cfg: SensorConfig,
    sub_threshold_contrast: float,
    trials: int = 4,
    base_lux: float = 40.0,
    polarity: int = 1,
    window_us: int = 200_000,
) -> ResonanceProbe:
    """Detection probability of a sub-threshold step with noise on vs off."""
    if trials < 1:
        raise PreconditionError("trials >= 1")
    sign = 1 if polarity > 0 else -1
    c = sign * sub_threshold_contrast
    on_ok = on_n = 0
    for trial in range(trials):
        n_ok, _, active = _step_response(
            cfg, base_lux, c, sign, window_us, _run_key(_NONCE_PROBE, 1, trial)
        )
        on_ok += n_ok
        on_n += active
    cfg_off = cfg.replace(noise_mode=NoiseMode.OFF)
    off_ok, _, off_n = _step_response(
        cfg_off, base_lux, c, sign, window_us, _run_key(_NONCE_PROBE, 2, 0)
    )
    return ResonanceProbe(
        sub_threshold_contrast, on_ok / on_n, off_ok / off_n, trials, cfg.active_pixel_count
    )


# ---------------------------------------------------------------------------
# Operating-point grid search (explicit, never hidden in an experiment)
# ---------------------------------------------------------------------------


def grid_search(
    base_cfg: SensorConfig,
    grid: dict[str, Sequence],
    evaluate: Callable[[SensorConfig], float],
    minimize: bool = True,
) -> list[tuple[SensorConfig, float]]:
    """Evaluate every combination of config overrides; returns (cfg, score) sorted best-first."""
    names = list(grid)
    combos: list[dict] = [{}]
    for name in names:
        combos = [dict(c, **{name: v}) for c in combos for v in grid[name]]
    scored = []
    for overrides in combos:
        cfg = validate_config(base_cfg.replace(**overrides))
        scored.append((cfg, float(evaluate(cfg))))
    return sorted(scored, key=lambda cs: cs[1] if minimize else -cs[1])
