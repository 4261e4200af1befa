"""Sensor operating-point configuration, validation, and per-pixel mismatch maps.

The configuration is behavioral: thresholds are expressed in natural-log
intensity units at the change-detector input, bandwidth as the low-pass buffer
cutoff in Hz.  Nothing here is an electrical bias.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import rng

__all__ = [
    "ConfigError",
    "MismatchMap",
    "NoiseMode",
    "SensorConfig",
    "build_mismatch_map",
    "parse_config_file",
    "parse_config_text",
    "validate_config",
]

# run-key domain separators for auxiliary deterministic draws
MISMATCH_ON_KEY = 0x6D49534D4F4E      # "MISMON"
MISMATCH_OFF_KEY = 0x6D49534D4F46     # "MISMOF"
APS_KEY = 0x415053                    # "APS"


class ConfigError(ValueError):
    """Invalid configuration; carries the full list of violations."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


class NoiseMode(str, enum.Enum):
    POISSON_PLUS_BUFFER = "poisson_plus_buffer"
    ANALYTIC_GAUSSIAN = "analytic_gaussian"
    OFF = "off"


@dataclass(frozen=True)
class SensorConfig:
    """All operating-point parameters of the simulated array.

    Thresholds ``theta_on``/``theta_off`` are positive displacements at the
    change-detector input; with the preamp enabled the equivalent contrast
    threshold is exp(theta/preamp_gain) - 1.
    """

    width: int = 64
    height: int = 64
    pixel_pitch_um: float = 30.0
    qe: float = 0.5
    theta_on: float = 0.119
    theta_off: float = 0.119
    preamp_enabled: bool = True
    preamp_gain: float = 7.0
    preamp_sat: float = 3.45
    auto_center_enabled: bool = True
    f_cut_hz: float = 18.0
    refractory_us: int = 1000
    binning_enabled: bool = False
    force_reset: bool = False
    mismatch_sigma: float = 0.0
    noise_mode: NoiseMode = NoiseMode.POISSON_PLUS_BUFFER
    noise_floor_factor: float = 2.0
    aps_fullwell_e: float = 100_000.0
    dt_us: int = 100
    seed: int = 0

    @property
    def dt_s(self) -> float:
        return self.dt_us / 1e6

    @property
    def tau_s(self) -> float:
        """Equivalent integration time of the low-pass buffer."""
        return 1.0 / (2.0 * math.pi * self.f_cut_hz)

    @property
    def lowpass_alpha(self) -> float:
        """Exact first-order IIR coefficient for the configured step."""
        return 1.0 - math.exp(-2.0 * math.pi * self.f_cut_hz * self.dt_s)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @property
    def active_pixel_count(self) -> int:
        """Pixels with a live event generator (masters only under force_reset)."""
        if self.binning_enabled and self.force_reset:
            return (self.width // 2) * (self.height // 2)
        return self.n_pixels

    def replace(self, **kw) -> "SensorConfig":
        return replace(self, **kw)


def validate_config(cfg: SensorConfig) -> SensorConfig:
    """Return cfg if every invariant holds, else raise ConfigError listing all violations."""
    errors: list[str] = []
    if cfg.width <= 0 or cfg.height <= 0:
        errors.append(f"dimensions must be positive, got {cfg.width}x{cfg.height}")
    if cfg.binning_enabled and (cfg.width % 2 or cfg.height % 2):
        errors.append(f"odd dimension {cfg.width}x{cfg.height} with binning enabled (2x2 groups must tile)")
    if cfg.force_reset and not cfg.binning_enabled:
        errors.append("force_reset requires binning_enabled")
    if cfg.pixel_pitch_um <= 0:
        errors.append("pixel_pitch_um must be > 0")
    if not (0.0 < cfg.qe <= 1.0):
        errors.append(f"qe must be in (0, 1], got {cfg.qe}")
    if cfg.theta_on <= 0:
        errors.append(f"theta_on must be > 0, got {cfg.theta_on}")
    if cfg.theta_off <= 0:
        errors.append(f"theta_off must be > 0, got {cfg.theta_off}")
    if cfg.preamp_gain < 1.0:
        errors.append(f"preamp_gain must be >= 1, got {cfg.preamp_gain}")
    if cfg.preamp_sat <= 0:
        errors.append("preamp_sat must be > 0")
    if cfg.f_cut_hz <= 0:
        errors.append("f_cut_hz must be > 0")
    else:
        budget = 1e6 / (20.0 * cfg.f_cut_hz)
        if cfg.dt_us > budget:
            errors.append(
                f"dt_us={cfg.dt_us} too coarse for f_cut={cfg.f_cut_hz} Hz (limit {budget:.0f} us)"
            )
    if cfg.refractory_us < 0:
        errors.append("refractory_us must be >= 0")
    if cfg.mismatch_sigma < 0:
        errors.append("mismatch_sigma must be >= 0")
    if cfg.noise_floor_factor <= 0:
        errors.append("noise_floor_factor must be > 0")
    if cfg.aps_fullwell_e <= 0:
        errors.append("aps_fullwell_e must be > 0")
    if cfg.dt_us <= 0:
        errors.append("dt_us must be > 0")
    if errors:
        raise ConfigError(errors)
    return cfg


# ---------------------------------------------------------------------------
# Mismatch maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MismatchMap:
    """Per-pixel multiplicative threshold factors (log-normal, strictly positive)."""

    factor_on: np.ndarray
    factor_off: np.ndarray


def build_mismatch_map(cfg: SensorConfig) -> MismatchMap:
    """Deterministic per-pixel threshold factors for (seed, dims, mismatch_sigma).

    sigma = 0 yields exact ones; otherwise factors are exp(N(0, sigma)) drawn
    from pixel-keyed streams, so the map is independent of evaluation order.
    """
    shape = (cfg.height, cfg.width)
    if cfg.mismatch_sigma == 0.0:
        ones = np.ones(shape)
        return MismatchMap(ones, ones.copy())
    f_on = np.exp(
        cfg.mismatch_sigma
        * rng.grid_normal(rng.grid_keys(cfg.seed, cfg.width, cfg.height, MISMATCH_ON_KEY), 1)[..., 0]
    )
    f_off = np.exp(
        cfg.mismatch_sigma
        * rng.grid_normal(rng.grid_keys(cfg.seed, cfg.width, cfg.height, MISMATCH_OFF_KEY), 1)[..., 0]
    )
    return MismatchMap(f_on, f_off)


# ---------------------------------------------------------------------------
# Config file parsing: flat "key = value" lines, '#' comments.
# ---------------------------------------------------------------------------

_BOOL_TRUE = {"true", "1", "yes", "on"}
_BOOL_FALSE = {"false", "0", "no", "off"}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in _BOOL_TRUE:
        return True
    if low in _BOOL_FALSE:
        return False
    raise ConfigError([f"{key}: expected a boolean, got {raw!r}"])


def parse_kv_lines(text: str) -> dict[str, str]:
    """Parse flat key = value lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError([f"line {lineno}: expected 'key = value', got {line.strip()!r}"])
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def config_from_mapping(pairs: dict[str, str], base: SensorConfig | None = None) -> SensorConfig:
    """Build a validated SensorConfig from string key/value pairs.

    Unknown keys are an error; known keys override ``base`` (or the defaults).
    """
    base = base or SensorConfig()
    by_name = {f.name: f for f in fields(SensorConfig)}
    unknown = sorted(set(pairs) - set(by_name))
    if unknown:
        raise ConfigError([f"unknown config key: {k}" for k in unknown])
    kw = {}
    errors: list[str] = []
    for key, raw in pairs.items():
        f = by_name[key]
        try:
            if f.type in ("int", int):
                kw[key] = int(raw)
            elif f.type in ("float", float):
                kw[key] = float(raw)
            elif f.type in ("bool", bool):
                kw[key] = _parse_bool(raw, key)
            elif key == "noise_mode":
                kw[key] = NoiseMode(raw)
            else:
                kw[key] = raw
        except ConfigError as exc:
            errors.extend(exc.errors)
        except ValueError:
            errors.append(f"{key}: cannot parse {raw!r}")
    if errors:
        raise ConfigError(errors)
    return validate_config(base.replace(**kw))


def parse_config_text(text: str, base: SensorConfig | None = None) -> SensorConfig:
    return config_from_mapping(parse_kv_lines(text), base)


def parse_config_file(path, base: SensorConfig | None = None) -> SensorConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def config_to_text(cfg: SensorConfig) -> str:
    """Serialize a config as the flat key = value format (round-trips exactly)."""
    lines = []
    for f in fields(SensorConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, NoiseMode):
            v = v.value
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
