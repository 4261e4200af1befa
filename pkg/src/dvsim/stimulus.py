"""Time-varying illuminance fields used as test stimuli.

Contrast convention is multiplicative: a step of contrast C takes the
illuminance from I to I*(1+C), so the log-domain change is exactly ln(1+C).
Scenes are pure functions of (x, y, t) and therefore trivially parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import SensorConfig

__all__ = [
    "Constant",
    "MovingPattern",
    "RegionAttenuation",
    "RotatingChart",
    "SceneError",
    "StepProtocol",
    "build_chart_wedges",
    "illuminance_at",
    "load_pgm",
    "photoelectron_rate",
    "write_pgm",
]

# visible-photon flux per lux per second per um^2 (Rose's conversion)
PHOTONS_PER_LUX_S_UM2 = 1.0e4


class SceneError(ValueError):
    pass


def photoelectron_rate(lux: float, cfg: SensorConfig, binned: bool) -> float:
    """Photoelectron rate in e-/s collected by one pixel (or a 2x2 bin).

    rate = L * 1e4 ph/lux/s/um^2 * QE * pitch^2, times 4 when the photodiodes
    of a 2x2 group are shorted together.
    """
    if lux < 0:
        raise SceneError(f"illuminance must be >= 0, got {lux}")
    rate = lux * PHOTONS_PER_LUX_S_UM2 * cfg.qe * cfg.pixel_pitch_um**2
    return rate * 4.0 if binned else rate


@dataclass(frozen=True)
class RegionAttenuation:
    """Multiplies illuminance by ``factor`` inside [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int
    factor: float

    def __post_init__(self):
        if not (0.0 < self.factor <= 1.0):
            raise SceneError(f"attenuation factor must be in (0, 1], got {self.factor}")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise SceneError("attenuation rectangle is empty")


def _check_contrast(c: float, name: str) -> None:
    if not (-1.0 < c < 1.0):
        raise SceneError(f"{name} must be in (-1, 1), got {c}")


class Scene:
    """Base class: subclasses implement _field(t_us, xs, ys) -> lux array."""

    atten: tuple[RegionAttenuation, ...] = ()

    def field(self, t_us: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        out = self._field(t_us, xs, ys)
        for a in self.atten:
            box = (xs >= a.x0) & (xs < a.x1) & (ys >= a.y0) & (ys < a.y1)
            out = np.where(box, out * a.factor, out)
        return out

    def change_times(self, t0_us: int, t1_us: int):
        """Sorted times in (t0, t1) where the field changes; None = every step."""
        return None

    def _field(self, t_us, xs, ys):  # pragma: no cover - abstract
        raise NotImplementedError


def illuminance_at(scene: Scene, x: int, y: int, t_us: int) -> float:
    """Chip illuminance in lux seen by pixel (x, y) at time t."""
    return float(scene.field(t_us, np.asarray([[x]]), np.asarray([[y]]))[0, 0])


@dataclass(frozen=True)
class Constant(Scene):
    lux: float
    atten: tuple[RegionAttenuation, ...] = ()

    def __post_init__(self):
        if self.lux < 0:
            raise SceneError("lux must be >= 0")

    def _field(self, t_us, xs, ys):
        return np.full(np.broadcast(xs, ys).shape, self.lux, dtype=np.float64)

    def change_times(self, t0_us, t1_us):
        return []


@dataclass(frozen=True)
class StepProtocol(Scene):
    """Reset pulse followed by a test step of signed contrast C.

    Timeline: base until t_reset; base*(1+reset_contrast) during the pulse
    [t_reset, t_mid); base again during the settle [t_mid, t_test); then
    base*(1+C) from t_test on, where t_mid is halfway between reset and test.
    """

    base_lux: float
    test_contrast: float
    reset_contrast: float = 0.60
    t_reset_us: int = 50_000
    t_test_us: int = 250_000
    t_window_us: int = 200_000
    atten: tuple[RegionAttenuation, ...] = ()

    def __post_init__(self):
        if self.base_lux < 0:
            raise SceneError("base_lux must be >= 0")
        _check_contrast(self.test_contrast, "test_contrast")
        _check_contrast(self.reset_contrast, "reset_contrast")
        if not (0 <= self.t_reset_us < self.t_test_us):
            raise SceneError("need 0 <= t_reset_us < t_test_us")
        if self.t_window_us <= 0:
            raise SceneError("t_window_us must be > 0")

    @property
    def t_mid_us(self) -> int:
        return (self.t_reset_us + self.t_test_us) // 2

    def level(self, t_us: int) -> float:
        if t_us < self.t_reset_us:
            return self.base_lux
        if t_us < self.t_mid_us:
            return self.base_lux * (1.0 + self.reset_contrast)
        if t_us < self.t_test_us:
            return self.base_lux
        return self.base_lux * (1.0 + self.test_contrast)

    def _field(self, t_us, xs, ys):
        return np.full(np.broadcast(xs, ys).shape, self.level(t_us), dtype=np.float64)

    def change_times(self, t0_us, t1_us):
        return [t for t in (self.t_reset_us, self.t_mid_us, self.t_test_us) if t0_us < t < t1_us]


def build_chart_wedges(test_contrasts, reset_contrast: float = 0.20) -> tuple[float, ...]:
    """Wedge sequence for a rotating test chart.

    Each test edge is preceded by a reset edge of opposite polarity and
    followed by a closing edge returning to the background level, so the
    level multipliers close exactly over a full revolution.
    """
    wedges: list[float] = []
    for c in test_contrasts:
        _check_contrast(c, "test contrast")
        if c == 0.0:
            raise SceneError("test contrast must be nonzero")
        reset = -reset_contrast if c > 0 else reset_contrast
        closing = 1.0 / ((1.0 + reset) * (1.0 + c)) - 1.0
        wedges.extend((reset, c, closing))
    return tuple(wedges)


# geometry grids keyed by (width, height, r_inner_frac, r_outer_frac)
_GEOM_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _chart_geometry(width: int, height: int, r_in: float, r_out: float):
    key = (width, height, r_in, r_out)
    hit = _GEOM_CACHE.get(key)
    if hit is None:
        cx = (width - 1) / 2.0
        cy = (height - 1) / 2.0
        dx = np.arange(width) - cx
        dy = np.arange(height) - cy
        r = np.hypot(dx[None, :], dy[:, None])
        phi = np.mod(np.arctan2(dy[:, None], dx[None, :]), 2.0 * math.pi)
        r_ref = min(width, height)
        annulus = (r >= r_in * r_ref) & (r <= r_out * r_ref)
        hit = _GEOM_CACHE[key] = (phi, r, annulus)
    return hit


@dataclass(frozen=True)
class RotatingChart(Scene):
    """Angular wedges around the image center, rotating at rotation_hz.

    wedges[k] is the signed contrast of the edge a pixel sees when wedge k
    sweeps onto it; the wedge then holds that level until the next edge.  The
    cumulative level multipliers must return to 1 over a full turn.  The chart
    is laid out for a specific sensor size (width, height).
    """

    base_lux: float
    wedges: tuple[float, ...]
    width: int = 64
    height: int = 64
    reset_edge_contrast: float = 0.20
    rotation_hz: float = 5.0
    r_inner_frac: float = 0.15
    r_outer_frac: float = 0.45
    atten: tuple[RegionAttenuation, ...] = ()

    def __post_init__(self):
        if self.base_lux < 0:
            raise SceneError("base_lux must be >= 0")
        if len(self.wedges) < 2:
            raise SceneError("need at least two wedges")
        for c in self.wedges:
            _check_contrast(c, "wedge contrast")
        if self.rotation_hz <= 0:
            raise SceneError("rotation_hz must be > 0")
        if not any(abs(c) >= self.reset_edge_contrast - 1e-12 for c in self.wedges):
            raise SceneError("chart has no reset edge at or above reset_edge_contrast")
        prod = 1.0
        for c in self.wedges:
            prod *= 1.0 + c
        if abs(prod - 1.0) > 1e-9:
            raise SceneError(f"wedge multipliers do not close (product {prod:.6g} != 1)")

    @property
    def n_wedges(self) -> int:
        return len(self.wedges)

    @property
    def multipliers(self) -> np.ndarray:
        return np.cumprod(1.0 + np.asarray(self.wedges))

    @property
    def period_us(self) -> float:
        return 1e6 / self.rotation_hz

    def geometry(self):
        """(phi, r, annulus) grids for the chart's sensor size."""
        return _chart_geometry(self.width, self.height, self.r_inner_frac, self.r_outer_frac)

    def wedge_index(self, phi, t_us):
        """Index of the wedge covering chart angle(s) phi at time t.

        The rotation sign is chosen so pixels traverse wedges in increasing
        index order: the edge seen on entering wedge k has contrast wedges[k].
        """
        n = self.n_wedges
        sector = 2.0 * math.pi / n
        angle = np.mod(phi + 2.0 * math.pi * self.rotation_hz * (np.asarray(t_us, dtype=np.float64) * 1e-6), 2.0 * math.pi)
        return np.minimum((angle / sector).astype(np.int64), n - 1)

    def _field(self, t_us, xs, ys):
        phi_g, _, ann_g = self.geometry()
        phi = phi_g[ys, xs]
        ann = ann_g[ys, xs]
        mult = self.multipliers[self.wedge_index(phi, t_us)]
        return self.base_lux * np.where(ann, mult, 1.0)


@dataclass(frozen=True)
class MovingPattern(Scene):
    """Binary mask translating at constant velocity; the mask tiles the plane."""

    base_lux: float
    mask: np.ndarray = field(compare=False)
    velocity_x_px_s: float = 0.0
    velocity_y_px_s: float = 0.0
    pattern_contrast: float = 0.5
    atten: tuple[RegionAttenuation, ...] = ()

    def __post_init__(self):
        if self.base_lux < 0:
            raise SceneError("base_lux must be >= 0")
        _check_contrast(self.pattern_contrast, "pattern_contrast")
        if self.mask.ndim != 2:
            raise SceneError("mask must be 2-D")

    def _field(self, t_us, xs, ys):
        t_s = np.asarray(t_us, dtype=np.float64) * 1e-6
        mh, mw = self.mask.shape
        mx = np.floor(xs - self.velocity_x_px_s * t_s).astype(np.int64) % mw
        my = np.floor(ys - self.velocity_y_px_s * t_s).astype(np.int64) % mh
        on = self.mask[my, mx] > 0
        return self.base_lux * np.where(on, 1.0 + self.pattern_contrast, 1.0)


# ---------------------------------------------------------------------------
# PGM helpers (plain P2 and binary P5)
# ---------------------------------------------------------------------------


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P2", b"P5"):
        raise SceneError(f"{path}: not a PGM file")
    binary = data[:2] == b"P5"
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(data):
            raise SceneError(f"{path}: truncated PGM header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            pos = data.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    width, height, maxval = (int(t) for t in tokens)
    if binary:
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        arr = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    else:
        arr = np.array(data[pos:].split(), dtype=np.int64)
        if arr.size != width * height:
            raise SceneError(f"{path}: expected {width * height} samples, got {arr.size}")
    return arr.reshape(height, width).astype(np.int64)


def write_pgm(path, values: np.ndarray, maxval: int = 255) -> None:
    """Write a plain (P2) PGM; values are clipped to [0, maxval]."""
    v = np.clip(np.asarray(values), 0, maxval).astype(np.int64)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P2\n{v.shape[1]} {v.shape[0]}\n{maxval}\n")
        for row in v:
            fh.write(" ".join(str(int(x)) for x in row) + "\n")


# ---------------------------------------------------------------------------
# Scene files: same flat "key = value" syntax as sensor configs, keys
# prefixed with "scene."
# ---------------------------------------------------------------------------


def _pop_float(pairs: dict, key: str, default=None):
    if key in pairs:
        return float(pairs.pop(key))
    return default


def _require(value, key: str):
    if value is None:
        raise SceneError(f"missing {key}")
    return value


def _pop_int(pairs: dict, key: str, default=None):
    if key in pairs:
        return int(pairs.pop(key))
    return default


def scene_from_mapping(pairs: dict[str, str], cfg: SensorConfig, base_dir=".") -> Scene:
    """Build a scene from "scene.*" key/value strings; unknown keys are errors."""
    import os

    pairs = dict(pairs)
    stype = pairs.pop("scene.type", None)
    if stype is None:
        raise SceneError("missing scene.type")

    atten: tuple[RegionAttenuation, ...] = ()
    rect = pairs.pop("scene.atten_rect", None)
    factor = pairs.pop("scene.atten_factor", None)
    if (rect is None) != (factor is None):
        raise SceneError("scene.atten_rect and scene.atten_factor must be given together")
    if rect is not None:
        parts = rect.split()
        if len(parts) != 4:
            raise SceneError("scene.atten_rect expects 'x0 y0 x1 y1'")
        x0, y0, x1, y1 = (int(p) for p in parts)
        atten = (RegionAttenuation(x0, y0, x1, y1, float(factor)),)

    if stype == "constant":
        scene = Constant(_require(_pop_float(pairs, "scene.lux"), "scene.lux"), atten=atten)
    elif stype == "step":
        kw = {}
        for name, pop in (
            ("reset_contrast", _pop_float),
            ("t_reset_us", _pop_int),
            ("t_test_us", _pop_int),
            ("t_window_us", _pop_int),
        ):
            v = pop(pairs, f"scene.{name}")
            if v is not None:
                kw[name] = v
        scene = StepProtocol(
            _require(_pop_float(pairs, "scene.base_lux"), "scene.base_lux"),
            _require(_pop_float(pairs, "scene.test_contrast"), "scene.test_contrast"),
            atten=atten,
            **kw,
        )
    elif stype == "rotating_chart":
        if "scene.wedges" in pairs:
            wedges = tuple(float(w) for w in pairs.pop("scene.wedges").split())
        elif "scene.test_contrasts" in pairs:
            tests = [float(w) for w in pairs.pop("scene.test_contrasts").split()]
            wedges = build_chart_wedges(
                tests, float(pairs.get("scene.reset_edge_contrast", 0.20))
            )
        else:
            raise SceneError("rotating_chart needs scene.wedges or scene.test_contrasts")
        kw = {}
        for name in ("reset_edge_contrast", "rotation_hz", "r_inner_frac", "r_outer_frac"):
            v = _pop_float(pairs, f"scene.{name}")
            if v is not None:
                kw[name] = v
        scene = RotatingChart(
            _require(_pop_float(pairs, "scene.base_lux"), "scene.base_lux"),
            wedges,
            width=cfg.width,
            height=cfg.height,
            atten=atten,
            **kw,
        )
    elif stype == "moving_pattern":
        mask_path = pairs.pop("scene.mask", None)
        if mask_path is None:
            raise SceneError("moving_pattern needs scene.mask (a PGM path)")
        mask = load_pgm(os.path.join(base_dir, mask_path))
        scene = MovingPattern(
            _require(_pop_float(pairs, "scene.base_lux"), "scene.base_lux"),
            mask,
            velocity_x_px_s=_pop_float(pairs, "scene.velocity_x_px_s", 0.0),
            velocity_y_px_s=_pop_float(pairs, "scene.velocity_y_px_s", 0.0),
            pattern_contrast=_pop_float(pairs, "scene.pattern_contrast", 0.5),
            atten=atten,
        )
    else:
        raise SceneError(f"unknown scene.type {stype!r}")
    if pairs:
        raise SceneError("unknown scene keys: " + ", ".join(sorted(pairs)))
    return scene


def parse_scene_file(path, cfg: SensorConfig) -> Scene:
    import os

    from .config import parse_kv_lines

    with open(path, "r", encoding="utf-8") as fh:
        pairs = parse_kv_lines(fh.read())
    return scene_from_mapping(pairs, cfg, base_dir=os.path.dirname(os.path.abspath(path)))
