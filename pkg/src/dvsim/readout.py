"""Event stream representation, serialization, accumulation frames, APS snapshot.

Streams are numpy structured arrays sorted by (t, y, x).  The binary wire
format is little-endian packed records (u64 t_us, u16 x, u16 y, u8 polarity;
13 bytes) preceded by a 16-byte header: magic "SDVS", u16 version=1,
u16 width, u16 height, 6 reserved zero bytes.  CSV rows are ``t_us,x,y,p``
with p in {1, 0} (1 = ON).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import APS_KEY, SensorConfig
from .rng import stream_key
from .stimulus import Scene, photoelectron_rate, write_pgm

__all__ = [
    "EVENT_DTYPE",
    "AccumulationFrame",
    "ApsFrame",
    "FormatError",
    "accumulate",
    "accumulation_to_pgm",
    "aps_to_pgm",
    "capture_aps",
    "deserialize_events",
    "empty_events",
    "load_events",
    "make_events",
    "save_events",
    "serialize_events",
]

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
assert EVENT_DTYPE.itemsize == 13

MAGIC = b"SDVS"
VERSION = 1
_HEADER = struct.Struct("<4sHHH6s")
assert _HEADER.size == 16


class FormatError(ValueError):
    pass


def empty_events() -> np.ndarray:
    return np.empty(0, dtype=EVENT_DTYPE)


def make_events(t, x, y, p) -> np.ndarray:
    out = np.empty(len(t), dtype=EVENT_DTYPE)
    out["t"] = t
    out["x"] = x
    out["y"] = y
    out["p"] = p
    return out


def serialize_events(stream: np.ndarray, fmt: str, width: int = 0, height: int = 0) -> bytes:
    """Encode a sorted stream; round-trips exactly through deserialize_events."""
    if fmt == "binary":
        header = _HEADER.pack(MAGIC, VERSION, width, height, b"\0" * 6)
        return header + np.ascontiguousarray(stream, dtype=EVENT_DTYPE).tobytes()
    if fmt == "csv":
        lines = [f"{e['t']},{e['x']},{e['y']},{e['p']}" for e in stream]
        return ("\n".join(lines) + "\n").encode("ascii") if lines else b""
    raise FormatError(f"unknown format {fmt!r}")


def deserialize_events(data: bytes, fmt: str) -> np.ndarray:
    if fmt == "binary":
        if len(data) < _HEADER.size:
            raise FormatError("truncated header")
        magic, version, _w, _h, _rsvd = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        body = len(data) - _HEADER.size
        if body % EVENT_DTYPE.itemsize:
            raise FormatError("truncated record")
        return np.frombuffer(data, dtype=EVENT_DTYPE, offset=_HEADER.size).copy()
    if fmt == "csv":
        text = data.decode("ascii")
        rows = [line for line in text.splitlines() if line.strip()]
        out = np.empty(len(rows), dtype=EVENT_DTYPE)
        for i, line in enumerate(rows):
            parts = line.split(",")
            if len(parts) != 4:
                raise FormatError(f"line {i + 1}: expected 4 fields, got {len(parts)}")
            out[i] = (int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3]))
        return out
    raise FormatError(f"unknown format {fmt!r}")


def decode_header(data: bytes) -> tuple[int, int]:
    """(width, height) from a binary stream's header."""
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, w, h, _ = _HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise FormatError("not a dvsim binary event file")
    return w, h


def save_events(path, stream: np.ndarray, fmt: str, width: int = 0, height: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_events(stream, fmt, width, height))


def load_events(path, fmt: str | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if fmt is None:
        fmt = "binary" if data[:4] == MAGIC else "csv"
    return deserialize_events(data, fmt)


# ---------------------------------------------------------------------------
# Accumulation frames
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AccumulationFrame:
    """Per-pixel event counts over a window (ON and OFF planes plus ON - OFF)."""

    on: np.ndarray
    off: np.ndarray
    t0_us: int
    window_us: int

    @property
    def signed(self) -> np.ndarray:
        return self.on.astype(np.int64) - self.off.astype(np.int64)


def accumulate(stream: np.ndarray, t0_us: int, window_us: int, width: int, height: int) -> AccumulationFrame:
    """Count events with t0 <= t < t0 + window into ON/OFF planes."""
    if window_us <= 0:
        raise ValueError("window_us must be > 0")
    on = np.zeros((height, width), dtype=np.int64)
    off = np.zeros((height, width), dtype=np.int64)
    if len(stream):
        sel = stream[(stream["t"] >= t0_us) & (stream["t"] < t0_us + window_us)]
        ons = sel[sel["p"] == 1]
        offs = sel[sel["p"] == 0]
        np.add.at(on, (ons["y"].astype(np.int64), ons["x"].astype(np.int64)), 1)
        np.add.at(off, (offs["y"].astype(np.int64), offs["x"].astype(np.int64)), 1)
    return AccumulationFrame(on, off, t0_us, window_us)


def accumulation_to_pgm(frame: AccumulationFrame, path) -> None:
    """Export the signed plane shifted to midpoint 128 for inspection."""
    write_pgm(path, 128 + frame.signed, maxval=255)


# ---------------------------------------------------------------------------
# Behavioral APS snapshot (global shutter, 9-bit, never interleaved with events)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ApsFrame:
    values: np.ndarray  # 9-bit integers in [0, 511]
    exposure_us: int


def capture_aps(
    scene: Scene,
    t_us: int,
    exposure_us: int,
    cfg: SensorConfig,
    gen: np.random.Generator | None = None,
) -> ApsFrame:
    """Idealized integrating snapshot: Poisson photoelectrons, full-well clip, 9-bit quantization."""
    if exposure_us <= 0:
        raise ValueError("exposure_us must be > 0")
    if gen is None:
        gen = np.random.default_rng(stream_key(cfg.seed, 0, 0, APS_KEY + t_us))
    ys, xs = np.mgrid[0 : cfg.height, 0 : cfg.width]
    lux = scene.field(t_us, xs, ys)
    lam = photoelectron_rate(1.0, cfg, False) * lux * (exposure_us / 1e6)
    n_e = gen.poisson(lam).astype(np.float64)
    dn = np.rint(np.minimum(n_e / cfg.aps_fullwell_e, 1.0) * 511.0)
    return ApsFrame(dn.astype(np.uint16), exposure_us)


def aps_to_pgm(frame: ApsFrame, path) -> None:
    write_pgm(path, frame.values, maxval=511)
