"""Counter-based per-pixel random streams.

Every pixel owns an independent stream keyed by (seed, x, y, run_key), so a
simulation is a pure function of its configuration no matter how the array is
partitioned across workers.  The generator is splitmix64: the k-th output of a
stream is a pure function of (key, k), which lets the vectorized helpers below
reproduce the scalar stream exactly.

The scalar path deliberately uses Python's ``math`` module (and the compiled
kernel uses ``libc.math``) so that both backends evaluate the identical libm
functions on identical doubles.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15

# stream-key domain separation constants (odd multipliers)
_KX = 0xA24BAED4963EE407
_KY = 0x9FB21C651E98DF25
_KR = 0xD1B54A32D192ED03

# uniform doubles in (0, 1): (u53 + 0.5) * 2**-53
_INV_2_53 = 1.0 / 9007199254740992.0
_TWO_PI = 6.283185307179586

# Poisson sampler branch points; above the top one a rounded Gaussian is used.
POISSON_PTRS_MIN = 10.0
POISSON_GAUSS_MIN = 1000.0


def mix64(z: int) -> int:
    """splitmix64 output mix (avalanching bijection on 64-bit ints)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, x: int, y: int, run_key: int = 0) -> int:
    """Derive the 64-bit stream key for pixel (x, y) under a run nonce."""
    if not (0 <= x < 65536 and 0 <= y < 65536):
        raise ValueError(f"pixel coordinate out of range: ({x}, {y})")
    k = mix64((seed + GOLDEN) & MASK64)
    k = mix64(k ^ ((x * _KX) & MASK64))
    k = mix64(k ^ ((y * _KY) & MASK64))
    return mix64(k ^ ((run_key * _KR) & MASK64))


class PixelStream:
    """Scalar deterministic stream for one pixel.

    The n-th raw draw is mix64(key + (n+1)*GOLDEN); uniform/normal/poisson are
    built on top of that counter, consuming a data-dependent number of draws.
    """

    __slots__ = ("state",)

    def __init__(self, key: int):
        self.state = key & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def uniform(self) -> float:
        """Uniform double in the open interval (0, 1)."""
        return ((self.next_u64() >> 11) + 0.5) * _INV_2_53

    def normal(self) -> float:
        """Standard normal via Box-Muller (cosine half)."""
        u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)

    def poisson(self, lam: float) -> int:
        """Poisson sample; exact below POISSON_GAUSS_MIN, rounded Gaussian above."""
        if lam <= 0.0:
            return 0
        if lam < POISSON_PTRS_MIN:
            # Knuth product-of-uniforms
            limit = math.exp(-lam)
            k = 0
            p = 1.0
            while True:
                k += 1
                p *= self.uniform()
                if p <= limit:
                    break
            return k - 1
        if lam <= POISSON_GAUSS_MIN:
            return self._poisson_ptrs(lam)
        d = math.floor(lam + math.sqrt(lam) * self.normal() + 0.5)
        return int(d) if d > 0.0 else 0

    def _poisson_ptrs(self, lam: float) -> int:
        # Hormann's transformed rejection with squeeze, valid for lam >= 10
        slam = math.sqrt(lam)
        loglam = math.log(lam)
        b = 0.931 + 2.53 * slam
        a = -0.059 + 0.02483 * b
        invalpha = 1.1239 + 1.1328 / (b - 3.4)
        vr = 0.9277 - 3.6224 / (b - 2.0)
        while True:
            u = self.uniform() - 0.5
            v = self.uniform()
            us = 0.5 - abs(u)
            k = math.floor((2.0 * a / us + b) * u + lam + 0.43)
            if us >= 0.07 and v <= vr:
                return int(k)
            if k < 0.0 or (us < 0.013 and v > us):
                continue
            if math.log(v * invalpha / (a / (us * us) + b)) <= k * loglam - lam - math.lgamma(k + 1.0):
                return int(k)


def pixel_stream(seed: int, x: int, y: int, run_key: int = 0) -> PixelStream:
    return PixelStream(stream_key(seed, x, y, run_key))


# ---------------------------------------------------------------------------
# Vectorized counterparts (used for mismatch maps and array initialisation).
# They reproduce the scalar draws exactly at the u64 level.
# ---------------------------------------------------------------------------


def _np_mix64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
    return z


def grid_keys(seed: int, width: int, height: int, run_key: int = 0) -> np.ndarray:
    """(height, width) array of stream keys, identical to stream_key per pixel."""
    xs = np.arange(width, dtype=np.uint64)
    ys = np.arange(height, dtype=np.uint64)
    with np.errstate(over="ignore"):
        k0 = np.uint64(mix64((seed + GOLDEN) & MASK64))
        kx = _np_mix64(k0 ^ (xs * np.uint64(_KX)))
        kxy = _np_mix64(kx[None, :] ^ (ys[:, None] * np.uint64(_KY)))
        keys = _np_mix64(kxy ^ np.uint64((run_key * _KR) & MASK64))
    return keys


def grid_draws_u64(keys: np.ndarray, n: int) -> np.ndarray:
    """First n raw u64 draws of each keyed stream, shape keys.shape + (n,)."""
    ks = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        states = keys[..., None] + ks * np.uint64(GOLDEN)
    return _np_mix64(states)


def grid_uniform(keys: np.ndarray, n: int) -> np.ndarray:
    return ((grid_draws_u64(keys, n) >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53


def grid_normal(keys: np.ndarray, n: int) -> np.ndarray:
    """First n Box-Muller normals per stream (cosine half, like PixelStream)."""
    u = grid_uniform(keys, 2 * n)
    u1 = u[..., 0::2]
    u2 = u[..., 1::2]
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)
