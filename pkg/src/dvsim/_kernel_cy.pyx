# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled array-stepping kernel (hot loop).

Must remain operation-for-operation identical to ``_kernel_py.run_steps``:
same expressions, same evaluation order, same libm calls.  Compiled with
-ffp-contract=off so mul/add never fuse into FMA.
"""

from libc.stdint cimport int64_t, uint8_t, uint16_t, uint64_t
from libc.math cimport cos, exp, fabs, floor, lgamma, log, sqrt


cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef double INV_2_53 = 1.0 / 9007199254740992.0
cdef double TWO_PI = 6.283185307179586

# noise_mode codes (match _kernel_py): 0 = off, 1 = poisson_plus_buffer, 2 = analytic
cdef enum:
    MODE_OFF = 0
    MODE_POISSON = 1
    MODE_ANALYTIC = 2


cdef inline uint64_t _mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline uint64_t _next(uint64_t* s) nogil:
    s[0] = s[0] + GOLDEN
    return _mix64(s[0])


cdef inline double _uniform(uint64_t* s) nogil:
    return (<double>(_next(s) >> 11) + 0.5) * INV_2_53


cdef inline double _normal(uint64_t* s) nogil:
    cdef double u1 = _uniform(s)
    cdef double u2 = _uniform(s)
    return sqrt(-2.0 * log(u1)) * cos(TWO_PI * u2)


cdef double _poisson(double lam, uint64_t* s) nogil:
    cdef double limit, p, d
    cdef double slam, loglam, b, a, invalpha, vr, u, v, us, k
    cdef long n
    if lam <= 0.0:
        return 0.0
    if lam < 10.0:
        limit = exp(-lam)
        n = 0
        p = 1.0
        while True:
            n += 1
            p *= _uniform(s)
            if p <= limit:
                break
        return <double>(n - 1)
    if lam <= 1000.0:
        # Hormann's transformed rejection with squeeze
        slam = sqrt(lam)
        loglam = log(lam)
        b = 0.931 + 2.53 * slam
        a = -0.059 + 0.02483 * b
        invalpha = 1.1239 + 1.1328 / (b - 3.4)
        vr = 0.9277 - 3.6224 / (b - 2.0)
        while True:
            u = _uniform(s) - 0.5
            v = _uniform(s)
            us = 0.5 - fabs(u)
            k = floor((2.0 * a / us + b) * u + lam + 0.43)
            if us >= 0.07 and v <= vr:
                return k
            if k < 0.0 or (us < 0.013 and v > us):
                continue
            if log(v * invalpha / (a / (us * us) + b)) <= k * loglam - lam - lgamma(k + 1.0):
                return k
    d = floor(lam + sqrt(lam) * _normal(s) + 0.5)
    return d if d > 0.0 else 0.0


def run_steps(
    double[:, :, ::1] lam,
    int64_t t0_us,
    int64_t dt_us,
    Py_ssize_t n_steps,
    Py_ssize_t y0,
    Py_ssize_t y1,
    double alpha,
    double inv_lam_ref,
    int noise_mode,
    double k_total,
    int binning,
    int force_reset,
    int preamp_on,
    double gain,
    double sat,
    int auto_center,
    int64_t refr_us,
    double[:, ::1] th_on,
    double[:, ::1] th_off,
    double[:, ::1] ell_filt,
    double[:, ::1] ell_center,
    double[:, ::1] v_mem,
    int64_t[:, ::1] refr_until,
    uint64_t[:, ::1] rng_state,
    double[:, ::1] sh_ell,
    double[:, ::1] sh_lam,
    uint64_t[::1] ev_t,
    uint16_t[::1] ev_x,
    uint16_t[::1] ev_y,
    uint8_t[::1] ev_p,
    double[:, :, ::1] moments,
    int do_moments,
):
    cdef Py_ssize_t width = lam.shape[2]
    cdef int time_varying = 1 if lam.shape[0] > 1 else 0
    cdef Py_ssize_t cap = ev_t.shape[0]
    cdef Py_ssize_t n = 0
    cdef Py_ssize_t i, ti, yy, xx, gy, gx
    cdef int64_t t
    cdef double lam_g, lam_px, lam_eff, c, eff, ell, z, f, u, dv
    cdef int pol
    cdef uint64_t st
    cdef double k_buffer = k_total - 1.0
    if k_buffer < 0.0:
        k_buffer = 0.0

    with nogil:
        for i in range(n_steps):
            t = t0_us + i * dt_us
            ti = i if time_varying else 0

            if binning:
                for gy in range(y0, y1, 2):
                    for gx in range(0, width, 2):
                        lam_g = lam[ti, gy, gx] + lam[ti, gy, gx + 1] + lam[ti, gy + 1, gx] + lam[ti, gy + 1, gx + 1]
                        if noise_mode == MODE_POISSON:
                            st = rng_state[gy, gx]
                            c = _poisson(lam[ti, gy, gx], &st)
                            rng_state[gy, gx] = st
                            st = rng_state[gy, gx + 1]
                            c += _poisson(lam[ti, gy, gx + 1], &st)
                            rng_state[gy, gx + 1] = st
                            st = rng_state[gy + 1, gx]
                            c += _poisson(lam[ti, gy + 1, gx], &st)
                            rng_state[gy + 1, gx] = st
                            st = rng_state[gy + 1, gx + 1]
                            c += _poisson(lam[ti, gy + 1, gx + 1], &st)
                            rng_state[gy + 1, gx + 1] = st
                            eff = c if c > 0.5 else 0.5
                        else:
                            eff = lam_g if lam_g > 0.5 else 0.5
                        sh_ell[gy // 2, gx // 2] = log(eff * inv_lam_ref)
                        sh_lam[gy // 2, gx // 2] = lam_g

            for yy in range(y0, y1):
                for xx in range(width):
                    if binning:
                        ell = sh_ell[yy // 2, xx // 2]
                        lam_px = sh_lam[yy // 2, xx // 2]
                    else:
                        lam_px = lam[ti, yy, xx]
                        if noise_mode == MODE_POISSON:
                            st = rng_state[yy, xx]
                            c = _poisson(lam_px, &st)
                            rng_state[yy, xx] = st
                            eff = c if c > 0.5 else 0.5
                        else:
                            eff = lam_px if lam_px > 0.5 else 0.5
                        ell = log(eff * inv_lam_ref)
                    if noise_mode != MODE_OFF and lam_px > 0.0:
                        lam_eff = lam_px if lam_px > 0.25 else 0.25
                        st = rng_state[yy, xx]
                        z = _normal(&st)
                        rng_state[yy, xx] = st
                        if noise_mode == MODE_POISSON:
                            ell = ell + z * sqrt(k_buffer / lam_eff)
                        else:
                            ell = ell + z * sqrt(k_total / lam_eff)

                    f = ell_filt[yy, xx]
                    f = f + alpha * (ell - f)
                    ell_filt[yy, xx] = f
                    if do_moments:
                        moments[0, yy, xx] += f
                        moments[1, yy, xx] += f * f

                    if preamp_on:
                        u = gain * (f - ell_center[yy, xx])
                        if u > sat:
                            u = sat
                        elif u < -sat:
                            u = -sat
                    else:
                        u = f

                    if force_reset and ((yy & 1) or (xx & 1)):
                        continue
                    if t >= refr_until[yy, xx]:
                        dv = u - v_mem[yy, xx]
                        if dv >= th_on[yy, xx]:
                            pol = 1
                        elif -dv >= th_off[yy, xx]:
                            pol = 0
                        else:
                            continue
                        if n >= cap:
                            with gil:
                                raise RuntimeError("event buffer overflow")
                        ev_t[n] = <uint64_t>t
                        ev_x[n] = <uint16_t>xx
                        ev_y[n] = <uint16_t>yy
                        ev_p[n] = <uint8_t>pol
                        n += 1
                        refr_until[yy, xx] = t + refr_us
                        if preamp_on and auto_center:
                            ell_center[yy, xx] = f
                            v_mem[yy, xx] = 0.0
                        else:
                            v_mem[yy, xx] = u

    return n
