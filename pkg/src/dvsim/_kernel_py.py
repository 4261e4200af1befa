"""Pure-Python array-stepping kernel (fallback backend).

Semantics are identical to the compiled kernel in ``_kernel_cy``; both call
the same libm functions on the same doubles in the same order, so the two
backends produce bit-identical event streams.  This one is slow and exists
for environments without a C toolchain and as the readable reference.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import PixelStream

# noise_mode codes shared with the compiled kernel
MODE_OFF = 0
MODE_POISSON = 1
MODE_ANALYTIC = 2


def run_steps(
    lam,
    t0_us,
    dt_us,
    n_steps,
    y0,
    y1,
    alpha,
    inv_lam_ref,
    noise_mode,
    k_total,
    binning,
    force_reset,
    preamp_on,
    gain,
    sat,
    auto_center,
    refr_us,
    th_on,
    th_off,
    ell_filt,
    ell_center,
    v_mem,
    refr_until,
    rng_state,
    sh_ell,
    sh_lam,
    ev_t,
    ev_x,
    ev_y,
    ev_p,
    moments,
    do_moments,
):
    """Advance rows [y0, y1) by n_steps; returns the number of emitted events.

    ``lam`` is (T, H, W) mean photoelectron counts per step (T == n_steps or
    T == 1 for a static field).  State arrays are full-size and indexed with
    absolute rows, so disjoint row bands can run concurrently.
    """
    time_varying = lam.shape[0] > 1
    width = lam.shape[2]
    band_h = y1 - y0

    lam_rows = lam[:, y0:y1, :].tolist()
    ef = ell_filt[y0:y1].tolist()
    ec = ell_center[y0:y1].tolist()
    vm = v_mem[y0:y1].tolist()
    ru = refr_until[y0:y1].tolist()
    st = rng_state[y0:y1].tolist()
    ton = th_on[y0:y1].tolist()
    toff = th_off[y0:y1].tolist()
    if do_moments:
        m0 = moments[0, y0:y1].tolist()
        m1 = moments[1, y0:y1].tolist()
    g2 = y0 // 2
    sh_e = sh_ell[g2 : g2 + band_h // 2].tolist() if binning else None
    sh_l = sh_lam[g2 : g2 + band_h // 2].tolist() if binning else None

    stream = PixelStream(0)
    log = math.log
    sqrt = math.sqrt
    k_buffer = k_total - 1.0
    if k_buffer < 0.0:
        k_buffer = 0.0

    out_t: list[int] = []
    out_x: list[int] = []
    out_y: list[int] = []
    out_p: list[int] = []

    for i in range(n_steps):
        t = t0_us + i * dt_us
        lam_t = lam_rows[i] if time_varying else lam_rows[0]

        if binning:
            for gy in range(0, band_h, 2):
                row0 = lam_t[gy]
                row1 = lam_t[gy + 1]
                se_row = sh_e[gy // 2]
                sl_row = sh_l[gy // 2]
                st0 = st[gy]
                st1 = st[gy + 1]
                for gx in range(0, width, 2):
                    lam_g = row0[gx] + row0[gx + 1] + row1[gx] + row1[gx + 1]
                    if noise_mode == MODE_POISSON:
                        stream.state = st0[gx]
                        c = stream.poisson(row0[gx])
                        st0[gx] = stream.state
                        stream.state = st0[gx + 1]
                        c += stream.poisson(row0[gx + 1])
                        st0[gx + 1] = stream.state
                        stream.state = st1[gx]
                        c += stream.poisson(row1[gx])
                        st1[gx] = stream.state
                        stream.state = st1[gx + 1]
                        c += stream.poisson(row1[gx + 1])
                        st1[gx + 1] = stream.state
                        eff = c if c > 0.5 else 0.5
                    else:
                        eff = lam_g if lam_g > 0.5 else 0.5
                    se_row[gx // 2] = log(eff * inv_lam_ref)
                    sl_row[gx // 2] = lam_g

        for yy in range(band_h):
            y_abs = y0 + yy
            lrow = lam_t[yy]
            ef_row = ef[yy]
            ec_row = ec[yy]
            vm_row = vm[yy]
            ru_row = ru[yy]
            st_row = st[yy]
            ton_row = ton[yy]
            toff_row = toff[yy]
            if do_moments:
                m0_row = m0[yy]
                m1_row = m1[yy]
            if binning:
                se_row = sh_e[yy // 2]
                sl_row = sh_l[yy // 2]
            for xx in range(width):
                if binning:
                    ell = se_row[xx // 2]
                    lam_px = sl_row[xx // 2]
                else:
                    lam_px = lrow[xx]
                    if noise_mode == MODE_POISSON:
                        stream.state = st_row[xx]
                        c = stream.poisson(lam_px)
                        st_row[xx] = stream.state
                        eff = c if c > 0.5 else 0.5
                    else:
                        eff = lam_px if lam_px > 0.5 else 0.5
                    ell = log(eff * inv_lam_ref)
                if noise_mode != MODE_OFF and lam_px > 0.0:
                    lam_eff = lam_px if lam_px > 0.25 else 0.25
                    stream.state = st_row[xx]
                    z = stream.normal()
                    st_row[xx] = stream.state
                    if noise_mode == MODE_POISSON:
                        ell = ell + z * sqrt(k_buffer / lam_eff)
                    else:
                        ell = ell + z * sqrt(k_total / lam_eff)

                f = ef_row[xx]
                f = f + alpha * (ell - f)
                ef_row[xx] = f
                if do_moments:
                    m0_row[xx] += f
                    m1_row[xx] += f * f

                if preamp_on:
                    u = gain * (f - ec_row[xx])
                    if u > sat:
                        u = sat
                    elif u < -sat:
                        u = -sat
                else:
                    u = f

                if force_reset and ((y_abs & 1) or (xx & 1)):
                    continue
                if t >= ru_row[xx]:
                    dv = u - vm_row[xx]
                    if dv >= ton_row[xx]:
                        pol = 1
                    elif -dv >= toff_row[xx]:
                        pol = 0
                    else:
                        continue
                    out_t.append(t)
                    out_x.append(xx)
                    out_y.append(y_abs)
                    out_p.append(pol)
                    ru_row[xx] = t + refr_us
                    if preamp_on and auto_center:
                        ec_row[xx] = f
                        vm_row[xx] = 0.0
                    else:
                        vm_row[xx] = u

    ell_filt[y0:y1] = ef
    ell_center[y0:y1] = ec
    v_mem[y0:y1] = vm
    refr_until[y0:y1] = ru
    rng_state[y0:y1] = np.array(st, dtype=np.uint64)
    if do_moments:
        moments[0, y0:y1] = m0
        moments[1, y0:y1] = m1

    n = len(out_t)
    ev_t[:n] = out_t
    ev_x[:n] = out_x
    ev_y[:n] = out_y
    ev_p[:n] = out_p
    return n
