"""Pure-Python backend for the hot loops.

``free_run`` reformulates the two-state recursion as an AR(2) filter on the
displacement and runs it through scipy's lfilter, so it is vectorized and
fast; it equals the compiled path up to floating-point reassociation
(parity asserted at rtol 1e-8).

``closed_loop_chunk`` is a literal, statement-for-statement transcription of
the compiled loop consuming identical random inputs, so closed-loop records
are bit-identical across backends. It runs at interpreter speed - fine for
tests and sub-second records, hopeless for full 20 s presets (use the
compiled backend for those; see the benchmark).
"""

import math

import numpy as np
from scipy.signal import lfilter, lfiltic


def free_run(A, b, L, z, n, normals, force):
    """Advance the oscillator n steps with a fixed propagator.

    Same contract as the compiled ``free_run``: returns (x_samples,
    final_state). Eliminating the momentum from

        x' = a11 x + a12 p + g,   p' = a21 x + a22 p + h

    gives x_{k+2} = trA x_{k+1} - detA x_k + u_{k+1} with
    u_{k+1} = g_{k+1} - a22 g_k + a12 h_k, which lfilter evaluates in C.
    """
    a11, a12, a21, a22 = A
    b1, b2 = b
    l11, l21, l22 = L
    x0 = float(z[0])
    p0 = float(z[1])
    if n == 0:
        return np.empty(0), np.array((x0, p0))

    tr = a11 + a22
    det = a11 * a22 - a12 * a21

    # per-step additive inputs to x and p
    g = np.zeros(n)
    h = np.zeros(n)
    if force is not None:
        g += b1 * force
        h += b2 * force
    if normals is not None:
        g += l11 * normals[:, 0]
        h += l21 * normals[:, 0] + l22 * normals[:, 1]

    u = np.empty(n)
    u[0] = g[0]
    if n > 1:
        u[1:] = g[1:] - a22 * g[:-1] + a12 * h[:-1]

    # AR(2): y[k] = u[k] + tr*y[k-1] - det*y[k-2]; prior outputs are x0 and
    # the exact one-step-back displacement consistent with (x0, p0)
    den = np.array([1.0, -tr, det])
    y_m2 = (a22 * x0 - a12 * p0) / det
    zi = lfiltic([1.0], den, [x0, y_m2])
    y, _ = lfilter([1.0], den, u, zi=zi)

    x_prev = y[-2] if n >= 2 else x0
    g_last = g[-1]
    h_last = h[-1]
    p_prev = (y[-1] - a11 * x_prev - g_last) / a12
    p_final = a21 * x_prev + a22 * p_prev + h_last
    return y, np.array((y[-1], p_final))


def closed_loop_chunk(cfg, state, normals, ref_sin, uniforms, counts_out,
                      rec_omega, rec_err):
    """One chunk of the sequential closed loop (reference implementation).

    cfg fields, in order:
      0 mass, 1 gamma, 2 kT, 3 dt, 4 omega0,
      5 i0, 6 visibility, 7 q (= 2 k cos theta), 8 fringe_phase,
      9 transduction (0 sine / 1 linear), 10 sin(fringe_phase),
      11 cos(fringe_phase), 12 1/(i0*bin_dt), 13 2/(visibility*q),
      14 loop-filter alpha per bin, 15 loop_order,
      16 gain, 17 integral_gain, 18 actuator_limit, 19 update_dt,
      20 steps_per_bin, 21 bins_per_update, 22 record stride (updates).
    state carry: (x, p, omega, integ, elp array, bins since update,
    global update index). Returns (new_state, n_recorded, n_saturated).
    """
    (mass, gamma, kT, dt, omega0, i0, vis, q, fringe_phase, transduction,
     sin_fp, cos_fp, inv_mean, e_scale, loop_alpha, loop_order, gain,
     integral_gain, actuator_limit, update_dt, steps_per_bin,
     bins_per_update, rec_stride) = cfg

    x, p, omega, integ, elp_in, since, upd_idx = state
    # carry only the loop_order filter sections actually in use, matching
    # the compiled kernel's state contract bit for bit
    elp = [float(v) for v in elp_in[: int(loop_order)]]
    elp += [0.0] * (int(loop_order) - len(elp))

    sin = math.sin
    cos = math.cos
    exp = math.exp
    sqrt = math.sqrt

    alpha = 0.5 * gamma
    wd = sqrt(omega * omega - alpha * alpha)
    e = exp(-alpha * dt)
    co = cos(wd * dt)
    si = sin(wd * dt)
    a11 = e * (co + alpha / wd * si)
    a12 = e * si / (mass * wd)
    a21 = -e * mass * omega * omega / wd * si
    a22 = e * (co - alpha / wd * si)
    w2 = omega * omega
    if kT > 0:
        p11 = kT / (mass * w2)
        p22 = mass * kT
        q11 = p11 - (a11 * a11 * p11 + a12 * a12 * p22)
        q12 = -(a11 * a21 * p11 + a12 * a22 * p22)
        q22 = p22 - (a21 * a21 * p11 + a22 * a22 * p22)
        if q11 < 0.0:
            q11 = 0.0
        l11 = sqrt(q11)
        l21 = q12 / l11 if l11 > 0 else 0.0
        q22 = q22 - l21 * l21
        if q22 < 0.0:
            q22 = 0.0
        l22 = sqrt(q22)
    else:
        l11 = 0.0
        l21 = 0.0
        l22 = 0.0

    n_bins = len(ref_sin)
    i_step = 0
    n_rec = 0
    n_sat = 0
    for ib in range(n_bins):
        acc = 0.0
        for s in range(steps_per_bin):
            xn = a11 * x + a12 * p
            pn = a21 * x + a22 * p
            xn = xn + l11 * normals[i_step, 0]
            pn = pn + (l21 * normals[i_step, 0] + l22 * normals[i_step, 1])
            x = xn
            p = pn
            i_step = i_step + 1
            if transduction == 0:
                r = i0 * (1.0 + vis * sin(q * x + fringe_phase))
            else:
                r = i0 * (1.0 + vis * (sin_fp + (q * x) * cos_fp))
                if r < 0.0:
                    r = 0.0
            acc = acc + r
        lam = acc * dt

        u = uniforms[ib]
        pk = exp(-lam)
        cdf = pk
        c = 0
        while u > cdf and c < 255:
            c = c + 1
            pk = pk * (lam / c)
            cdf = cdf + pk
        counts_out[ib] = c

        e_raw = (c * inv_mean - 1.0) * e_scale * ref_sin[ib]
        prev = e_raw
        for j in range(loop_order):
            elp[j] = elp[j] + loop_alpha * (prev - elp[j])
            prev = elp[j]

        since = since + 1
        if since == bins_per_update:
            since = 0
            integ = integ + integral_gain * prev * update_dt
            ucmd = gain * prev + integ
            if ucmd > actuator_limit:
                ucmd = actuator_limit
                n_sat = n_sat + 1
            elif ucmd < -actuator_limit:
                ucmd = -actuator_limit
                n_sat = n_sat + 1
            omega = omega0 + ucmd
            if upd_idx % rec_stride == 0:
                rec_omega[n_rec] = omega
                rec_err[n_rec] = prev
                n_rec = n_rec + 1
            upd_idx = upd_idx + 1

            wd = sqrt(omega * omega - alpha * alpha)
            co = cos(wd * dt)
            si = sin(wd * dt)
            a11 = e * (co + alpha / wd * si)
            a12 = e * si / (mass * wd)
            a21 = -e * mass * omega * omega / wd * si
            a22 = e * (co - alpha / wd * si)
            w2 = omega * omega
            if kT > 0:
                p11 = kT / (mass * w2)
                p22 = mass * kT
                q11 = p11 - (a11 * a11 * p11 + a12 * a12 * p22)
                q12 = -(a11 * a21 * p11 + a12 * a22 * p22)
                q22 = p22 - (a21 * a21 * p11 + a22 * a22 * p22)
                if q11 < 0.0:
                    q11 = 0.0
                l11 = sqrt(q11)
                l21 = q12 / l11 if l11 > 0 else 0.0
                q22 = q22 - l21 * l21
                if q22 < 0.0:
                    q22 = 0.0
                l22 = sqrt(q22)

    new_state = (x, p, omega, integ, np.asarray(elp, dtype=np.float64),
                 since, upd_idx)
    return new_state, n_rec, n_sat
