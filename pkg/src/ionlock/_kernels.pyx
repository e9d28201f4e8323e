# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: free-running oscillator evolution and the closed
feedback loop (oscillator -> photon counting -> mixer -> loop filter ->
trap-frequency actuation).

The semantics of both entry points are defined by the pure-Python reference
implementations in ``_kernels_py``; this module must stay step-for-step
equivalent (the parity tests assert it). Expression shapes mirror the Python
reference exactly, and the build disables FP contraction, so the closed-loop
path is bit-identical across backends.
"""

from libc.math cimport cos, exp, sin, sqrt

import numpy as np

cimport numpy as cnp

cnp.import_array()

_EMPTY_1D = np.empty(0, dtype=np.float64)
_EMPTY_2D = np.empty((0, 2), dtype=np.float64)


def free_run(A, b, L, z, Py_ssize_t n, normals, force):
    """Advance the oscillator n steps with a fixed propagator.

    A, b, L are the flat propagator tuples from ``oscillator.propagator``;
    z is the (x, p) state; normals is an (n, 2) standard-normal array or
    None; force is an (n,) per-step force array or None. Returns
    (x_samples, final_state).
    """
    cdef double a11 = A[0], a12 = A[1], a21 = A[2], a22 = A[3]
    cdef double b1 = b[0], b2 = b[1]
    cdef double l11 = L[0], l21 = L[1], l22 = L[2]
    cdef double x = z[0], p = z[1]
    cdef bint has_w = normals is not None
    cdef bint has_f = force is not None
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] xo = out
    cdef double[:, ::1] w = normals if has_w else _EMPTY_2D
    cdef double[::1] f = force if has_f else _EMPTY_1D
    cdef Py_ssize_t i
    cdef double xn, pn, fi
    with nogil:
        for i in range(n):
            if has_f:
                fi = f[i]
                xn = a11 * x + a12 * p + b1 * fi
                pn = a21 * x + a22 * p + b2 * fi
            else:
                xn = a11 * x + a12 * p
                pn = a21 * x + a22 * p
            if has_w:
                xn = xn + l11 * w[i, 0]
                pn = pn + (l21 * w[i, 0] + l22 * w[i, 1])
            x = xn
            p = pn
            xo[i] = x
    return out, np.array((x, p))


def closed_loop_chunk(cfg, state, double[:, ::1] normals, double[::1] ref_sin,
                      double[::1] uniforms, cnp.uint8_t[::1] counts_out,
                      double[::1] rec_omega, double[::1] rec_err):
    """Run one chunk of the sequential closed loop.

    cfg is the flat parameter tuple built by ``control._loop_cfg`` (see
    ``_kernels_py.closed_loop_chunk`` for the field-by-field meaning) and
    state the mutable carry tuple. Per chunk the caller supplies one
    standard-normal pair per integrator step, one reference-sine value and
    one uniform variate per count bin, and output buffers. Returns
    (new_state, n_recorded, n_saturated).
    """
    cdef double mass = cfg[0], gamma = cfg[1], kT = cfg[2], dt = cfg[3]
    cdef double omega0 = cfg[4], i0 = cfg[5], vis = cfg[6], q = cfg[7]
    cdef double fringe_phase = cfg[8]
    cdef int transduction = cfg[9]
    cdef double sin_fp = cfg[10], cos_fp = cfg[11]
    cdef double inv_mean = cfg[12], e_scale = cfg[13], loop_alpha = cfg[14]
    cdef Py_ssize_t loop_order = cfg[15]
    cdef double gain = cfg[16], integral_gain = cfg[17]
    cdef double actuator_limit = cfg[18], update_dt = cfg[19]
    cdef Py_ssize_t steps_per_bin = cfg[20], bins_per_update = cfg[21]
    cdef Py_ssize_t rec_stride = cfg[22]

    cdef double x = state[0], p = state[1], omega = state[2], integ = state[3]
    cdef double elp[8]
    cdef Py_ssize_t j
    for j in range(loop_order):
        elp[j] = state[4][j]
    cdef Py_ssize_t since = state[5]
    cdef Py_ssize_t upd_idx = state[6]

    cdef Py_ssize_t n_bins = ref_sin.shape[0]
    cdef Py_ssize_t ib, s, i_step, n_rec, n_sat
    cdef int c
    cdef double xn, pn, r, acc, lam, u, pk, cdf, e_raw, prev, ucmd
    cdef double a11, a12, a21, a22, l11, l21, l22
    cdef double alpha, wd, e, co, si, w2, p11, p22, q11, q12, q22

    # current propagator (rebuilt exactly as oscillator.propagator does)
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

    i_step = 0
    n_rec = 0
    n_sat = 0
    with nogil:
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

            # inverse-CDF Poisson draw from a single uniform
            u = uniforms[ib]
            pk = exp(-lam)
            cdf = pk
            c = 0
            while u > cdf and c < 255:
                c = c + 1
                pk = pk * (lam / c)
                cdf = cdf + pk
            counts_out[ib] = <cnp.uint8_t> c

            # demodulated error in displacement units, then loop-filter cascade
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

                # rebuild the propagator at the new trap frequency
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

    elp_out = np.empty(loop_order, dtype=np.float64)
    for j in range(loop_order):
        elp_out[j] = elp[j]
    new_state = (x, p, omega, integ, elp_out, since, upd_idx)
    return new_state, n_rec, n_sat
