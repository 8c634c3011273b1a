# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of ``drivealign._kernels_py``.

Same contracts, same float64 arithmetic, tight C loops. The pure-numpy
module is the reference; equivalence is enforced by tests/test_kernels.py.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport atan2, cos, fmax, fmin, fmod, hypot, sin, sqrt, M_PI

cnp.import_array()

BACKEND_NAME = "compiled"

ACT_LINEAR = 0
ACT_TANH = 1
ACT_RELU = 2

cdef extern from "math.h":
    double tanh(double) nogil


def mlp_forward(double[::1] params, widths, act_codes, x, bint keep_cache=False):
    cdef cnp.ndarray h = np.ascontiguousarray(x, dtype=np.float64)
    cdef list cache = [h] if keep_cache else None
    cdef Py_ssize_t n_layers = len(widths) - 1
    cdef Py_ssize_t li, nin, nout, b_, i, j, off = 0
    cdef Py_ssize_t batch = h.shape[0]
    cdef int code
    cdef double acc
    cdef double[:, ::1] hin
    cdef double[:, ::1] hout
    cdef cnp.ndarray out
    for li in range(n_layers):
        nin = widths[li]
        nout = widths[li + 1]
        code = act_codes[li]
        out = np.empty((batch, nout), dtype=np.float64)
        hin = h
        hout = out
        with nogil:
            for b_ in range(batch):
                for j in range(nout):
                    acc = params[off + nin * nout + j]
                    for i in range(nin):
                        acc += hin[b_, i] * params[off + i * nout + j]
                    if code == 1:
                        acc = tanh(acc)
                    elif code == 2:
                        acc = fmax(acc, 0.0)
                    hout[b_, j] = acc
        off += nin * nout + nout
        h = out
        if keep_cache:
            cache.append(h)
    return h, cache


def mlp_backward(double[::1] params, widths, act_codes, cache, dy):
    cdef Py_ssize_t n_layers = len(widths) - 1
    cdef cnp.ndarray dparams_arr = np.zeros(params.shape[0], dtype=np.float64)
    cdef double[::1] dparams = dparams_arr
    cdef list offsets = []
    cdef Py_ssize_t off = 0
    cdef Py_ssize_t li, nin, nout, b_, i, j, o
    cdef int code
    cdef double g, acc
    for li in range(n_layers):
        offsets.append(off)
        off += widths[li] * widths[li + 1] + widths[li + 1]
    cdef cnp.ndarray dh = np.ascontiguousarray(dy, dtype=np.float64)
    cdef Py_ssize_t batch = dh.shape[0]
    cdef cnp.ndarray dpre_arr, dh_next
    cdef double[:, ::1] dh_v, dpre, hin_v, hout_v, dnext
    for li in range(n_layers - 1, -1, -1):
        nin = widths[li]
        nout = widths[li + 1]
        code = act_codes[li]
        o = offsets[li]
        hout_v = cache[li + 1]
        hin_v = cache[li]
        dh_v = dh
        dpre_arr = np.empty((batch, nout), dtype=np.float64)
        dpre = dpre_arr
        dh_next = np.zeros((batch, nin), dtype=np.float64)
        dnext = dh_next
        with nogil:
            for b_ in range(batch):
                for j in range(nout):
                    g = dh_v[b_, j]
                    if code == 1:
                        g *= 1.0 - hout_v[b_, j] * hout_v[b_, j]
                    elif code == 2:
                        if hout_v[b_, j] <= 0.0:
                            g = 0.0
                    dpre[b_, j] = g
            # weight and bias gradients
            for i in range(nin):
                for j in range(nout):
                    acc = 0.0
                    for b_ in range(batch):
                        acc += hin_v[b_, i] * dpre[b_, j]
                    dparams[o + i * nout + j] = acc
            for j in range(nout):
                acc = 0.0
                for b_ in range(batch):
                    acc += dpre[b_, j]
                dparams[o + nin * nout + j] = acc
            # input gradient
            for b_ in range(batch):
                for i in range(nin):
                    acc = 0.0
                    for j in range(nout):
                        acc += dpre[b_, j] * params[o + i * nout + j]
                    dnext[b_, i] = acc
        dh = dh_next
    return dparams_arr, dh


def polyline_project(double[::1] xs, double[::1] ys, double px, double py):
    cdef double best_d2 = 1e300
    cdef double best_s = 0.0, best_h = 0.0, s_acc = 0.0
    cdef double ax, ay, ex, ey, seg_len2, seg_len, t, cx, cy, d2
    cdef Py_ssize_t i, n = xs.shape[0]
    with nogil:
        for i in range(n - 1):
            ax = xs[i]
            ay = ys[i]
            ex = xs[i + 1] - ax
            ey = ys[i + 1] - ay
            seg_len2 = ex * ex + ey * ey
            if seg_len2 <= 0.0:
                continue
            t = ((px - ax) * ex + (py - ay) * ey) / seg_len2
            t = fmin(1.0, fmax(0.0, t))
            cx = ax + t * ex
            cy = ay + t * ey
            d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy)
            seg_len = sqrt(seg_len2)
            if d2 < best_d2:
                best_d2 = d2
                best_s = s_acc + t * seg_len
                best_h = atan2(ey, ex)
            s_acc += seg_len
    return sqrt(best_d2), best_s, best_h


cdef bint _obb_overlap(double cx1, double cy1, double th1, double l1, double w1,
                       double cx2, double cy2, double th2, double l2, double w2) nogil:
    cdef double r1 = 0.5 * hypot(l1, w1)
    cdef double r2 = 0.5 * hypot(l2, w2)
    cdef double dx = cx2 - cx1, dy = cy2 - cy1
    if dx * dx + dy * dy > (r1 + r2) * (r1 + r2):
        return False
    cdef double axes[4][2]
    cdef double c1[4][2]
    cdef double c2[4][2]
    _fill_rect(cx1, cy1, th1, l1, w1, &axes[0], c1)
    _fill_rect(cx2, cy2, th2, l2, w2, &axes[2], c2)
    cdef Py_ssize_t a, k
    cdef double ax, ay, lo1, hi1, lo2, hi2, p
    for a in range(4):
        ax = axes[a][0]
        ay = axes[a][1]
        lo1 = hi1 = c1[0][0] * ax + c1[0][1] * ay
        lo2 = hi2 = c2[0][0] * ax + c2[0][1] * ay
        for k in range(1, 4):
            p = c1[k][0] * ax + c1[k][1] * ay
            lo1 = fmin(lo1, p)
            hi1 = fmax(hi1, p)
            p = c2[k][0] * ax + c2[k][1] * ay
            lo2 = fmin(lo2, p)
            hi2 = fmax(hi2, p)
        if hi1 < lo2 or hi2 < lo1:
            return False
    return True


cdef void _fill_rect(double cx, double cy, double th, double length, double width,
                     double (*axes)[2], double (*corners)[2]) nogil:
    cdef double c = cos(th), s = sin(th)
    cdef double hl = 0.5 * length, hw = 0.5 * width
    axes[0][0] = c
    axes[0][1] = s
    axes[1][0] = -s
    axes[1][1] = c
    corners[0][0] = cx + c * hl - s * hw
    corners[0][1] = cy + s * hl + c * hw
    corners[1][0] = cx + c * hl + s * hw
    corners[1][1] = cy + s * hl - c * hw
    corners[2][0] = cx - c * hl - s * hw
    corners[2][1] = cy - s * hl + c * hw
    corners[3][0] = cx - c * hl + s * hw
    corners[3][1] = cy - s * hl - c * hw


def obb_overlap(double cx1, double cy1, double th1, double l1, double w1,
                double cx2, double cy2, double th2, double l2, double w2):
    return bool(_obb_overlap(cx1, cy1, th1, l1, w1, cx2, cy2, th2, l2, w2))


def collision_grid(double[:, :, ::1] states, double[::1] lengths, double[::1] widths):
    cdef Py_ssize_t m = states.shape[0]
    cdef Py_ssize_t t = states.shape[1]
    cdef cnp.ndarray flags_arr = np.zeros((m, t), dtype=np.uint8)
    cdef unsigned char[:, ::1] flags = flags_arr
    cdef Py_ssize_t i, j, k
    with nogil:
        for k in range(t):
            for i in range(m):
                for j in range(i + 1, m):
                    if _obb_overlap(states[i, k, 0], states[i, k, 1], states[i, k, 3],
                                    lengths[i], widths[i],
                                    states[j, k, 0], states[j, k, 1], states[j, k, 3],
                                    lengths[j], widths[j]):
                        flags[i, k] = 1
                        flags[j, k] = 1
    return flags_arr


def unicycle_steps(double[:, ::1] states, double[:, ::1] actions, double dt):
    cdef Py_ssize_t m = states.shape[0]
    cdef cnp.ndarray out_arr = np.empty((m, 4), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i
    cdef double v, th, nth, tmp
    with nogil:
        for i in range(m):
            v = states[i, 2]
            th = states[i, 3]
            out[i, 0] = states[i, 0] + v * cos(th) * dt
            out[i, 1] = states[i, 1] + v * sin(th) * dt
            out[i, 2] = fmax(0.0, v + actions[i, 0] * dt)
            nth = th + actions[i, 1] * dt
            # same arithmetic as np.mod(nth + pi, 2*pi) - pi
            tmp = fmod(nth + M_PI, 2.0 * M_PI)
            if tmp != 0.0 and tmp < 0.0:
                tmp += 2.0 * M_PI
            nth = tmp - M_PI
            if nth == -M_PI:
                nth = M_PI
            out[i, 3] = nth
    return out_arr
