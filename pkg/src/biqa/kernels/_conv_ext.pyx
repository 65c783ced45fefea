# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled zero-padded same-size 3x3 convolution kernels.

Direct loop nests over NHWC buffers. Per output pixel the result is built in
a small scratch accumulator (one write to the output instead of one per
kernel tap), and the innermost loops run over the contiguous channel axes so
the C compiler can vectorize them.
"""

import numpy as np

cimport cython


ctypedef fused real:
    float
    double


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] kernel, real[::1] bias):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], ci = x.shape[3]
    cdef Py_ssize_t co = kernel.shape[3]
    cdef Py_ssize_t b, y, xx, dy, dx, sy, sx, ic, oc
    cdef real v

    if real is float:
        dt = np.float32
    else:
        dt = np.float64
    out_np = np.empty((n, h, w, co), dtype=dt)
    scratch_np = np.empty(co, dtype=dt)
    cdef real[:, :, :, ::1] out = out_np
    cdef real[::1] acc = scratch_np

    for b in range(n):
        for y in range(h):
            for xx in range(w):
                for oc in range(co):
                    acc[oc] = bias[oc]
                for dy in range(3):
                    sy = y + dy - 1
                    if sy < 0 or sy >= h:
                        continue
                    for dx in range(3):
                        sx = xx + dx - 1
                        if sx < 0 or sx >= w:
                            continue
                        for ic in range(ci):
                            v = x[b, sy, sx, ic]
                            for oc in range(co):
                                acc[oc] += v * kernel[dy, dx, ic, oc]
                for oc in range(co):
                    out[b, y, xx, oc] = acc[oc]
    return out_np


def conv2d_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] kernel,
                    real[:, :, :, ::1] grad_out):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], ci = x.shape[3]
    cdef Py_ssize_t co = kernel.shape[3]
    cdef Py_ssize_t b, y, xx, dy, dx, sy, sx, ic, oc
    cdef real acc, xv, gv

    if real is float:
        dt = np.float32
    else:
        dt = np.float64
    gx_np = np.zeros((n, h, w, ci), dtype=dt)
    gk_np = np.zeros((3, 3, ci, co), dtype=dt)
    gb_np = np.zeros(co, dtype=dt)
    cdef real[:, :, :, ::1] gx = gx_np
    cdef real[:, :, :, ::1] gk = gk_np
    cdef real[::1] gb = gb_np

    for b in range(n):
        for y in range(h):
            for xx in range(w):
                for oc in range(co):
                    gb[oc] += grad_out[b, y, xx, oc]
                for dy in range(3):
                    sy = y + dy - 1
                    if sy < 0 or sy >= h:
                        continue
                    for dx in range(3):
                        sx = xx + dx - 1
                        if sx < 0 or sx >= w:
                            continue
                        for ic in range(ci):
                            xv = x[b, sy, sx, ic]
                            acc = 0
                            for oc in range(co):
                                gv = grad_out[b, y, xx, oc]
                                acc += gv * kernel[dy, dx, ic, oc]
                                gk[dy, dx, ic, oc] += xv * gv
                            gx[b, sy, sx, ic] += acc
    return gx_np, gk_np, gb_np
