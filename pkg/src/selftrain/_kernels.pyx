# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: bilinear affine warps and 3x3 im2col/col2im.

Arithmetic is ordered exactly as in ``_kernels_py`` so both backends agree
bit for bit.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def affine_warp(const double[:, :, :, ::1] images, const double[:, ::1] coeffs, double fill):
    cdef Py_ssize_t n_img = images.shape[0], H = images.shape[1], W = images.shape[2], C = images.shape[3]
    if coeffs.shape[0] != n_img or coeffs.shape[1] != 6:
        raise ValueError("coeffs must have shape (N, 6)")
    out_arr = np.empty((n_img, H, W, C), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, y, x, c, y0, x0
    cdef double sy, sx, fy, fx, p00, p01, p10, p11, top, bot
    cdef bint in_y0, in_y1, in_x0, in_x1
    with nogil:
        for n in range(n_img):
            for y in range(H):
                for x in range(W):
                    sy = coeffs[n, 0] * <double>y + coeffs[n, 1] * <double>x + coeffs[n, 2]
                    sx = coeffs[n, 3] * <double>y + coeffs[n, 4] * <double>x + coeffs[n, 5]
                    y0 = <Py_ssize_t>floor(sy)
                    x0 = <Py_ssize_t>floor(sx)
                    fy = sy - <double>y0
                    fx = sx - <double>x0
                    in_y0 = 0 <= y0 < H
                    in_y1 = 0 <= y0 + 1 < H
                    in_x0 = 0 <= x0 < W
                    in_x1 = 0 <= x0 + 1 < W
                    for c in range(C):
                        p00 = images[n, y0, x0, c] if (in_y0 and in_x0) else fill
                        p01 = images[n, y0, x0 + 1, c] if (in_y0 and in_x1) else fill
                        p10 = images[n, y0 + 1, x0, c] if (in_y1 and in_x0) else fill
                        p11 = images[n, y0 + 1, x0 + 1, c] if (in_y1 and in_x1) else fill
                        top = (1.0 - fx) * p00 + fx * p01
                        bot = (1.0 - fx) * p10 + fx * p11
                        out[n, y, x, c] = (1.0 - fy) * top + fy * bot
    return out_arr


def im2col3x3(const double[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cols_arr = np.empty((N * H * W, C * 9), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, y, xx, ky, kx, sy, sx, row, col
    with nogil:
        for n in range(N):
            for y in range(H):
                for xx in range(W):
                    row = (n * H + y) * W + xx
                    for c in range(C):
                        for ky in range(3):
                            sy = y + ky - 1
                            for kx in range(3):
                                sx = xx + kx - 1
                                col = c * 9 + ky * 3 + kx
                                if 0 <= sy < H and 0 <= sx < W:
                                    cols[row, col] = x[n, c, sy, sx]
                                else:
                                    cols[row, col] = 0.0
    return cols_arr


def col2im3x3(const double[:, ::1] cols, Py_ssize_t N, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W):
    if cols.shape[0] != N * H * W or cols.shape[1] != C * 9:
        raise ValueError("cols shape does not match (N*H*W, C*9)")
    padded_arr = np.zeros((N, C, H + 2, W + 2), dtype=np.float64)
    cdef double[:, :, :, ::1] padded = padded_arr
    cdef Py_ssize_t n, c, y, xx, ky, kx
    with nogil:
        for n in range(N):
            for c in range(C):
                for ky in range(3):
                    for kx in range(3):
                        for y in range(H):
                            for xx in range(W):
                                padded[n, c, y + ky, xx + kx] += cols[(n * H + y) * W + xx, c * 9 + ky * 3 + kx]
    return np.ascontiguousarray(padded_arr[:, :, 1:H + 1, 1:W + 1])
