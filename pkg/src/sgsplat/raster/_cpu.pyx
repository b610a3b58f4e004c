# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled tile-walking pixel loops for the surfel rasterizer."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs

ctypedef fused floating:
    float
    double

DEF SKIP_ALPHA = 0.00392156862745098   # 1/255
DEF MIN_TRANSMITTANCE = 1e-4
DEF MIN_ALPHA_ACCUM = 1e-4
DEF MIN_POWER = -4.5                   # 3-sigma footprint bound


def forward(floating[:, ::1] mu, floating[:, ::1] conic, floating[::1] alpha,
            floating[:, ::1] color, floating[::1] z, floating[:, ::1] n_cam,
            int height, int width, int tile_size,
            cnp.int32_t[::1] offsets, cnp.int32_t[::1] lists,
            floating[::1] background,
            floating[:, :, ::1] out_color, floating[:, ::1] out_depth,
            floating[:, :, ::1] out_normal, floating[:, ::1] out_alpha,
            floating[:, ::1] out_trans, cnp.int32_t[:, ::1] out_argmax):
    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef int tiles_y = (height + tile_size - 1) // tile_size
    cdef int ty, tx, tid, py, px, y0, y1, x0, x1, m, start, end, k
    cdef floating T, G, a, w, dx, dy, power, wmax, D, A
    cdef int argmax

    for ty in range(tiles_y):
        y0 = ty * tile_size
        y1 = min(y0 + tile_size, height)
        for tx in range(tiles_x):
            x0 = tx * tile_size
            x1 = min(x0 + tile_size, width)
            tid = ty * tiles_x + tx
            start = offsets[tid]
            end = offsets[tid + 1]
            for py in range(y0, y1):
                for px in range(x0, x1):
                    T = 1.0
                    D = 0.0
                    A = 0.0
                    wmax = 0.0
                    argmax = -1
                    for m in range(start, end):
                        k = lists[m]
                        dx = px - mu[k, 0]
                        dy = py - mu[k, 1]
                        power = -0.5 * (conic[k, 0] * dx * dx
                                        + 2.0 * conic[k, 1] * dx * dy
                                        + conic[k, 2] * dy * dy)
                        if power > 0.0 or power < MIN_POWER:
                            continue
                        G = exp(power)
                        a = alpha[k] * G
                        if a < SKIP_ALPHA:
                            continue
                        w = a * T
                        out_color[py, px, 0] += w * color[k, 0]
                        out_color[py, px, 1] += w * color[k, 1]
                        out_color[py, px, 2] += w * color[k, 2]
                        D += w * z[k]
                        out_normal[py, px, 0] += w * n_cam[k, 0]
                        out_normal[py, px, 1] += w * n_cam[k, 1]
                        out_normal[py, px, 2] += w * n_cam[k, 2]
                        A += w
                        if w > wmax:
                            wmax = w
                            argmax = k
                        T = T * (1.0 - a)
                        if T < MIN_TRANSMITTANCE:
                            break
                    out_color[py, px, 0] += T * background[0]
                    out_color[py, px, 1] += T * background[1]
                    out_color[py, px, 2] += T * background[2]
                    out_alpha[py, px] = A
                    out_trans[py, px] = T
                    out_argmax[py, px] = argmax
                    if A > MIN_ALPHA_ACCUM:
                        out_depth[py, px] = D / A


def backward(floating[:, ::1] mu, floating[:, ::1] conic, floating[::1] alpha,
             floating[:, ::1] color, floating[::1] z, floating[:, ::1] n_cam,
             int height, int width, int tile_size,
             cnp.int32_t[::1] offsets, cnp.int32_t[::1] lists,
             floating[::1] background,
             floating[:, :, ::1] g_color, floating[:, ::1] g_depth,
             floating[:, :, ::1] g_normal, floating[:, ::1] g_alpha,
             floating[:, :, ::1] g_median, cnp.int32_t[:, ::1] argmax_idx,
             floating[:, ::1] d_mu, floating[:, ::1] d_conic,
             floating[::1] d_alpha, floating[:, ::1] d_color,
             floating[::1] d_z, floating[:, ::1] d_ncam,
             floating[::1] homo_grad, cnp.int64_t[::1] touch_count):
    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef int tiles_y = (height + tile_size - 1) // tile_size
    cdef int ty, tx, tid, py, px, y0, y1, x0, x1, m, start, end, k, last, am
    cdef floating T, G, a, w, dx, dy, power, A, D
    cdef floating gc0, gc1, gc2, gn0, gn1, gn2, ga, gdD, gA_eff, u, S, da
    cdef floating dpow, gmx, gmy, Tb
    cdef floating[::1] a_buf
    cdef int maxlen = 0

    for tid in range(offsets.shape[0] - 1):
        if offsets[tid + 1] - offsets[tid] > maxlen:
            maxlen = offsets[tid + 1] - offsets[tid]
    if floating is float:
        a_buf = np.zeros(max(maxlen, 1), dtype=np.float32)
    else:
        a_buf = np.zeros(max(maxlen, 1), dtype=np.float64)

    for ty in range(tiles_y):
        y0 = ty * tile_size
        y1 = min(y0 + tile_size, height)
        for tx in range(tiles_x):
            x0 = tx * tile_size
            x1 = min(x0 + tile_size, width)
            tid = ty * tiles_x + tx
            start = offsets[tid]
            end = offsets[tid + 1]
            if start == end:
                continue
            for py in range(y0, y1):
                for px in range(x0, x1):
                    # recompute the forward walk for this pixel
                    T = 1.0
                    A = 0.0
                    D = 0.0
                    last = -1
                    for m in range(start, end):
                        k = lists[m]
                        dx = px - mu[k, 0]
                        dy = py - mu[k, 1]
                        power = -0.5 * (conic[k, 0] * dx * dx
                                        + 2.0 * conic[k, 1] * dx * dy
                                        + conic[k, 2] * dy * dy)
                        a_buf[m - start] = 0.0
                        if power > 0.0 or power < MIN_POWER:
                            continue
                        a = alpha[k] * exp(power)
                        if a < SKIP_ALPHA:
                            continue
                        a_buf[m - start] = a
                        w = a * T
                        A += w
                        D += w * z[k]
                        T = T * (1.0 - a)
                        last = m
                        if T < MIN_TRANSMITTANCE:
                            break

                    gc0 = g_color[py, px, 0]
                    gc1 = g_color[py, px, 1]
                    gc2 = g_color[py, px, 2]
                    gn0 = g_normal[py, px, 0]
                    gn1 = g_normal[py, px, 1]
                    gn2 = g_normal[py, px, 2]
                    ga = g_alpha[py, px]
                    if A > MIN_ALPHA_ACCUM:
                        gdD = g_depth[py, px] / A
                        gA_eff = ga - g_depth[py, px] * D / (A * A)
                    else:
                        gdD = 0.0
                        gA_eff = ga

                    am = argmax_idx[py, px]
                    if am >= 0:
                        d_ncam[am, 0] += g_median[py, px, 0]
                        d_ncam[am, 1] += g_median[py, px, 1]
                        d_ncam[am, 2] += g_median[py, px, 2]

                    if last < 0:
                        continue
                    # reverse walk: S holds sum_{m>k} u_m w_m + (g_c.bg) T_N
                    S = (gc0 * background[0] + gc1 * background[1]
                         + gc2 * background[2]) * T
                    for m in range(last, start - 1, -1):
                        a = a_buf[m - start]
                        if a == 0.0:
                            continue
                        k = lists[m]
                        Tb = T / (1.0 - a)   # transmittance before splat k
                        w = a * Tb
                        u = (gc0 * color[k, 0] + gc1 * color[k, 1]
                             + gc2 * color[k, 2]
                             + gdD * z[k]
                             + gn0 * n_cam[k, 0] + gn1 * n_cam[k, 1]
                             + gn2 * n_cam[k, 2]
                             + gA_eff)
                        da = u * Tb - S / (1.0 - a)
                        S += u * w
                        T = Tb

                        d_color[k, 0] += gc0 * w
                        d_color[k, 1] += gc1 * w
                        d_color[k, 2] += gc2 * w
                        d_z[k] += gdD * w
                        d_ncam[k, 0] += gn0 * w
                        d_ncam[k, 1] += gn1 * w
                        d_ncam[k, 2] += gn2 * w

                        G = a / alpha[k]
                        d_alpha[k] += da * G
                        dpow = da * a
                        dx = px - mu[k, 0]
                        dy = py - mu[k, 1]
                        d_conic[k, 0] += dpow * (-0.5 * dx * dx)
                        d_conic[k, 1] += dpow * (-dx * dy)
                        d_conic[k, 2] += dpow * (-0.5 * dy * dy)
                        gmx = dpow * (conic[k, 0] * dx + conic[k, 1] * dy)
                        gmy = dpow * (conic[k, 1] * dx + conic[k, 2] * dy)
                        d_mu[k, 0] += gmx
                        d_mu[k, 1] += gmy
                        homo_grad[k] += fabs(gmx) + fabs(gmy)
                        touch_count[k] += 1
