"""Pure-numpy fallback for the compiled pixel kernels.

Vectorized per tile; matches the compiled semantics (1/255 contribution
skip, transmittance cutoff at 1e-4, front-to-back order).
"""

import numpy as np

SKIP_ALPHA = 1.0 / 255.0
MIN_TRANSMITTANCE = 1e-4
MIN_ALPHA_ACCUM = 1e-4
MIN_POWER = -4.5  # 3-sigma footprint bound


def _tile_pixels(y0, y1, x0, x1):
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return ys.ravel(), xs.ravel()


def _tile_weights(mu, conic, alpha, ids, ys, xs):
    """Per-pixel per-splat quantities for one tile.

    Returns (a, incl, T_before) with shape (P, M); `incl` marks
    contributions that survive both the skip and the early-exit rule.
    """
    dx = xs[:, None] - mu[ids, 0][None, :]
    dy = ys[:, None] - mu[ids, 1][None, :]
    power = -0.5 * (
        conic[ids, 0] * dx * dx
        + 2.0 * conic[ids, 1] * dx * dy
        + conic[ids, 2] * dy * dy
    )
    a = alpha[ids][None, :] * np.exp(np.minimum(power, 0.0))
    a = np.where((power > 0.0) | (power < MIN_POWER), 0.0, a)
    a = np.where(a < SKIP_ALPHA, 0.0, a)
    # transmittance before each splat, in list order
    one_minus = 1.0 - a
    T_before = np.cumprod(one_minus, axis=1) / one_minus
    # early exit: a splat contributes only while T_before >= threshold
    incl = (a > 0.0) & (T_before >= MIN_TRANSMITTANCE)
    a = np.where(incl, a, 0.0)
    one_minus = 1.0 - a
    T_before = np.cumprod(one_minus, axis=1) / one_minus
    return a, incl, T_before


def forward(mu, conic, alpha, color, z, n_cam, height, width, tile_size,
            offsets, lists, background,
            out_color, out_depth, out_normal, out_alpha, out_trans,
            out_argmax):
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    out_color += background[None, None, :]
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tid = ty * tiles_x + tx
            ids = lists[offsets[tid]:offsets[tid + 1]]
            y0, y1 = ty * tile_size, min((ty + 1) * tile_size, height)
            x0, x1 = tx * tile_size, min((tx + 1) * tile_size, width)
            if len(ids) == 0:
                continue
            ys, xs = _tile_pixels(y0, y1, x0, x1)
            a, incl, T_before = _tile_weights(mu, conic, alpha, ids, ys, xs)
            w = a * T_before
            T_fin = np.prod(1.0 - a, axis=1)
            csum = w @ color[ids]
            A = w.sum(axis=1)
            D = w @ z[ids]
            N = w @ n_cam[ids]
            shp = (y1 - y0, x1 - x0)
            out_color[y0:y1, x0:x1] += (
                csum + (T_fin - 1.0)[:, None] * background[None, :]
            ).reshape(shp + (3,))
            out_alpha[y0:y1, x0:x1] = A.reshape(shp)
            out_trans[y0:y1, x0:x1] = T_fin.reshape(shp)
            out_normal[y0:y1, x0:x1] = N.reshape(shp + (3,))
            dep = np.where(A > MIN_ALPHA_ACCUM, D / np.where(A > 0, A, 1.0), 0.0)
            out_depth[y0:y1, x0:x1] = dep.reshape(shp)
            wm = np.where(incl, w, 0.0)
            has = wm.any(axis=1)
            am = np.where(has, ids[np.argmax(wm, axis=1)], -1)
            out_argmax[y0:y1, x0:x1] = am.reshape(shp).astype(np.int32)


def backward(mu, conic, alpha, color, z, n_cam, height, width, tile_size,
             offsets, lists, background,
             g_color, g_depth, g_normal, g_alpha, g_median, argmax_idx,
             d_mu, d_conic, d_alpha, d_color, d_z, d_ncam,
             homo_grad, touch_count):
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size

    # median-normal gradient scatters to the max-weight splat per pixel
    am = argmax_idx.ravel()
    sel = am >= 0
    np.add.at(d_ncam, am[sel], g_median.reshape(-1, 3)[sel])

    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tid = ty * tiles_x + tx
            ids = lists[offsets[tid]:offsets[tid + 1]]
            if len(ids) == 0:
                continue
            y0, y1 = ty * tile_size, min((ty + 1) * tile_size, height)
            x0, x1 = tx * tile_size, min((tx + 1) * tile_size, width)
            ys, xs = _tile_pixels(y0, y1, x0, x1)
            a, incl, T_before = _tile_weights(mu, conic, alpha, ids, ys, xs)
            w = a * T_before
            T_fin = np.prod(1.0 - a, axis=1)
            A = w.sum(axis=1)
            D = w @ z[ids]

            gc = g_color[y0:y1, x0:x1].reshape(-1, 3)
            gn = g_normal[y0:y1, x0:x1].reshape(-1, 3)
            ga = g_alpha[y0:y1, x0:x1].ravel()
            gd = g_depth[y0:y1, x0:x1].ravel()
            hasA = A > MIN_ALPHA_ACCUM
            Asafe = np.where(hasA, A, 1.0)
            gdD = np.where(hasA, gd / Asafe, 0.0)
            gA_eff = ga - np.where(hasA, gd * D / (Asafe * Asafe), 0.0)

            u = (
                gc @ color[ids].T
                + gdD[:, None] * z[ids][None, :]
                + gn @ n_cam[ids].T
                + gA_eff[:, None]
            )
            u = np.where(incl, u, 0.0)
            uw = u * w
            bg_term = (gc @ background) * T_fin
            # S_k = sum_{m>k} u_m w_m + (g_c . bg) T_fin
            suffix = np.cumsum(uw[:, ::-1], axis=1)[:, ::-1] - uw
            S = suffix + bg_term[:, None]
            one_minus = np.where(incl, 1.0 - a, 1.0)
            da = np.where(incl, u * T_before - S / one_minus, 0.0)

            np.add.at(d_color, ids, (w[:, :, None] * gc[:, None, :]).sum(axis=0))
            np.add.at(d_z, ids, (w * gdD[:, None]).sum(axis=0))
            np.add.at(d_ncam, ids, (w[:, :, None] * gn[:, None, :]).sum(axis=0))

            alph = np.where(alpha[ids] > 0, alpha[ids], 1.0)[None, :]
            G = a / alph
            np.add.at(d_alpha, ids, (da * G).sum(axis=0))
            dpow = da * a
            dx = xs[:, None] - mu[ids, 0][None, :]
            dy = ys[:, None] - mu[ids, 1][None, :]
            np.add.at(
                d_conic, ids,
                np.stack(
                    [
                        (dpow * (-0.5 * dx * dx)).sum(axis=0),
                        (dpow * (-dx * dy)).sum(axis=0),
                        (dpow * (-0.5 * dy * dy)).sum(axis=0),
                    ],
                    axis=-1,
                ),
            )
            gmx = dpow * (conic[ids, 0] * dx + conic[ids, 1] * dy)
            gmy = dpow * (conic[ids, 1] * dx + conic[ids, 2] * dy)
            np.add.at(
                d_mu, ids, np.stack([gmx.sum(axis=0), gmy.sum(axis=0)], axis=-1)
            )
            np.add.at(homo_grad, ids, (np.abs(gmx) + np.abs(gmy)).sum(axis=0))
            np.add.at(touch_count, ids, incl.sum(axis=0))
